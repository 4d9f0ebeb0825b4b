"""Convolutional Wasserstein critic over fixed-length token matrices.

A caption (right-padded to ``seq_len`` with the pad token) is embedded into
an ``[T, M]`` matrix; for each window size a bank of full-width temporal
convolutions is applied, batch-normalised per filter over all (caption,
position) pairs, rectified and max-pooled over time. The pooled features feed
one linear unit whose output is the (unbounded) realness score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import PAD
from .diffcore import ParamStore, Tensor


@dataclass
class CriticConfig:
    vocab_size: int
    seq_len: int = 15
    embed_dim: int = 32
    windows: tuple = (2, 3, 4, 5)
    filters: int = 32
    clip: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def check(self):
        if max(self.windows) > self.seq_len:
            raise dc.ConfigurationError(
                f"critic window {max(self.windows)} exceeds caption length {self.seq_len}")


def init_critic(config: CriticConfig, seed: int = 0) -> ParamStore:
    """Weights drawn inside the clip box; batch-norm scale starts at the bound."""
    config.check()
    rng = np.random.default_rng([seed, 0xD1])
    b = config.clip
    V, M, F = config.vocab_size, config.embed_dim, config.filters
    params = {"embed": rng.uniform(-b, b, (V, M))}
    buffers = {}
    for C in config.windows:
        params[f"conv{C}_k"] = rng.uniform(-b, b, (F, C, M))
        params[f"conv{C}_b"] = np.zeros(F)
        params[f"bn{C}_gamma"] = np.full(F, b)
        params[f"bn{C}_beta"] = np.zeros(F)
        buffers[f"bn{C}_mean"] = np.zeros(F, dtype=np.float32)
        buffers[f"bn{C}_var"] = np.ones(F, dtype=np.float32)
    params["fc_w"] = rng.uniform(-b, b, (F * len(config.windows),))
    params["fc_b"] = np.zeros(())
    store = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    return ParamStore(store, buffers)


def critic_windows(params: ParamStore) -> tuple:
    return tuple(sorted(int(k[4:-2]) for k in params.names() if k.startswith("conv") and k.endswith("_k")))


def pad_tokens(tokens, seq_len: int) -> np.ndarray:
    """Right-pad (or truncate) ``tokens[B, T]`` to ``seq_len`` with the pad id."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    out = np.full((tokens.shape[0], seq_len), PAD, dtype=np.int64)
    n = min(seq_len, tokens.shape[1])
    out[:, :n] = tokens[:, :n]
    return out


def embed_caption(tokens, params: ParamStore) -> Tensor:
    """``[B, T, M]`` embedding matrix (``[T, M]`` for a single caption)."""
    return dc.embed_lookup(params["embed"], np.asarray(tokens, dtype=np.int64))


def score(tokens, params: ParamStore, mode: str = "infer",
          eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Critic scores ``[B]`` for ``tokens[B, T]``; ``train`` mode updates
    the batch-norm running statistics."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    windows = critic_windows(params)
    if max(windows) > tokens.shape[1]:
        raise dc.ConfigurationError(f"critic window {max(windows)} exceeds caption length {tokens.shape[1]}")
    S = embed_caption(tokens, params)
    B = tokens.shape[0]
    pooled = []
    for C in windows:
        v = dc.conv_time(S, params[f"conv{C}_k"], params[f"conv{C}_b"])
        L, F = v.shape[1], v.shape[2]
        flat = dc.reshape(v, (B * L, F))
        normed = dc.batch_norm(flat, params[f"bn{C}_gamma"], params[f"bn{C}_beta"], mode,
                               params.buffers[f"bn{C}_mean"], params.buffers[f"bn{C}_var"],
                               eps=eps, momentum=momentum)
        act = dc.relu(dc.reshape(normed, (B, L, F)))
        pooled.append(dc.max_over_time(act))
    feats = dc.concat(pooled, axis=1)
    return feats @ params["fc_w"] + params["fc_b"]


def score_values(tokens, params: ParamStore) -> np.ndarray:
    """Inference-mode scores as a plain array (no tape)."""
    with dc.no_grad():
        return score(tokens, params, "infer").data.astype(np.float64)


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def wgan_loss(real_scores, fake_scores):
    """``mean(fake) - mean(real)``; the critic minimises this."""
    if np.size(_values(real_scores)) == 0 or np.size(_values(fake_scores)) == 0:
        raise ValueError("wgan_loss needs nonempty real and fake score lists")
    if isinstance(real_scores, Tensor) or isinstance(fake_scores, Tensor):
        return fake_scores.mean() - real_scores.mean()
    return float(np.mean(fake_scores) - np.mean(real_scores))


@dataclass
class CriticStep:
    loss: float
    mean_real: float
    mean_fake: float


def disc_update(real_tokens, fake_tokens, params: ParamStore, state: dc.RMSpropState,
                clip_bound: float = 0.01) -> CriticStep:
    """One RMSprop step on the WGAN objective, then clip every parameter.

    Real and fake captions share one forward pass so batch-norm statistics
    are computed over the mixed batch.
    """
    real = np.atleast_2d(np.asarray(real_tokens, dtype=np.int64))
    fake = np.atleast_2d(np.asarray(fake_tokens, dtype=np.int64))
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("disc_update needs nonempty real and fake batches")
    if real.shape[1] != fake.shape[1]:
        raise dc.DimensionError(f"real captions have length {real.shape[1]}, fake {fake.shape[1]}")
    params.zero_grad()
    with dc.Tape() as tape:
        scores = score(np.concatenate([real, fake]), params, "train")
        n = len(real)
        loss = wgan_loss(scores[:n], scores[n:])
        dc.backward(loss, tape)
    tensors = params.tensors()
    dc.rmsprop_step(tensors, [p.grad for p in tensors], state)
    dc.clip_params(tensors, clip_bound)
    s = scores.data
    return CriticStep(float(loss.data), float(s[:n].mean()), float(s[n:].mean()))
