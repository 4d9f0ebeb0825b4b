"""Soft-attention LSTM caption generator.

All functions work on batches: region features are ``[B, K, D]`` arrays and
token arrays are ``[B, T]``. At step ``t`` the generator attends over regions
from the previous hidden state, feeds the previous word embedding and the
attention context into the LSTM, and predicts the next word from the context
and the new hidden state.

Gate blocks inside ``lstm_H`` / ``lstm_W`` / ``lstm_A`` / ``lstm_b`` are
ordered input, forget, modulation, output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .data import BOS, EOS, PAD
from .diffcore import ParamStore, Tensor


@dataclass
class GeneratorConfig:
    vocab_size: int
    feature_dim: int = 16
    embed_dim: int = 32
    hidden: int = 64
    attn_dim: int = 32

    def shapes(self) -> dict:
        V, M, D, H, A = self.vocab_size, self.embed_dim, self.feature_dim, self.hidden, self.attn_dim
        return {
            "embed": (V, M),
            "lstm_H": (H, 4 * H),
            "lstm_W": (M, 4 * H),
            "lstm_A": (D, 4 * H),
            "lstm_b": (4 * H,),
            "att_Wa": (D, A),
            "att_Wh": (H, A),
            "att_we": (A,),
            "out_Wa": (D, V),
            "out_Wh": (H, V),
            "out_b": (V,),
            "init_h": (D, H),
            "init_c": (D, H),
        }


def init_generator(config: GeneratorConfig, seed: int = 0) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases
    except a forget-gate bias of 1."""
    rng = np.random.default_rng([seed, 0x6E])
    params = {}
    for name, shape in config.shapes().items():
        if name in ("lstm_b", "out_b"):
            arr = np.zeros(shape)
            if name == "lstm_b":
                arr[config.hidden:2 * config.hidden] = 1.0
        elif name == "embed":
            arr = rng.uniform(-0.1, 0.1, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return ParamStore(params)


def generator_config_of(params: ParamStore) -> GeneratorConfig:
    V, M = params["embed"].shape
    D, A = params["att_Wa"].shape
    return GeneratorConfig(vocab_size=V, feature_dim=D, embed_dim=M, hidden=params["lstm_H"].shape[0], attn_dim=A)


class GeneratorState(NamedTuple):
    h: Tensor
    c: Tensor


class Regions(NamedTuple):
    """Region features with their attention projection, computed once per sequence."""

    feats: Tensor
    proj: Tensor


def _as_batch(features) -> np.ndarray:
    f = np.asarray(features.data if isinstance(features, Tensor) else features)
    if f.ndim == 2:
        f = f[None]
    if f.ndim != 3:
        raise dc.DimensionError(f"region features must be [K, D] or [B, K, D], got shape {f.shape}")
    return f


def prepare_regions(features, params: ParamStore) -> Regions:
    f = _as_batch(features)
    D = params["att_Wa"].shape[0]
    if f.shape[2] != D:
        raise dc.DimensionError(f"region features have D={f.shape[2]}, generator expects D={D}")
    feats = Tensor(f)
    return Regions(feats, dc.matmul(feats, params["att_Wa"]))


def init_state(features, params: ParamStore) -> GeneratorState:
    """h0 = tanh(mean_k a_k @ P_h), c0 = tanh(mean_k a_k @ P_c)."""
    regions = features if isinstance(features, Regions) else prepare_regions(features, params)
    K = regions.feats.shape[1]
    mean = dc.tensor_sum(regions.feats, axis=1) * (1.0 / K)
    return GeneratorState(dc.tanh(mean @ params["init_h"]), dc.tanh(mean @ params["init_c"]))


def attend(state: GeneratorState, regions: Regions, params: ParamStore):
    """Attention weights ``[B, K]`` and context ``[B, D]`` from the previous hidden state."""
    B, K, _ = regions.feats.shape
    hproj = dc.reshape(state.h @ params["att_Wh"], (B, 1, -1))
    energies = dc.matmul(dc.tanh(regions.proj + hproj), params["att_we"])
    alpha = dc.softmax_rows(energies)
    return alpha, dc.weighted_sum(alpha, regions.feats)


def lstm_step(state: GeneratorState, prev_ids, context: Tensor, params: ParamStore) -> GeneratorState:
    H = params["lstm_H"].shape[0]
    emb = dc.embed_lookup(params["embed"], prev_ids)
    z = state.h @ params["lstm_H"] + emb @ params["lstm_W"] + context @ params["lstm_A"] + params["lstm_b"]
    i = dc.sigmoid(z[:, :H])
    f = dc.sigmoid(z[:, H:2 * H])
    g = dc.tanh(z[:, 2 * H:3 * H])
    o = dc.sigmoid(z[:, 3 * H:])
    c = f * state.c + i * g
    return GeneratorState(o * dc.tanh(c), c)


def word_logits(context: Tensor, h: Tensor, params: ParamStore) -> Tensor:
    return context @ params["out_Wa"] + h @ params["out_Wh"] + params["out_b"]


def word_distribution(context: Tensor, h: Tensor, params: ParamStore) -> Tensor:
    return dc.softmax_rows(word_logits(context, h, params))


def step(state: GeneratorState, prev_ids, regions: Regions, params: ParamStore):
    """One decoding step: ``(new_state, logits, alpha)``."""
    alpha, ctx = attend(state, regions, params)
    new = lstm_step(state, prev_ids, ctx, params)
    return new, word_logits(ctx, new.h, params), alpha


# ---------------------------------------------------------------- teacher forcing


def valid_mask(targets: np.ndarray) -> np.ndarray:
    """True up to and including each row's first end token."""
    is_end = targets == EOS
    before = np.cumsum(is_end, axis=1) - is_end
    return before == 0


def sanitize(targets: np.ndarray) -> tuple:
    """``(targets with everything after the first end token set to pad, mask)``."""
    mask = valid_mask(targets)
    return np.where(mask, targets, PAD), mask


@dataclass
class ForcedPass:
    logp: list       # per step Tensor[B]: log p(target_t)
    alphas: list     # per step Tensor[B, K]
    mask: np.ndarray  # [B, T] float


def teacher_forced(features, targets: np.ndarray, params: ParamStore) -> ForcedPass:
    """Run the generator over ``targets[B, T]`` (no begin token), feeding
    each gold word as the next input."""
    targets, mask = sanitize(np.asarray(targets, dtype=np.int64))
    V = params["embed"].shape[0]
    if ((targets < 0) | (targets >= V)).any():
        raise IndexError(f"token id outside vocabulary of size {V}")
    regions = prepare_regions(features, params)
    if regions.feats.shape[0] != targets.shape[0]:
        raise dc.DimensionError(f"{regions.feats.shape[0]} feature sets for {targets.shape[0]} captions")
    state = init_state(regions, params)
    prev = np.full(targets.shape[0], BOS, dtype=np.int64)
    logps, alphas = [], []
    for t in range(targets.shape[1]):
        if not mask[:, t].any():
            break
        state, logits, alpha = step(state, prev, regions, params)
        logps.append(dc.pick(dc.log_softmax_rows(logits), targets[:, t]))
        alphas.append(alpha)
        prev = targets[:, t]
    return ForcedPass(logps, alphas, mask.astype(regions.feats.data.dtype))


def mle_loss(features, tokens, params: ParamStore, lam1: float = 1.0,
             max_len: int | None = None, return_terms: bool = False):
    """Teacher-forced NLL plus ``lam1 * sum_k (1 - sum_t alpha_tk)^2``, batch mean.

    ``tokens`` are encoded captions ``[B, 1 + T]`` starting with the begin
    token. Positions after each caption's end token count in neither term.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] < 2 or (tokens[:, 0] != BOS).any():
        raise ValueError("captions must start with the begin token")
    if max_len is not None and tokens.shape[1] - 1 > max_len:
        raise ValueError(f"caption length {tokens.shape[1] - 1} exceeds T_max={max_len}")
    if not (tokens[:, 1:] == EOS).any(axis=1).all():
        raise ValueError("every caption needs an end token (empty or unterminated caption)")
    fp = teacher_forced(features, tokens[:, 1:], params)
    B = tokens.shape[0]
    nll = None
    attn_total = None
    for t, (lp, alpha) in enumerate(zip(fp.logp, fp.alphas)):
        m = fp.mask[:, t]
        term = dc.tensor_sum(lp * m)
        nll = term if nll is None else nll + term
        weighted = alpha * m[:, None]
        attn_total = weighted if attn_total is None else attn_total + weighted
    resid = 1.0 - attn_total
    reg = dc.tensor_sum(resid * resid)
    nll_term = nll * (-1.0 / B)
    reg_term = reg * (1.0 / B)
    loss = nll_term + reg_term * lam1
    if return_terms:
        return loss, {"nll": float(nll_term.data), "attention_penalty": float(reg_term.data)}
    return loss


# ---------------------------------------------------------------- sampling


@dataclass
class SampleBatch:
    """Sampled captions: ``tokens[B, T]`` (pad after the end token),
    per-step ``logprobs`` (0 where unused), ``attention[B, T, K]`` and
    ``lengths`` counting the end token."""

    tokens: np.ndarray
    logprobs: np.ndarray
    attention: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return self.tokens.shape[0]

    def caption(self, i: int) -> "SampledCaption":
        n = int(self.lengths[i])
        return SampledCaption(self.tokens[i, :n].copy(), self.logprobs[i, :n].copy(), self.attention[i, :n].copy())


@dataclass
class SampledCaption:
    tokens: np.ndarray
    logprobs: np.ndarray
    attention: np.ndarray


def _choose(logits: np.ndarray, mode: str, u: np.ndarray | None) -> tuple:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if mode == "greedy":
        tok = logp.argmax(axis=1)
    elif mode == "multinomial":
        cdf = np.cumsum(np.exp(logp), axis=1)
        cdf /= cdf[:, -1:]
        tok = (cdf <= u[:, None]).sum(axis=1)
    else:
        raise ValueError(f"unknown decoding mode {mode!r}")
    return tok, logp[np.arange(len(tok)), tok]


def _decode(state, prev, regions, params, start, max_len, mode, uniforms, done,
            tokens, logprobs, attention):
    """Fill positions ``start..max_len-1`` of the output arrays in place."""
    for t in range(start, max_len):
        if done.all():
            break
        state, logits, alpha = step(state, prev, regions, params)
        u = None if uniforms is None else uniforms[:, t]
        tok, lp = _choose(logits.data, mode, u)
        tok = np.where(done, PAD, tok)
        tokens[:, t] = tok
        logprobs[:, t] = np.where(done, 0.0, lp)
        if attention is not None:
            attention[:, t] = np.where(done[:, None], 0.0, alpha.data)
        done = done | (tok == EOS)
        prev = np.where(done, PAD, tok)
    return done


def sample(features, params: ParamStore, mode: str = "multinomial", max_len: int = 15,
           rng: np.random.Generator | None = None, uniforms: np.ndarray | None = None) -> SampleBatch:
    """Autoregressive decoding from the begin token.

    Multinomial draws use ``uniforms[B, max_len]`` when given, else values
    drawn from ``rng``. Greedy ties go to the lowest token id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with dc.no_grad():
        regions = prepare_regions(features, params)
        B, K, _ = regions.feats.shape
        if mode == "multinomial" and uniforms is None:
            if rng is None:
                raise ValueError("multinomial sampling needs rng or uniforms")
            uniforms = rng.random((B, max_len))
        tokens = np.full((B, max_len), PAD, dtype=np.int64)
        logprobs = np.zeros((B, max_len))
        attention = np.zeros((B, max_len, K))
        state = init_state(regions, params)
        _decode(state, np.full(B, BOS, dtype=np.int64), regions, params, 0, max_len, mode,
                       uniforms, np.zeros(B, dtype=bool), tokens, logprobs, attention)
    ended = (tokens == EOS)
    lengths = np.where(ended.any(axis=1), ended.argmax(axis=1) + 1, max_len)
    return SampleBatch(tokens, logprobs, attention, lengths)


def sample_caption(features, params: ParamStore, mode: str = "multinomial", max_len: int = 15,
                   rng: np.random.Generator | None = None) -> SampledCaption:
    """Single-image convenience wrapper around :func:`sample`."""
    return sample(np.asarray(features)[None] if np.ndim(features) == 2 else features,
                  params, mode, max_len, rng).caption(0)


def prefix_states(features, tokens: np.ndarray, params: ParamStore) -> tuple:
    """``(regions, states)`` for teacher forcing over ``tokens[B, T]``.

    ``states[t]`` is the state fed into the step that predicts
    ``tokens[:, t]`` together with previous word ``tokens[:, t-1]``;
    ``states[0]`` is the initial state.
    """
    tokens, _ = sanitize(np.asarray(tokens, dtype=np.int64))
    with dc.no_grad():
        regions = prepare_regions(features, params)
        state = init_state(regions, params)
        out = [state]
        prev = np.full(tokens.shape[0], BOS, dtype=np.int64)
        for t in range(tokens.shape[1]):
            _, ctx = attend(state, regions, params)
            state = lstm_step(state, prev, ctx, params)
            out.append(state)
            prev = tokens[:, t]
    return regions, out


def continue_from(regions: Regions, state: GeneratorState, prefix: np.ndarray, params: ParamStore,
                  max_len: int, uniforms: np.ndarray) -> np.ndarray:
    """Sample the rest of each row of ``prefix[R, t]`` given the state
    that predicts position ``t``. Rows already ended are padded."""
    R, t = prefix.shape
    tokens = np.full((R, max_len), PAD, dtype=np.int64)
    tokens[:, :t] = prefix
    done = (prefix == EOS).any(axis=1)
    if t >= max_len:
        return tokens
    with dc.no_grad():
        _decode(state, np.where(done, PAD, prefix[:, t - 1]), regions, params, t, max_len, "multinomial",
                uniforms, done, tokens, np.zeros((R, max_len)), None)
    return tokens


def rollout(prefix, features, params: ParamStore, max_len: int,
            rng: np.random.Generator | None = None, uniforms: np.ndarray | None = None) -> np.ndarray:
    """Complete ``prefix[R, t]`` (t >= 1) to ``max_len`` tokens by multinomial sampling.

    The generator is re-run over the prefix with teacher forcing first; the
    prefix is returned verbatim and rows that already ended are left alone.
    """
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
    R, t = prefix.shape
    V = params["embed"].shape[0]
    if t < 1 or t > max_len:
        raise ValueError(f"prefix length {t} outside [1, {max_len}]")
    if ((prefix < 0) | (prefix >= V)).any():
        raise IndexError(f"prefix token outside vocabulary of size {V}")
    if uniforms is None:
        if rng is None:
            raise ValueError("rollout needs rng or uniforms")
        uniforms = rng.random((R, max_len))
    feats = _as_batch(features)
    if feats.shape[0] == 1 and R > 1:
        feats = np.repeat(feats, R, axis=0)
    regions, states = prefix_states(feats, prefix, params)
    return continue_from(regions, states[t], prefix, params, max_len, uniforms)


def greedy_decode(features, params: ParamStore, max_len: int) -> np.ndarray:
    return sample(features, params, "greedy", max_len).tokens
