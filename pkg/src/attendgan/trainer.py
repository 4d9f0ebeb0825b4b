"""Two-stage training: MLE pretraining, critic pretraining, adversarial fine-tuning.

Randomness is counter-based: every draw comes from a generator seeded with
``(seed, purpose, step, ...)``, so a run resumed from a checkpoint replays
exactly the same draws as an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint as ck
from . import diffcore as dc
from . import discriminator as disc
from . import generator as gen
from .data import BOS, EOS, PAD, EncodedSet, batches
from .diffcore import ParamStore
from .metrics import metric_by_name

log = logging.getLogger(__name__)

# purpose tags for counter-based streams
_SAMPLE, _ROLLOUT, _CRITIC_PICK, _CRITIC_FAKE, _PRETRAIN_FAKE = 1, 2, 3, 4, 5


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam1: float = 1.0
    lam2: float = 0.1
    n_roll: int = 5
    g_steps: int = 1
    d_steps: int = 3
    gen_lr: float = 1e-4
    critic_lr: float = 5e-5
    gen_batch: int = 64
    critic_batch: int = 80
    clip: float = 0.01
    adv_epochs: int = 20
    pretrain_epochs: int = 30
    disc_pretrain_steps: int = 100
    max_len: int = 15
    seed: int = 0
    val_metric: str = "cider"

    def check(self):
        for name in ("n_roll", "gen_batch", "critic_batch", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("g_steps", "d_steps", "adv_epochs", "pretrain_epochs", "disc_pretrain_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("lambda weights must be nonnegative")
        if not self.clip > 0:
            raise ValueError("clip bound must be positive")
        metric_by_name(self.val_metric)


def stream(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


# ---------------------------------------------------------------- log


LOG_COLUMNS = ("step", "epoch", "phase", "L1", "L2", "combined", "critic_loss", "mean_real", "mean_fake", "val_metric")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["step"] < self.rows[-1]["step"]:
            raise ValueError("log steps must not decrease")
        full = {c: row.get(c) for c in LOG_COLUMNS}
        full["wall_clock"] = row.get("wall_clock", time.time())
        self.rows.append(full)

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else r[c] for c in LOG_COLUMNS])

    def comparable(self) -> list:
        """Rows without the wall-clock field."""
        return [tuple(r[c] for c in LOG_COLUMNS) for r in self.rows]


# ---------------------------------------------------------------- validation


@dataclass
class ValSet:
    """Images with their reference captions as id lists (no begin/end)."""

    features: np.ndarray
    references: list

    @classmethod
    def from_encoded(cls, data: EncodedSet) -> "ValSet":
        by_image = {}
        for i, img in enumerate(data.image_ids):
            ids = [int(t) for t in data.tokens[i, 1:]]
            ids = ids[:ids.index(EOS)] if EOS in ids else ids
            entry = by_image.setdefault(img, (i, []))
            entry[1].append(ids)
        feats = np.stack([data.features[i] for i, _ in by_image.values()])
        return cls(feats, [refs for _, refs in by_image.values()])


def strip(tokens) -> list:
    out = []
    for t in tokens:
        t = int(t)
        if t in (EOS, PAD):
            break
        if t != BOS:
            out.append(t)
    return out


def evaluate_params(params: ParamStore, val: ValSet, metric: str, max_len: int) -> float:
    toks = gen.greedy_decode(val.features, params, max_len)
    return float(metric_by_name(metric)([strip(t) for t in toks], val.references))


def select_best(checkpoints, val: ValSet | None = None, metric: str = "cider", max_len: int = 15,
                scores=None) -> int:
    """Index of the checkpoint with the highest validation metric, ties to the earliest.

    ``checkpoints`` are generator parameter stores; precomputed ``scores``
    skip the evaluation.
    """
    if not checkpoints:
        raise ValueError("select_best needs at least one checkpoint")
    if scores is None:
        scores = [evaluate_params(p, val, metric, max_len) for p in checkpoints]
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


# ---------------------------------------------------------------- rewards


def critic_scorer(disc_params: ParamStore, seq_len: int) -> Callable:
    return lambda toks: disc.score_values(disc.pad_tokens(toks, seq_len), disc_params)


@dataclass
class RewardMatrix:
    Z: np.ndarray     # [B, T]
    mask: np.ndarray  # [B, T] bool


def mc_rewards(tokens, features, gen_params: ParamStore, critic: Callable, n_roll: int,
               key=0, max_len: int | None = None) -> RewardMatrix:
    """Per-position rewards for sampled captions ``tokens[B, T]``.

    Before the last position each reward is the mean critic score of
    ``n_roll`` rollout completions of the prefix; at the last position
    (the end token, or T for truncated captions) it is the score of the
    caption itself. ``critic`` maps a ``[R, T]`` token array to ``R`` scores.
    Rollout ``n`` of row ``b`` draws from the stream ``(key, b, n)``.
    """
    if n_roll < 1:
        raise ValueError("n_roll must be >= 1")
    if isinstance(tokens, gen.SampleBatch):
        tokens = tokens.tokens
    tokens, mask = gen.sanitize(np.atleast_2d(np.asarray(tokens, dtype=np.int64)))
    B, T = tokens.shape
    max_len = max_len or T
    lengths = mask.sum(axis=1)
    Z = np.zeros((B, T))
    regions, states = gen.prefix_states(features, tokens, gen_params)
    U = np.empty((B, n_roll, T, max_len))
    for b in range(B):
        for n in range(n_roll):
            U[b, n] = stream(key, _ROLLOUT, b, n).random((T, max_len))
    Z[np.arange(B), lengths - 1] = critic(tokens)
    for t in range(1, T):
        rows = np.flatnonzero(lengths > t)
        if rows.size == 0:
            break
        rep = np.repeat(rows, n_roll)
        sub = gen.Regions(dc.Tensor._wrap(regions.feats.data[rep], False),
                          dc.Tensor._wrap(regions.proj.data[rep], False))
        st = gen.GeneratorState(dc.Tensor._wrap(states[t].h.data[rep], False),
                                dc.Tensor._wrap(states[t].c.data[rep], False))
        u = U[rows, :, t - 1].reshape(rows.size * n_roll, max_len)
        done = gen.continue_from(sub, st, tokens[rep, :t], gen_params, max_len, u)
        s = np.asarray(critic(done), dtype=np.float64).reshape(rows.size, n_roll)
        # mean written as offset from the first rollout: exact when all scores agree
        Z[rows, t - 1] = s[:, 0] + (s - s[:, :1]).mean(axis=1)
    return RewardMatrix(Z * mask, mask)


def pg_loss(features, tokens, rewards: RewardMatrix, params: ParamStore) -> dc.Tensor:
    """REINFORCE loss ``-(1/B) sum_b sum_t log G(x_t | ...) * Z[b, t]``;
    rewards are constants."""
    if isinstance(tokens, gen.SampleBatch):
        tokens = tokens.tokens
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if rewards.Z.shape != tokens.shape:
        raise dc.DimensionError(f"rewards {rewards.Z.shape} not aligned with tokens {tokens.shape}")
    fp = gen.teacher_forced(features, tokens, params)
    B = tokens.shape[0]
    weights = (rewards.Z * fp.mask).astype(fp.mask.dtype)
    total = None
    for t, lp in enumerate(fp.logp):
        term = dc.tensor_sum(lp * weights[:, t])
        total = term if total is None else total + term
    return total * (-1.0 / B)


def combined_generator_loss(l1, l2, lam2: float):
    if lam2 < 0:
        raise ValueError("lam2 must be nonnegative")
    return l1 * lam2 + l2


def _finite(value: float, what: str, tlog: TrainLog, **ctx):
    if not np.isfinite(value):
        tlog.append(phase="diverged", **ctx)
        raise TrainingDiverged(f"non-finite {what} ({value}) at step {ctx.get('step')}, epoch {ctx.get('epoch')}")


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    params: ParamStore
    log: TrainLog
    val_scores: list
    best_epoch: int
    opt_state: dc.AdamState


def pretrain_generator(train: EncodedSet, val: ValSet | None, config: TrainConfig,
                       params: ParamStore, batch_size: int | None = None,
                       tlog: TrainLog | None = None, opt_state: dc.AdamState | None = None) -> PretrainResult:
    """MLE training with Adam; returns the epoch with the best validation metric."""
    if len(train) == 0:
        raise ValueError("empty training set")
    tlog = tlog if tlog is not None else TrainLog()
    opt = opt_state or dc.AdamState(lr=config.gen_lr)
    tensors = params.tensors()
    snapshots, scores = [], []
    step = tlog.rows[-1]["step"] + 1 if tlog.rows else 0
    bs = batch_size or config.gen_batch
    for epoch in range(config.pretrain_epochs):
        for batch in batches(train, bs, config.seed, epoch):
            params.zero_grad()
            with dc.Tape() as tape:
                loss = gen.mle_loss(batch.features, batch.tokens, params, config.lam1)
                _finite(float(loss.data), "MLE loss", tlog, step=step, epoch=epoch)
                dc.backward(loss, tape)
            dc.adam_step(tensors, [p.grad for p in tensors], opt)
            tlog.append(step=step, epoch=epoch, phase="pretrain_gen", L2=float(loss.data), combined=float(loss.data))
            step += 1
        if val is not None:
            v = evaluate_params(params, val, config.val_metric, config.max_len)
            scores.append(v)
            snapshots.append(params.copy())
            tlog.rows[-1]["val_metric"] = v
    if not snapshots:
        return PretrainResult(params, tlog, scores, config.pretrain_epochs - 1, opt)
    best = select_best(snapshots, scores=scores)
    log.info("pretrain_generator: best epoch %d (%s=%.3f)", best, config.val_metric, scores[best])
    return PretrainResult(snapshots[best], tlog, scores, best, opt)


def _critic_batch(data: EncodedSet, gen_params: ParamStore, config: TrainConfig, *key):
    """Real gold captions and fresh generator samples on the same images."""
    pick = stream(config.seed, _CRITIC_PICK, *key)
    n = min(config.critic_batch, len(data))
    idx = np.sort(pick.choice(len(data), size=n, replace=False))
    sub = data.take(idx)
    real = disc.pad_tokens(gen.sanitize(sub.tokens[:, 1:])[0], config.max_len)
    fake = gen.sample(sub.features, gen_params, "multinomial", config.max_len,
                      rng=stream(config.seed, _CRITIC_FAKE, *key)).tokens
    return real, fake


def pretrain_discriminator(gen_params: ParamStore, real: EncodedSet, config: TrainConfig,
                           disc_params: ParamStore, tlog: TrainLog | None = None,
                           opt_state: dc.RMSpropState | None = None, after_critic: Callable | None = None):
    """Critic updates on gold captions vs samples from the (frozen) generator;
    ``after_critic(disc_params)`` runs after each update."""
    tlog = tlog if tlog is not None else TrainLog()
    opt = opt_state or dc.RMSpropState(lr=config.critic_lr)
    step = tlog.rows[-1]["step"] + 1 if tlog.rows else 0
    for k in range(config.disc_pretrain_steps):
        r, f = _critic_batch(real, gen_params, config, _PRETRAIN_FAKE, k)
        res = disc.disc_update(r, f, disc_params, opt, config.clip)
        _finite(res.loss, "critic loss", tlog, step=step, epoch=0)
        tlog.append(step=step, epoch=0, phase="pretrain_disc", critic_loss=res.loss,
                    mean_real=res.mean_real, mean_fake=res.mean_fake)
        step += 1
        if after_critic is not None:
            after_critic(disc_params)
    return disc_params, tlog, opt


# ---------------------------------------------------------------- adversarial


@dataclass
class AdversarialState:
    """Everything needed to continue adversarial training bit-exactly."""

    gen_params: ParamStore
    disc_params: ParamStore
    gen_opt: dc.AdamState
    disc_opt: dc.RMSpropState
    epoch: int = 0
    step: int = 0
    iteration: int = 0
    val_scores: list = field(default_factory=list)
    best_params: ParamStore | None = None
    best_epoch: int = -1
    log: TrainLog = field(default_factory=TrainLog)


def start_adversarial(gen_params: ParamStore, disc_params: ParamStore, config: TrainConfig) -> AdversarialState:
    return AdversarialState(gen_params.copy(), disc_params.copy(),
                            dc.AdamState(lr=config.gen_lr), dc.RMSpropState(lr=config.critic_lr))


def generator_step(batch: EncodedSet, state: AdversarialState, config: TrainConfig,
                   critic: Callable | None = None, key=0) -> dict:
    """Sample, score with rollouts, and take one Adam step on ``lam2 * L1 + L2``."""
    params = state.gen_params
    critic = critic or critic_scorer(state.disc_params, config.max_len)
    l1_value = 0.0
    params.zero_grad()
    with dc.Tape() as tape:
        l2 = gen.mle_loss(batch.features, batch.tokens, params, config.lam1)
        if config.lam2 > 0:
            samples = gen.sample(batch.features, params, "multinomial", config.max_len,
                                 rng=stream(config.seed, _SAMPLE, key))
            Z = mc_rewards(samples, batch.features, params, critic, config.n_roll,
                           key=stream(config.seed, _ROLLOUT, key).integers(2 ** 62), max_len=config.max_len)
            l1 = pg_loss(batch.features, samples.tokens, Z, params)
            loss = combined_generator_loss(l1, l2, config.lam2)
            l1_value = float(l1.data)
        else:
            loss = l2
        _finite(float(loss.data), "generator loss", state.log, step=state.step, epoch=state.epoch)
        dc.backward(loss, tape)
    tensors = params.tensors()
    dc.adam_step(tensors, [p.grad for p in tensors], state.gen_opt)
    return {"L1": l1_value, "L2": float(l2.data), "combined": float(loss.data)}


def adversarial_train(train: EncodedSet, val: ValSet | None, state: AdversarialState, config: TrainConfig,
                      critic: Callable | None = None, on_epoch: Callable | None = None,
                      epochs: int | None = None, after_critic: Callable | None = None) -> AdversarialState:
    """Alternate ``g_steps`` generator updates and ``d_steps`` critic updates
    per mini-batch of ``train`` until ``config.adv_epochs`` epochs are done.

    ``critic`` replaces the learned critic as the reward source (critic
    updates still run). ``on_epoch(state)`` is called after each epoch, e.g.
    to write a checkpoint; ``after_critic(state)`` after every critic
    update; ``epochs`` stops early (for interrupt tests).
    """
    config.check()
    tlog = state.log
    stop = config.adv_epochs if epochs is None else min(config.adv_epochs, state.epoch + epochs)
    while state.epoch < stop:
        epoch = state.epoch
        for batch in batches(train, config.gen_batch, config.seed + 1, epoch):
            it = state.iteration
            for g in range(config.g_steps):
                terms = generator_step(batch, state, config, critic, key=it * 1000 + g)
                tlog.append(step=state.step, epoch=epoch, phase="gen", **terms)
                state.step += 1
            for d in range(config.d_steps):
                real, fake = _critic_batch(train, state.gen_params, config, it, d)
                res = disc.disc_update(real, fake, state.disc_params, state.disc_opt, config.clip)
                _finite(res.loss, "critic loss", tlog, step=state.step, epoch=epoch)
                tlog.append(step=state.step, epoch=epoch, phase="disc", critic_loss=res.loss,
                            mean_real=res.mean_real, mean_fake=res.mean_fake)
                state.step += 1
                if after_critic is not None:
                    after_critic(state)
            state.iteration += 1
        v = None
        if val is not None:
            v = evaluate_params(state.gen_params, val, config.val_metric, config.max_len)
            state.val_scores.append(v)
            if state.best_params is None or v > state.val_scores[state.best_epoch]:
                state.best_params, state.best_epoch = state.gen_params.copy(), epoch
        tlog.append(step=state.step, epoch=epoch, phase="epoch", val_metric=v)
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state


def final_generator(state: AdversarialState) -> ParamStore:
    return state.best_params if state.best_params is not None else state.gen_params


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


# ---------------------------------------------------------------- persistence


def adversarial_checkpoint(state: AdversarialState, config: dict, vocab: list):
    """Everything needed to resume ``adversarial_train`` bit-exactly."""
    c = ck.Checkpoint(config=dict(config), vocab=list(vocab))
    ck.put_params(c, "gen", state.gen_params)
    ck.put_params(c, "disc", state.disc_params)
    if state.best_params is not None:
        ck.put_params(c, "best", state.best_params)
    ck.put_adam(c, "gen_opt", state.gen_opt, state.gen_params.names())
    ck.put_rmsprop(c, "disc_opt", state.disc_opt, state.disc_params.names())
    c.state.update({
        "stage": "adversarial",
        "epoch": state.epoch, "step": state.step, "iteration": state.iteration,
        "val_scores": state.val_scores, "best_epoch": state.best_epoch,
        "rng": {"scheme": "counter", "seed": config.get("seed"), "epoch": state.epoch,
                "iteration": state.iteration},
        "log": state.log.rows,
    })
    return c


def adversarial_from_checkpoint(c) -> AdversarialState:
    s = c.state
    if s.get("stage") != "adversarial":
        raise ck.CheckpointError(f"not an adversarial-stage checkpoint (stage {s.get('stage')!r})")
    return AdversarialState(
        gen_params=ck.get_params(c, "gen"),
        disc_params=ck.get_params(c, "disc"),
        gen_opt=ck.get_adam(c, "gen_opt"),
        disc_opt=ck.get_rmsprop(c, "disc_opt"),
        epoch=s["epoch"], step=s["step"], iteration=s["iteration"],
        val_scores=list(s["val_scores"]),
        best_params=ck.get_params(c, "best") if ck.has_params(c, "best") else None,
        best_epoch=s["best_epoch"],
        log=TrainLog([dict(r) for r in s["log"]]),
    )
