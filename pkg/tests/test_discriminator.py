import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attendgan import diffcore as dc
from attendgan import discriminator as disc
from attendgan.data import PAD
from attendgan.diffcore import Tensor, precision


def make(V=9, T=6, M=4, windows=(2, 3), F=3, seed=0, scale=1.0):
    cfg = disc.CriticConfig(V, T, M, windows, F)
    p = disc.init_critic(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for k in p.names():
        p[k].data[...] = (rng.normal(size=p[k].shape) * scale).astype(p[k].data.dtype)
    return p


def reference_score(tokens, p, mode, eps=1e-5):
    """Explicit loops: convolution, batch statistics, ReLU, max-pool, linear."""
    P = {k: p[k].data.astype(np.float64) for k in p.names()}
    B, T = tokens.shape
    pooled = [[] for _ in range(B)]
    for C in disc.critic_windows(p):
        K, b = P[f"conv{C}_k"], P[f"conv{C}_b"]
        F = K.shape[0]
        L = T - C + 1
        v = np.zeros((B, L, F))
        for i in range(B):
            S = P["embed"][tokens[i]]
            for j in range(L):
                for f in range(F):
                    v[i, j, f] = np.sum(K[f] * S[j:j + C]) + b[f]
        if mode == "train":
            mu, var = v.reshape(-1, F).mean(0), v.reshape(-1, F).var(0)
        else:
            mu, var = p.buffers[f"bn{C}_mean"], p.buffers[f"bn{C}_var"]
        y = P[f"bn{C}_gamma"] * (v - mu) / np.sqrt(var + eps) + P[f"bn{C}_beta"]
        y = np.maximum(y, 0)
        for i in range(B):
            pooled[i].extend(y[i].max(axis=0))
    return np.array([np.dot(P["fc_w"], f) + P["fc_b"] for f in pooled])


def test_param_shapes():
    p = disc.init_critic(disc.CriticConfig(11, 15, 8, (2, 3, 4, 5), 6), 0)
    assert p["embed"].shape == (11, 8)
    assert p["conv4_k"].shape == (6, 4, 8)
    assert p["fc_w"].shape == (24,)
    assert disc.critic_windows(p) == (2, 3, 4, 5)
    assert set(p.buffers) == {f"bn{c}_{s}" for c in (2, 3, 4, 5) for s in ("mean", "var")}


def test_init_within_clip_box():
    p = disc.init_critic(disc.CriticConfig(30), 3)
    assert max(np.abs(p[k].data).max() for k in p.names()) <= 0.01


def test_window_longer_than_caption():
    with pytest.raises(dc.ConfigurationError):
        disc.CriticConfig(5, 3, windows=(2, 4)).check()
    p = make()
    with pytest.raises(dc.ConfigurationError):
        disc.score(np.ones((1, 2), dtype=int), p)


def test_pad_tokens():
    out = disc.pad_tokens([[4, 5, 2]], 5)
    assert out.tolist() == [[4, 5, 2, PAD, PAD]]
    assert disc.pad_tokens([[4, 5, 6, 7]], 2).tolist() == [[4, 5]]


def test_all_pad_embedding():
    p = make()
    S = disc.embed_caption(np.full(6, PAD), p).data
    np.testing.assert_array_equal(S, np.tile(p["embed"].data[PAD], (6, 1)))


def test_zero_params_score_zero():
    p = make()
    for k in p.names():
        p[k].data[...] = 0
    toks = np.random.default_rng(0).integers(0, 9, (4, 6))
    np.testing.assert_array_equal(disc.score(toks, p, "train").data, 0)
    np.testing.assert_array_equal(disc.score_values(toks, p), 0)


@pytest.mark.parametrize("mode", ["train", "infer"])
@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_loop_reference(mode, seed):
    p = make(seed=seed)
    for k in p.buffers:
        p.buffers[k][...] = np.abs(np.random.default_rng(seed).normal(size=p.buffers[k].shape)) + 0.1
    toks = np.random.default_rng(seed).integers(0, 9, (5, 6))
    expect = reference_score(toks, p, mode)
    got = disc.score(toks, p, mode).data
    np.testing.assert_allclose(got, expect, rtol=1e-4, atol=1e-5)


def test_train_mode_updates_running_stats_infer_does_not():
    p = make()
    before = {k: v.copy() for k, v in p.buffers.items()}
    disc.score(np.ones((2, 6), dtype=int), p, "infer")
    assert all(np.array_equal(before[k], p.buffers[k]) for k in before)
    disc.score(np.arange(12).reshape(2, 6) % 9, p, "train")
    assert any(not np.array_equal(before[k], p.buffers[k]) for k in before)


def test_infer_scores_are_per_caption():
    p = make()
    toks = np.random.default_rng(1).integers(0, 9, (4, 6))
    together = disc.score_values(toks, p)
    alone = np.array([disc.score_values(t[None], p)[0] for t in toks])
    np.testing.assert_allclose(together, alone, rtol=1e-5)


def test_critic_gradients():
    with precision(np.float64):
        p = make(seed=4, scale=0.5)
        toks = np.random.default_rng(4).integers(0, 9, (4, 6))
        for name in p.names():
            def f(x, name=name):
                old = p.params[name]
                p.params[name] = x
                try:
                    return (disc.score(toks, p, "train") * np.arange(1.0, 5.0)).sum()
                finally:
                    p.params[name] = old
            x = Tensor(p[name].data.copy(), requires_grad=True)
            assert dc.gradient_check(f, x) < 1e-3, name


def test_wgan_loss_examples():
    assert disc.wgan_loss([1.0, 3.0], [0.0, 0.0]) == -2.0
    assert disc.wgan_loss([0.5], [0.5]) == 0.0
    with pytest.raises(ValueError):
        disc.wgan_loss([], [1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_wgan_loss_antisymmetric(real, fake):
    assert disc.wgan_loss(real, fake) == pytest.approx(-disc.wgan_loss(fake, real), abs=1e-9)


def test_update_clips_parameters():
    p = make(scale=0.001)
    state = dc.RMSpropState(lr=0.5)
    rng = np.random.default_rng(0)
    step = disc.disc_update(rng.integers(0, 9, (4, 6)), rng.integers(0, 9, (3, 6)), p, state, 0.01)
    assert np.isfinite(step.loss)
    assert max(np.abs(p[k].data).max() for k in p.names()) <= 0.01
    assert max(np.abs(p[k].data).max() for k in p.names()) == pytest.approx(0.01)


def test_update_rejects_bad_batches():
    p = make()
    with pytest.raises(ValueError):
        disc.disc_update(np.zeros((0, 6), dtype=int), np.ones((2, 6), dtype=int), p, dc.RMSpropState())
    with pytest.raises(dc.DimensionError):
        disc.disc_update(np.ones((2, 5), dtype=int), np.ones((2, 6), dtype=int), p, dc.RMSpropState())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-4, 1.0))
def test_clip_invariant_holds_after_any_update(seed, lr):
    p = make(seed=seed % 7, scale=0.05)
    rng = np.random.default_rng(seed)
    state = dc.RMSpropState(lr=lr)
    for _ in range(2):
        disc.disc_update(rng.integers(0, 9, (3, 6)), rng.integers(0, 9, (3, 6)), p, state, 0.01)
        assert all(np.abs(p[k].data).max() <= 0.01 for k in p.names())


@pytest.mark.parametrize("seed", range(3))
def test_separable_toy_gap_positive(seed):
    cfg = disc.CriticConfig(12, 15, 8, (2, 3), 8)
    p = disc.init_critic(cfg, seed)
    state = dc.RMSpropState(lr=5e-5)
    rng = np.random.default_rng(seed)
    real = np.full((16, 15), PAD)
    real[:, :5] = rng.integers(4, 8, (16, 5))
    fake = np.full((16, 15), PAD)
    fake[:, :5] = rng.integers(8, 12, (16, 5))
    for _ in range(200):
        disc.disc_update(real, fake, p, state, 0.01)
    s = disc.score_values(np.concatenate([real, fake]), p)
    assert s[:16].mean() > s[16:].mean()
