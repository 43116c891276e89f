"""Gaussianity regularizer, its hand gradients, and the inversion walk.

Oracles: a double-loop reimplementation of the pairwise score, central
finite differences for both gradients, and the exact DDIM replay of a
stored trace.
"""

import numpy as np
import pytest

from lomoe.errors import NumericError
from lomoe.grids import SeededRng
from lomoe.schedule import ddim_denoise_step, make_schedule
from lomoe.denoiser import make_prompt, predict_noise
from lomoe.inversion import (
    InversionTrace,
    RegConfig,
    invert,
    l_kl,
    l_kl_grad,
    l_pair,
    l_pair_grad,
    regularize_noise,
)

EPS_STAB = 1e-8


# ------------------------------------------------------------ oracles


def brute_pool(level):
    h, w, c = level.shape
    out = np.zeros((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                out[i, j, ch] = 0.25 * (
                    level[2 * i, 2 * j, ch]
                    + level[2 * i, 2 * j + 1, ch]
                    + level[2 * i + 1, 2 * j, ch]
                    + level[2 * i + 1, 2 * j + 1, ch]
                )
    return out


def brute_l_pair(eta, levels):
    # direct transcription: sum over offsets and pixels with circular
    # indexing, 1/S^2 per level, coarser levels via 2x2 average pooling
    total = 0.0
    level = eta.copy()
    for li in range(levels):
        s = level.shape[0]
        acc = 0.0
        for d in range(1, s):
            for y in range(s):
                for x in range(s):
                    for ch in range(level.shape[2]):
                        acc += level[y, x, ch] * (
                            level[(y - d) % s, x, ch] + level[y, (x - d) % s, ch]
                        )
        total += acc / (s * s)
        if li < levels - 1:
            level = brute_pool(level)
    return total


def fd_grad(f, x, h=1e-3):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b)))


# ---------------------------------------------------------- pair score


def test_l_pair_hand_example():
    # 2x2 constant ones, one level: (1/4) * sum of 1*(1+1) over 4 pixels = 2
    assert l_pair(np.ones((2, 2, 1)), 1) == pytest.approx(2.0, abs=1e-12)


def test_l_pair_matches_brute_force():
    rng = SeededRng(60)
    for k, levels in [(0, 1), (1, 2), (2, 3)]:
        eta = rng.child(k).normal((4, 4, 2))
        assert l_pair(eta, levels) == pytest.approx(brute_l_pair(eta, levels), abs=1e-10)


def test_l_pair_single_level_shift_invariance():
    eta = SeededRng(61).normal((6, 6, 2))
    base = l_pair(eta, 1)
    for shift in (1, 2, 5):
        assert l_pair(np.roll(eta, shift, axis=0), 1) == pytest.approx(base, abs=1e-10)
        assert l_pair(np.roll(eta, shift, axis=1), 1) == pytest.approx(base, abs=1e-10)


def test_l_pair_near_zero_mean_on_iid_noise():
    vals = [l_pair(SeededRng(62).child(k).normal((4, 4, 1)), 1) for k in range(300)]
    assert abs(float(np.mean(vals))) < 0.2


def test_l_pair_zero_mean_statistic_at_full_size():
    # Monte-Carlo oracle: on iid standard normal input the score is a
    # zero-mean statistic even with the full pyramid, so every draw
    # lands within 3 empirical standard deviations of zero.  (A positive
    # pooling bias would put the whole sample tens of sigmas out.)
    vals = np.array(
        [l_pair(SeededRng(74).child(k).normal((64, 64, 4)), 4) for k in range(100)]
    )
    sigma = float(vals.std())
    assert float(np.abs(vals).max()) <= 3.0 * sigma
    assert abs(float(vals.mean())) <= 0.5 * sigma


def test_l_pair_detects_structure():
    # strongly row-correlated input scores far above the iid level
    structured = np.tile(SeededRng(63).normal((1, 8, 1)), (8, 1, 1))
    assert l_pair(structured, 1) > 5.0


def test_l_pair_validates_input():
    with pytest.raises(ValueError, match="square"):
        l_pair(np.zeros((4, 6, 1)), 1)


# ------------------------------------------------------------- KL score


def test_l_kl_hand_values():
    z = np.zeros((8, 8, 2))
    # var=0, mu=0: 0 + 0 - 1 - log(1e-8)
    assert l_kl(z, EPS_STAB) == pytest.approx(-1.0 - np.log(1e-8), abs=1e-9)
    assert l_kl(np.ones((8, 8, 2)), EPS_STAB) == pytest.approx(-np.log(1e-8), abs=1e-9)
    alt = np.ones((8, 8, 1))
    alt[::2] = -1.0  # mean 0, population variance 1
    assert l_kl(alt, EPS_STAB) == pytest.approx(0.0, abs=1e-7)


def test_l_kl_minimized_by_standard_moments():
    # any scaling or shift away from (mu=0, var=1) increases the score
    base = SeededRng(64).normal((8, 8, 1))
    mu, var = float(base.mean()), float(base.var())
    white = (base - mu) / np.sqrt(var)
    v0 = l_kl(white, EPS_STAB)
    for factor in (0.5, 0.9, 1.1, 2.0):
        assert l_kl(white * factor, EPS_STAB) > v0
    for shift in (-0.5, 0.25):
        assert l_kl(white + shift, EPS_STAB) > v0


# ------------------------------------------------------------ gradients


def test_l_kl_grad_matches_finite_differences():
    rng = SeededRng(65)
    for k in range(3):
        eta = rng.child(k).normal((8, 8, 2))
        got = l_kl_grad(eta, EPS_STAB)
        want = fd_grad(lambda e: l_kl(e, EPS_STAB), eta)
        assert rel_err(got, want) <= 1e-4


def test_l_pair_grad_matches_finite_differences():
    rng = SeededRng(66)
    for k in range(3):
        eta = rng.child(k).normal((8, 8, 2))
        got = l_pair_grad(eta, 4)
        want = fd_grad(lambda e: l_pair(e, 4), eta)
        assert rel_err(got, want) <= 1e-4


def test_l_pair_grad_single_level_linear_oracle():
    # with one level the score is a quadratic form; its gradient is the
    # row/column sums minus the diagonal, checked elementwise
    eta = SeededRng(67).normal((4, 4, 1))
    got = l_pair_grad(eta, 1)
    s = 4
    want = np.zeros_like(eta)
    for y in range(s):
        for x in range(s):
            want[y, x, 0] = (2.0 / (s * s)) * (
                (eta[:, x, 0].sum() - eta[y, x, 0]) + (eta[y, :, 0].sum() - eta[y, x, 0])
            )
    np.testing.assert_allclose(got, want, atol=1e-12)


# ----------------------------------------------------------- regularizer


def test_regularize_disabled_is_identity_copy():
    eta = SeededRng(68).normal((8, 8, 2))
    for cfg in (RegConfig(k_reg=0), RegConfig(lambda_reg=0.0)):
        out = regularize_noise(eta, cfg)
        np.testing.assert_array_equal(out, eta)
        assert out is not eta


def test_regularize_never_increases_objective():
    cfg = RegConfig()
    rng = SeededRng(69)
    for k in range(5):
        eta = rng.child(k).normal((8, 8, 2)) * 1.5 + 0.2
        before = l_pair(eta, cfg.levels) + l_kl(eta, cfg.epsilon_stab)
        out = regularize_noise(eta, cfg)
        after = l_pair(out, cfg.levels) + l_kl(out, cfg.epsilon_stab)
        assert after <= before + 1e-12


def test_regularize_raises_on_overflowing_gradient():
    eta = SeededRng(70).normal((8, 8, 1))
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="non-finite"):
        regularize_noise(eta, RegConfig(lambda_reg=1e308))


def test_reg_config_validation():
    with pytest.raises(ValueError):
        RegConfig(lambda_reg=-1.0)
    with pytest.raises(ValueError):
        RegConfig(levels=0)
    with pytest.raises(ValueError):
        RegConfig(k_reg=-1)
    with pytest.raises(ValueError):
        RegConfig(eta_reg=0.0)
    with pytest.raises(ValueError):
        RegConfig(epsilon_stab=0.0)


# -------------------------------------------------------------- inversion


def world_draw(world, seed: int) -> np.ndarray:
    # one sample from a token's mixture: a "real" image for the world
    toks = sorted(world.components)
    tok = toks[1 + seed % (len(toks) - 1)]
    comp = world.token_components(tok)[seed % 2]
    return comp.mean + comp.std * SeededRng(seed, 0xD0).normal(world.shape)


def test_invert_zero_steps_is_identity(world):
    sched = make_schedule(100)
    x0 = world_draw(world, 0)
    trace = invert(x0, make_prompt([1]), 0, RegConfig(), world, sched)
    assert trace.eps_hats == ()
    np.testing.assert_array_equal(trace.x_inv, x0)
    np.testing.assert_array_equal(trace.latent_at(0), x0)


def test_invert_trace_bookkeeping(world):
    sched = make_schedule(100)
    steps = 8
    x0 = world_draw(world, 1)
    trace = invert(x0, make_prompt([1]), steps, RegConfig(), world, sched)
    assert len(trace.latents) == steps + 1
    assert len(trace.eps_hats) == steps
    assert trace.step_map.timesteps == tuple(100 * (i + 1) // steps for i in range(steps))
    np.testing.assert_array_equal(trace.latent_at(0), trace.latents[0])
    for i, t in enumerate(trace.step_map.timesteps):
        np.testing.assert_array_equal(trace.latent_at(t), trace.latents[i + 1])
    with pytest.raises(ValueError, match="not on the trace"):
        trace.latent_at(3)
    with pytest.raises(ValueError):
        trace.x_inv[0, 0, 0] = 1.0  # stored latents are frozen


def test_invert_validates_shape(world):
    with pytest.raises(ValueError, match="world shape"):
        invert(np.zeros((4, 4, 3)), make_prompt([1]), 5, RegConfig(), world, make_schedule(50))


def test_trace_validates_lengths():
    from lomoe.schedule import make_step_map

    sm = make_step_map(10, 2)
    lat = tuple(np.zeros((2, 2, 1)) for _ in range(3))
    with pytest.raises(ValueError, match="one latent per"):
        InversionTrace(latents=lat[:2], eps_hats=lat[:2], step_map=sm, prompt=make_prompt([1]))
    with pytest.raises(ValueError, match="one prediction per"):
        InversionTrace(latents=lat, eps_hats=lat, step_map=sm, prompt=make_prompt([1]))


def test_replay_reproduces_inversion_path(world):
    # walking the stored predictions back down lands on every stored
    # latent: the two step rules are algebraic inverses
    sched = make_schedule(200)
    x0 = world_draw(world, 2)
    trace = invert(x0, make_prompt([2]), 10, RegConfig(), world, sched)
    x = trace.x_inv.copy()
    pairs = trace.step_map.pairs_ascending()
    for i in reversed(range(len(pairs))):
        t_lo, t_hi = pairs[i]
        x = ddim_denoise_step(x, trace.eps_hats[i], t_hi, t_lo, sched)
        np.testing.assert_allclose(x, trace.latents[i], atol=1e-9)
    np.testing.assert_allclose(x, x0, atol=1e-9)


def test_unregularized_inversion_is_reversible(world):
    sched = make_schedule(1000)
    cfg = RegConfig(lambda_reg=0.0)
    for seed in range(3):
        x0 = world_draw(world, seed)
        trace = invert(x0, make_prompt([1]), 50, cfg, world, sched)
        x = trace.x_inv.copy()
        for i in reversed(range(50)):
            t_lo, t_hi = trace.step_map.pairs_ascending()[i]
            x = ddim_denoise_step(x, trace.eps_hats[i], t_hi, t_lo, sched)
        assert float(np.abs(x - x0).max()) <= 1e-5


def test_regularization_improves_prediction_gaussianity(world):
    # the stored predictions score no worse than the raw ones, step by step
    sched = make_schedule(100)
    cfg = RegConfig()
    x0 = world_draw(world, 3)
    c0 = make_prompt([1])
    trace = invert(x0, c0, 6, cfg, world, sched)
    for i, (t_lo, t_hi) in enumerate(trace.step_map.pairs_ascending()):
        raw = predict_noise(trace.latents[i], t_hi, c0, world, sched)
        raw_score = l_pair(raw, cfg.levels) + l_kl(raw, cfg.epsilon_stab)
        stored = trace.eps_hats[i]
        stored_score = l_pair(stored, cfg.levels) + l_kl(stored, cfg.epsilon_stab)
        assert stored_score <= raw_score + 1e-12
