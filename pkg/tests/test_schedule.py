"""Noise schedules, step maps, and the exact DDIM stepping rules."""

import numpy as np
import pytest

from lomoe.grids import SeededRng
from lomoe.schedule import (
    BETA_MAX,
    BETA_MIN,
    NoiseSchedule,
    ddim_denoise_step,
    ddim_invert_step,
    ddim_step,
    ddpm_forward,
    make_schedule,
    make_step_map,
)


def reference_alpha_bar_linear(t_total):
    # independent recomputation: cumulative products of (1 - beta_t)
    betas = np.linspace(BETA_MIN, BETA_MAX, t_total)
    out = [1.0]
    for b in betas:
        out.append(out[-1] * (1.0 - b))
    return np.array(out)


def two_level_schedule(ab1: float) -> NoiseSchedule:
    # minimal handcrafted schedule: exact alpha_bar at t=1
    return NoiseSchedule(t_total=1, alpha_bar=np.array([1.0, ab1]), kind="linear-beta")


def test_linear_schedule_matches_cumprod_oracle():
    sched = make_schedule(200, "linear-beta")
    np.testing.assert_allclose(sched.alpha_bar, reference_alpha_bar_linear(200), rtol=1e-12)
    assert sched.abar(0) == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_linear_schedule_t_total_one():
    sched = make_schedule(1, "linear-beta")
    np.testing.assert_allclose(sched.alpha_bar, [1.0, 1.0 - BETA_MIN], rtol=0, atol=0)


def test_default_horizon_ends_near_pure_noise():
    sched = make_schedule(1000, "linear-beta")
    assert sched.abar(1000) < 0.05


def test_cosine_schedule_is_valid_and_distinct():
    sched = make_schedule(100, "cosine")
    assert sched.abar(0) == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.alpha_bar > 0)
    assert abs(sched.abar(50) - make_schedule(100, "linear-beta").abar(50)) > 1e-3


def test_schedule_validation():
    with pytest.raises(ValueError, match="kind"):
        make_schedule(10, "quadratic")
    with pytest.raises(ValueError, match=">= 1"):
        make_schedule(0)
    with pytest.raises(ValueError, match="exactly 1"):
        NoiseSchedule(t_total=1, alpha_bar=np.array([0.9, 0.5]), kind="cosine")
    with pytest.raises(ValueError, match="decreasing"):
        NoiseSchedule(t_total=2, alpha_bar=np.array([1.0, 0.5, 0.5]), kind="cosine")
    with pytest.raises(ValueError, match="length"):
        NoiseSchedule(t_total=3, alpha_bar=np.array([1.0, 0.5]), kind="cosine")
    sched = make_schedule(10)
    with pytest.raises(ValueError, match="outside"):
        sched.abar(11)
    with pytest.raises(ValueError, match="outside"):
        sched.abar(-1)


def test_step_map_formula_and_bounds():
    sm = make_step_map(1000, 50)
    assert sm.timesteps == tuple(1000 * (i + 1) // 50 for i in range(50))
    assert sm.timesteps[0] == 20 and sm.timesteps[-1] == 1000
    full = make_step_map(7, 7)
    assert full.timesteps == (1, 2, 3, 4, 5, 6, 7)
    empty = make_step_map(10, 0)
    assert empty.timesteps == ()
    assert empty.pairs_ascending() == []
    with pytest.raises(ValueError, match="exceeds"):
        make_step_map(10, 11)
    with pytest.raises(ValueError, match=">= 0"):
        make_step_map(10, -1)


def test_step_map_pairs_are_mirror_images():
    sm = make_step_map(100, 7)
    up = sm.pairs_ascending()
    down = sm.pairs_descending()
    assert up[0][0] == 0 and up[-1][1] == 100
    assert down == [(hi, lo) for lo, hi in reversed(up)]
    # consecutive pairs chain: this step's top is the next step's bottom
    for (_, hi), (lo, _) in zip(up, up[1:]):
        assert hi == lo


def test_step_map_rejects_bad_timesteps():
    from lomoe.schedule import StepIndexMap

    with pytest.raises(ValueError, match="> 0"):
        StepIndexMap(num_inference_steps=1, timesteps=(0,))
    with pytest.raises(ValueError, match="increasing"):
        StepIndexMap(num_inference_steps=2, timesteps=(5, 5))
    with pytest.raises(ValueError, match="length"):
        StepIndexMap(num_inference_steps=2, timesteps=(5,))


def test_ddpm_forward_hand_value():
    # alpha_bar = 0.25: sqrt(0.25)*1 + sqrt(0.75)*1 = 1.3660254...
    sched = two_level_schedule(0.25)
    x = ddpm_forward(np.ones((1, 1, 1)), 1, np.ones((1, 1, 1)), sched)
    assert x[0, 0, 0] == pytest.approx(1.3660254037844386, abs=1e-12)


def test_ddpm_forward_t_zero_is_identity_copy():
    sched = make_schedule(10)
    x0 = SeededRng(0).normal((3, 3, 2))
    out = ddpm_forward(x0, 0, np.zeros_like(x0), sched)
    np.testing.assert_array_equal(out, x0)
    assert out is not x0


def test_ddpm_forward_moments_match_closed_form():
    # marginal of x_t given x0=0 is N(0, 1-alpha_bar)
    sched = make_schedule(100)
    t = 60
    draws = np.stack(
        [
            ddpm_forward(np.zeros((4, 4, 1)), t, SeededRng(s).normal((4, 4, 1)), sched)
            for s in range(1000)
        ]
    )
    var = float(draws.var())
    assert var == pytest.approx(1.0 - sched.abar(t), rel=0.05)


def test_ddim_step_identities():
    rng = SeededRng(21)
    x = rng.normal((4, 4, 2))
    eps = rng.child(1).normal((4, 4, 2))
    # equal levels: identity
    np.testing.assert_allclose(ddim_step(x, eps, 0.7, 0.7), x, atol=1e-12)
    # eps = 0: pure rescaling by sqrt(ab_to/ab_from)
    np.testing.assert_allclose(
        ddim_step(x, np.zeros_like(x), 0.64, 0.16), x * np.sqrt(0.16 / 0.64), atol=1e-12
    )
    # stepping to ab_to = 1 recovers the predicted x0
    x0_pred = (x - np.sqrt(1.0 - 0.64) * eps) / np.sqrt(0.64)
    np.testing.assert_allclose(ddim_step(x, eps, 0.64, 1.0), x0_pred, atol=1e-12)


def test_ddim_step_matches_scalar_oracle():
    # independent elementwise recomputation of the transport rule
    rng = SeededRng(22)
    x = rng.normal((3, 3, 1))
    eps = rng.child(1).normal((3, 3, 1))
    ab_from, ab_to = 0.42, 0.81
    got = ddim_step(x, eps, ab_from, ab_to)
    for i in range(3):
        for j in range(3):
            x0 = (x[i, j, 0] - np.sqrt(1 - ab_from) * eps[i, j, 0]) / np.sqrt(ab_from)
            want = np.sqrt(ab_to) * x0 + np.sqrt(1 - ab_to) * eps[i, j, 0]
            assert got[i, j, 0] == pytest.approx(want, abs=1e-14)


def test_invert_then_denoise_restores_input():
    sched = make_schedule(50)
    rng = SeededRng(23)
    for k in range(10):
        x = rng.child(k).normal((4, 4, 2))
        eps = rng.child(100 + k).normal((4, 4, 2))
        t, t_next = 10 + k, 30 + k
        up = ddim_invert_step(x, eps, t, t_next, sched)
        back = ddim_denoise_step(up, eps, t_next, t, sched)
        np.testing.assert_allclose(back, x, atol=1e-12)


def test_directional_steps_validate_order_and_shape():
    sched = make_schedule(50)
    x = np.zeros((2, 2, 1))
    with pytest.raises(ValueError, match="t_next > t"):
        ddim_invert_step(x, x, 10, 10, sched)
    with pytest.raises(ValueError, match="t_prev < t"):
        ddim_denoise_step(x, x, 10, 10, sched)
    with pytest.raises(ValueError, match="shape mismatch"):
        ddim_invert_step(x, np.zeros((2, 2, 2)), 1, 2, sched)
    with pytest.raises(ValueError, match="shape mismatch"):
        ddpm_forward(x, 1, np.zeros((1, 2, 1)), sched)
