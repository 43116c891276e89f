"""Noise schedules and the exact forward / deterministic reverse stepping rules.

Convention used everywhere: ``alpha_bar[t]`` is the cumulative product
prod_{s<=t}(1 - beta_s), the only quantity for which the closed-form
forward map x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps holds.
Steps are fully deterministic (the sigma_t = 0 case), which is what makes
the invert and denoise maps exact algebraic inverses for a shared noise
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA_MIN = 1e-4
BETA_MAX = 2e-2
DEFAULT_T = 1000
DEFAULT_STEPS = 50
_COSINE_OFFSET = 0.008
_BETA_CLIP = 0.999

SCHEDULE_KINDS = ("linear-beta", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Monotone cumulative-alpha sequence, index t in [0, t_total].

    alpha_bar[0] is exactly 1 and the sequence is strictly decreasing in
    (0, 1].  For the default horizon (t_total=1000) the terminal value is
    far below 0.05, so the chain ends near pure noise; very short test
    schedules (t_total of a few steps) do not reach that bound.
    """

    t_total: int
    alpha_bar: np.ndarray
    kind: str

    def __post_init__(self):
        if self.t_total < 1:
            raise ValueError(f"t_total must be >= 1, got {self.t_total}")
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.t_total + 1,):
            raise ValueError(
                f"alpha_bar must have length t_total+1={self.t_total + 1}, got {ab.shape}"
            )
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or np.any(ab > 1.0):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.t_total:
            raise ValueError(f"timestep {t} outside [0, {self.t_total}]")
        return float(self.alpha_bar[t])


def make_schedule(t_total: int = DEFAULT_T, kind: str = "linear-beta") -> NoiseSchedule:
    """Build a schedule over t_total diffusion timesteps.

    linear-beta: beta_t linearly spaced over [1e-4, 2e-2] (t_total points).
    cosine: alpha_bar proportional to cos^2 with the usual small offset,
    per-step betas clipped at 0.999 so alpha_bar stays positive.
    """
    if t_total < 1:
        raise ValueError(f"t_total must be >= 1, got {t_total}")
    if kind == "linear-beta":
        betas = np.linspace(BETA_MIN, BETA_MAX, t_total)
    elif kind == "cosine":
        grid = np.arange(t_total + 1, dtype=np.float64) / t_total
        f = np.cos((grid + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET) * np.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, _BETA_CLIP)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    return NoiseSchedule(t_total=t_total, alpha_bar=alpha_bar, kind=kind)


@dataclass(frozen=True)
class StepIndexMap:
    """The strictly increasing timesteps a run visits, uniform stride.

    timesteps[i] = t_total * (i+1) // steps, so the last entry is always
    t_total (the full chain) and the first is positive.  steps=0 is the
    degenerate empty map used by zero-step inversions.
    """

    num_inference_steps: int
    timesteps: tuple = field(default=())

    def __post_init__(self):
        if self.num_inference_steps < 0:
            raise ValueError("num_inference_steps must be >= 0")
        ts = tuple(int(t) for t in self.timesteps)
        if len(ts) != self.num_inference_steps:
            raise ValueError("timestep list length must equal num_inference_steps")
        if ts:
            if ts[0] <= 0:
                raise ValueError("first timestep must be > 0")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("timesteps must be strictly increasing")
        object.__setattr__(self, "timesteps", ts)

    def pairs_ascending(self) -> list[tuple[int, int]]:
        """(t_lo, t_hi) pairs from 0 up to t_total, for inversion."""
        lows = (0,) + self.timesteps[:-1]
        return list(zip(lows, self.timesteps))

    def pairs_descending(self) -> list[tuple[int, int]]:
        """(t_hi, t_lo) pairs from t_total down to 0, for denoising."""
        return [(hi, lo) for lo, hi in reversed(self.pairs_ascending())]


def make_step_map(t_total: int, steps: int) -> StepIndexMap:
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps > t_total:
        raise ValueError(f"steps={steps} exceeds t_total={t_total}")
    ts = tuple(t_total * (i + 1) // steps for i in range(steps))
    return StepIndexMap(num_inference_steps=steps, timesteps=ts)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def ddpm_forward(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(x0, eps, "ddpm_forward")
    ab = sched.abar(t)
    if t == 0:
        return x0.copy()
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(x: np.ndarray, eps_hat: np.ndarray, ab_from: float, ab_to: float) -> np.ndarray:
    """Deterministic DDIM transport between two noise levels.

    Predicts x0 from (x, eps_hat) at level ab_from and re-noises it to
    ab_to with the same eps_hat.  Used in both directions: ab_to < ab_from
    denoises, ab_to > ab_from inverts.  Equal levels give the identity.
    """
    x0_pred = (x - np.sqrt(1.0 - ab_from) * eps_hat) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_pred + np.sqrt(1.0 - ab_to) * eps_hat


def ddim_invert_step(
    x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_next: int, sched: NoiseSchedule
) -> np.ndarray:
    """One forward (noising) DDIM step from t to t_next > t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(x_t, eps_hat, "ddim_invert_step")
    if t_next <= t:
        raise ValueError(f"ddim_invert_step needs t_next > t, got {t_next} <= {t}")
    return ddim_step(x_t, eps_hat, sched.abar(t), sched.abar(t_next))


def ddim_denoise_step(
    x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> np.ndarray:
    """One reverse (denoising) DDIM step from t to t_prev < t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(x_t, eps_hat, "ddim_denoise_step")
    if t_prev >= t:
        raise ValueError(f"ddim_denoise_step needs t_prev < t, got {t_prev} >= {t}")
    return ddim_step(x_t, eps_hat, sched.abar(t), sched.abar(t_prev))
