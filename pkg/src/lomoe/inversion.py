"""Regularized deterministic inversion and its per-step trace.

Inversion walks the step map upward, predicting noise at the upper
timestep of each pair, nudging that prediction toward gaussianity by a
few gradient steps on a pairwise-correlation plus KL objective, then
applying the exact invert step.  The trace stores every latent and every
regularized prediction so the reverse walk can reproduce the path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .grids import as_grid, avg_pool_pyramid, mean_var
from .schedule import NoiseSchedule, StepIndexMap, ddim_invert_step, make_step_map
from .denoiser import PromptSpec, ToyWorld, predict_noise

_MAX_BACKTRACKS = 20


@dataclass(frozen=True)
class RegConfig:
    """Knobs for the gaussianity regularizer applied to each prediction.

    k_reg=0 or lambda_reg=0 disables it.  epsilon_stab is the constant
    added inside the KL log so a zero-variance map stays finite.
    """

    lambda_reg: float = 20.0
    levels: int = 4
    k_reg: int = 3
    eta_reg: float = 0.05
    epsilon_stab: float = 1e-8

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.k_reg < 0:
            raise ValueError("k_reg must be >= 0")
        if self.eta_reg <= 0:
            raise ValueError("eta_reg must be > 0")
        if self.epsilon_stab <= 0:
            raise ValueError("epsilon_stab must be > 0")


def l_pair(eps_hat: np.ndarray, levels: int) -> float:
    """Pairwise correlation score over an average-pool pyramid.

    At each level of spatial size S: (1/S^2) * sum over offsets
    delta=1..S-1 of sum_{x,y,c} eta[x,y,c] * (eta[x-delta,y,c] +
    eta[x,y-delta,c]), indices wrapping circularly.  Zero-mean iid input
    gives a zero-mean statistic; structured input does not.  Average
    pooling (rather than max) keeps the coarse levels zero-mean on white
    noise, so the score measures correlation, not magnitude.
    """
    eps_hat = as_grid(eps_hat, "eps_hat")
    if eps_hat.shape[0] != eps_hat.shape[1]:
        raise ValueError(f"l_pair needs square spatial dims, got {eps_hat.shape[:2]}")
    total = 0.0
    for level in avg_pool_pyramid(eps_hat, levels):
        size = level.shape[0]
        acc = 0.0
        for delta in range(1, size):
            acc += float(
                np.sum(level * (np.roll(level, delta, axis=0) + np.roll(level, delta, axis=1)))
            )
        total += acc / (size * size)
    return total


def l_kl(eps_hat: np.ndarray, epsilon_stab: float = 1e-8) -> float:
    """Moment-matching divergence to a standard normal.

    sigma^2 + mu^2 - 1 - log(sigma^2 + eps); zero (up to eps) exactly
    when the map has mean 0 and variance 1.
    """
    mu, var = mean_var(eps_hat)
    return var + mu * mu - 1.0 - float(np.log(var + epsilon_stab))


def _l_pair_grad_level(level: np.ndarray) -> np.ndarray:
    # f = (1/S^2) eta . (A + B) with A, B linear symmetric, so
    # df/deta = (2/S^2)(A + B); A = axis-0 sum minus self, B likewise axis 1.
    size = level.shape[0]
    a = level.sum(axis=0, keepdims=True) - level
    b = level.sum(axis=1, keepdims=True) - level
    return (2.0 / (size * size)) * (a + b)


def l_pair_grad(eps_hat: np.ndarray, levels: int) -> np.ndarray:
    """Hand-derived gradient of :func:`l_pair` w.r.t. the level-0 map.

    Coarser levels push their gradients back through the average-pool
    chain: each pooled cell spreads its gradient equally (weight 1/4)
    over the 2x2 block it came from.
    """
    eps_hat = as_grid(eps_hat, "eps_hat")
    if eps_hat.shape[0] != eps_hat.shape[1]:
        raise ValueError(f"l_pair needs square spatial dims, got {eps_hat.shape[:2]}")
    pyramid = avg_pool_pyramid(eps_hat, levels)
    grad = _l_pair_grad_level(pyramid[-1])
    for p in reversed(range(levels - 1)):
        up = 0.25 * np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1)
        grad = up + _l_pair_grad_level(pyramid[p])
    return grad


def l_kl_grad(eps_hat: np.ndarray, epsilon_stab: float = 1e-8) -> np.ndarray:
    """Hand-derived gradient of :func:`l_kl`: elementwise
    2(eta - mu)/n * (1 - 1/(sigma^2 + eps)) + 2 mu / n."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    n = eps_hat.size
    mu, var = mean_var(eps_hat)
    return (2.0 / n) * (eps_hat - mu) * (1.0 - 1.0 / (var + epsilon_stab)) + 2.0 * mu / n


def regularize_noise(eps_hat: np.ndarray, cfg: RegConfig) -> np.ndarray:
    """Descend lambda * (l_pair + l_kl) for k_reg steps on the map itself.

    Each step backtracks (halving the stride) until the objective does
    not increase, so the returned map never scores worse than the input.
    Raises NumericError if a gradient or trial point goes non-finite.
    """
    eps_hat = as_grid(eps_hat, "eps_hat")
    if cfg.k_reg == 0 or cfg.lambda_reg == 0.0:
        return eps_hat.copy()

    def loss(eta):
        return cfg.lambda_reg * (l_pair(eta, cfg.levels) + l_kl(eta, cfg.epsilon_stab))

    eta = eps_hat.copy()
    current = loss(eta)
    for _ in range(cfg.k_reg):
        grad = cfg.lambda_reg * (
            l_pair_grad(eta, cfg.levels) + l_kl_grad(eta, cfg.epsilon_stab)
        )
        if not np.all(np.isfinite(grad)):
            raise NumericError("regularize_noise: non-finite gradient")
        step = cfg.eta_reg
        for _ in range(_MAX_BACKTRACKS):
            trial = eta - step * grad
            value = loss(trial)
            if not np.isfinite(value):
                raise NumericError("regularize_noise: non-finite objective")
            if value <= current:
                eta, current = trial, value
                break
            step *= 0.5
        # all backtracks rejected: keep eta, objective stays non-increasing
    return eta


@dataclass(frozen=True)
class InversionTrace:
    """Everything the reverse passes need: per-step latents and the
    regularized predictions that produced them.

    latents[0] is the input x_0; latents[-1] is x_inv at the top of the
    chain; eps_hats[i] carried latents[i] to latents[i+1].
    """

    latents: tuple
    eps_hats: tuple
    step_map: StepIndexMap
    prompt: PromptSpec

    def __post_init__(self):
        lats = tuple(self.latents)
        ehs = tuple(self.eps_hats)
        if len(lats) != self.step_map.num_inference_steps + 1:
            raise ValueError("trace must hold one latent per visited timestep plus x_0")
        if len(ehs) != self.step_map.num_inference_steps:
            raise ValueError("trace must hold one prediction per step")
        for a in lats + ehs:
            a.flags.writeable = False
        object.__setattr__(self, "latents", lats)
        object.__setattr__(self, "eps_hats", ehs)

    @property
    def x_inv(self) -> np.ndarray:
        return self.latents[-1]

    def latent_at(self, t: int) -> np.ndarray:
        """Stored latent at visited timestep t (t=0 is the input)."""
        if t == 0:
            return self.latents[0]
        ts = self.step_map.timesteps
        if t not in ts:
            raise ValueError(f"timestep {t} not on the trace's step map")
        return self.latents[ts.index(t) + 1]


def invert(
    x0: np.ndarray,
    c0: PromptSpec,
    steps: int,
    cfg: RegConfig,
    world: ToyWorld,
    sched: NoiseSchedule,
) -> InversionTrace:
    """Walk the chain upward from x_0, regularizing each prediction.

    The predictor is evaluated at the upper timestep of each pair, the
    same index the denoising walk uses, which is what makes the stored
    predictions replayable in both directions.
    """
    x0 = as_grid(x0, "x0")
    if x0.shape != world.shape:
        raise ValueError(f"x0 shape {x0.shape} != world shape {world.shape}")
    step_map = make_step_map(sched.t_total, steps)
    latents = [x0.copy()]
    eps_hats = []
    x = x0
    for t_lo, t_hi in step_map.pairs_ascending():
        eps = predict_noise(x, t_hi, c0, world, sched)
        eps = regularize_noise(eps, cfg)
        x = ddim_invert_step(x, eps, t_lo, t_hi, sched)
        latents.append(x)
        eps_hats.append(eps)
    return InversionTrace(
        latents=tuple(latents), eps_hats=tuple(eps_hats), step_map=step_map, prompt=c0
    )
