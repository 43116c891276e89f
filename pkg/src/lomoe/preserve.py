"""Reconstruction branch, attribute-preservation losses, guided update.

The reconstruction branch walks back down from x_inv with the source
prompt, recomputing noise predictions like any live branch.  Because the
predictor is evaluated at different points than during inversion, this
walk drifts off the inversion path; rectification stores the per-step
drift and snaps the cached path back onto the inversion latents.  The
edit loop later adds the same drifts, so an edit that changes nothing
reproduces the reconstruction path step for step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .grids import as_grid, as_mask, masked_l2
from .schedule import NoiseSchedule, StepIndexMap, ddim_denoise_step
from .denoiser import (
    AttentionHead,
    AttentionMap,
    PromptSpec,
    ToyWorld,
    attention_input_map,
    attention_maps,
    predict_noise,
)
from .inversion import InversionTrace
from .compose import MaskSet

DEFAULT_TAU = 1.25
_MAX_BACKTRACKS = 20


@dataclass(frozen=True)
class GuidanceConfig:
    """Per-step guided-update knobs (defaults are the working values:
    lambda_b 1.75, lambda_xa 1.00, tau 1.25, one descent step of 0.1)."""

    lambda_xa: float = 1.00
    lambda_b: float = 1.75
    k_g: int = 1
    eta_g: float = 0.1
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.lambda_xa < 0 or self.lambda_b < 0:
            raise ValueError("loss weights must be >= 0")
        if self.k_g < 0:
            raise ValueError("k_g must be >= 0")
        if self.eta_g <= 0:
            raise ValueError("eta_g must be > 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class ReconCache:
    """Reference path for the edit: rectified latents x'_t, attention
    maps of the source prompt at every visited timestep, and the drift
    the reconstruction needed at each arrival timestep."""

    latents: dict
    attn: dict
    drifts: dict
    step_map: StepIndexMap
    prompt: PromptSpec
    tau: float

    def x_prime(self, t: int) -> np.ndarray:
        return self.latents[t]

    def a_ref(self, t: int) -> AttentionMap:
        return self.attn[t]

    def drift(self, t: int) -> np.ndarray:
        return self.drifts[t]

    @property
    def final(self) -> np.ndarray:
        """x'_0, the fully denoised reconstruction."""
        return self.latents[0]

    @property
    def steps(self) -> int:
        return self.step_map.num_inference_steps


def reconstruct(
    trace: InversionTrace,
    world: ToyWorld,
    sched: NoiseSchedule,
    head: AttentionHead,
    tau: float = DEFAULT_TAU,
    rectify: bool = True,
) -> ReconCache:
    """Walk down from x_inv with the source prompt, caching the path.

    With rectify=True (the default) each computed latent is replaced by
    the stored inversion latent and the difference kept as that step's
    drift, so the cache equals the inversion path exactly.  rectify=False
    is a diagnostic mode that exposes the raw drifting walk.
    """
    step_map = trace.step_map
    x = trace.x_inv.copy()
    top = step_map.timesteps[-1] if step_map.timesteps else 0
    latents = {top: x}
    attn = {}
    drifts = {}
    for t_hi, t_lo in step_map.pairs_descending():
        attn[t_hi] = attention_maps(x, t_hi, trace.prompt, head, tau)
        eps = predict_noise(x, t_hi, trace.prompt, world, sched)
        computed = ddim_denoise_step(x, eps, t_hi, t_lo, sched)
        if rectify:
            target = trace.latent_at(t_lo)
            drifts[t_lo] = target - computed
            x = target.copy()
        else:
            drifts[t_lo] = np.zeros_like(computed)
            x = computed
        latents[t_lo] = x
    return ReconCache(
        latents=latents, attn=attn, drifts=drifts, step_map=step_map,
        prompt=trace.prompt, tau=tau,
    )


def l_xa(a_ref: AttentionMap, a_edit: AttentionMap, region: np.ndarray) -> float:
    """L2 norm (not squared) of the map difference on region pixels."""
    region = as_mask(region, "region")
    if a_ref.values.shape != a_edit.values.shape:
        raise ValueError(
            f"attention maps differ in shape: {a_ref.values.shape} vs {a_edit.values.shape}"
        )
    if region.shape != a_ref.values.shape[:2]:
        raise ValueError("region mask does not match attention map dims")
    diff = a_ref.values - a_edit.values
    return float(np.sqrt(np.sum(region[:, :, None] * diff * diff)))


def l_b(y_star: np.ndarray, x_prime: np.ndarray, m0: np.ndarray) -> float:
    """L2 norm of the latent difference on the background mask."""
    y_star = as_grid(y_star, "y_star")
    x_prime = as_grid(x_prime, "x_prime")
    if y_star.shape != x_prime.shape:
        raise ValueError("l_b: latent shapes differ")
    return masked_l2(y_star - x_prime, m0)


def _objective_and_grad(
    y: np.ndarray,
    t: int,
    x_prime_t: np.ndarray,
    a_ref: AttentionMap,
    ms: MaskSet,
    prompts,
    head: AttentionHead,
    cfg: GuidanceConfig,
) -> tuple[float, np.ndarray]:
    # J(y) = lambda_xa * sum_i ||(A_ref - A_edit_i) on M_i||_2
    #      + lambda_b * ||M_0 (y - x'_t)||_2, with zero-loss terms
    # contributing zero gradient.  The attention gradient flows through
    # the temperature-softmax Jacobian and the shared input map P.
    total = 0.0
    grad = np.zeros_like(y)
    if cfg.lambda_xa > 0:
        for i, c_i in enumerate(prompts, start=1):
            am = attention_maps(y, t, c_i, head, cfg.tau)
            region = ms.mask(i)[:, :, None]
            diff = (am.values - a_ref.values) * region
            loss_i = float(np.sqrt(np.sum(diff * diff)))
            total += cfg.lambda_xa * loss_i
            if loss_i == 0.0:
                continue
            g_attn = diff / loss_i
            dot = np.sum(g_attn * am.values, axis=-1, keepdims=True)
            g_logits = am.values * (g_attn - dot) / cfg.tau
            p = attention_input_map(head, c_i)
            grad += cfg.lambda_xa * (g_logits @ p.T)
    if cfg.lambda_b > 0:
        diff_b = (y - x_prime_t) * ms.m0[:, :, None]
        loss_b = float(np.sqrt(np.sum(diff_b * diff_b)))
        total += cfg.lambda_b * loss_b
        if loss_b > 0.0:
            grad += cfg.lambda_b * diff_b / loss_b
    return total, grad


def guided_update(
    y_t: np.ndarray,
    t: int,
    x_prime_t: np.ndarray,
    a_ref: AttentionMap,
    ms: MaskSet,
    prompts,
    head: AttentionHead,
    cfg: GuidanceConfig,
) -> np.ndarray:
    """Descend the combined preservation objective for k_g steps.

    Backtracks (halving the stride) until the objective does not
    increase, so the update never makes the objective worse.  Both
    weights zero is the identity.
    """
    y_t = as_grid(y_t, "y_t")
    if len(prompts) != ms.n:
        raise ValueError(f"expected {ms.n} edit prompts, got {len(prompts)}")
    if cfg.k_g == 0 or (cfg.lambda_xa == 0.0 and cfg.lambda_b == 0.0):
        return y_t.copy()
    y = y_t.copy()
    current, grad = _objective_and_grad(y, t, x_prime_t, a_ref, ms, prompts, head, cfg)
    for _ in range(cfg.k_g):
        if not np.all(np.isfinite(grad)):
            raise NumericError("guided_update: non-finite gradient")
        step = cfg.eta_g
        for _ in range(_MAX_BACKTRACKS):
            trial = y - step * grad
            value, trial_grad = _objective_and_grad(
                trial, t, x_prime_t, a_ref, ms, prompts, head, cfg
            )
            if not np.isfinite(value):
                raise NumericError("guided_update: non-finite objective")
            if value <= current:
                y, current, grad = trial, value, trial_grad
                break
            step *= 0.5
        else:
            # every stride rejected: keep y, objective cannot increase
            break
    return y
