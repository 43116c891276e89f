"""Mask bookkeeping and the fused multi-branch denoising step.

A MaskSet holds N binary region masks, the derived background mask (the
complement of their union), and per-pixel normalized weights that sum to
1 bitwise.  The fused step reconciles N+1 branch latents as the
mask-weighted least-squares blend; bootstrapping splices a noised
constant-color background outside a branch's mask during the first few
denoising iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import SeededRng, as_grid, as_mask
from .schedule import NoiseSchedule, ddpm_forward

_ABSORB_ROUNDS = 8


@dataclass(frozen=True)
class MaskSet:
    """Region masks M_1..M_N plus derived background M_0 and weights.

    ``weights`` is an (N+1, H, W) stack ordered [background, mask 1, ...,
    mask N]; its axis-0 sum is exactly 1.0 at every pixel.  ``first_cover``
    is the lowest branch index covering each pixel, used as the blend
    anchor.
    """

    masks: tuple
    m0: np.ndarray
    weights: np.ndarray
    first_cover: np.ndarray

    def __post_init__(self):
        for a in self.masks + (self.m0, self.weights, self.first_cover):
            a.flags.writeable = False

    @property
    def n(self) -> int:
        return len(self.masks)

    @property
    def shape(self) -> tuple:
        return self.m0.shape

    def mask(self, i: int) -> np.ndarray:
        """Branch i's mask; branch 0 is the background."""
        return self.m0 if i == 0 else self.masks[i - 1]


def build_mask_set(masks, shape=None) -> MaskSet:
    """Derive the background mask and exactly normalized blend weights.

    ``shape`` is only needed for the N=0 case (background covers
    everything); otherwise it is taken from the masks.  Raw weights
    M_i / sum_j M_j are not always a bitwise partition of unity (1/k does
    not sum to 1 in floating point for many k), so the rounding residual
    at each pixel is folded into its first covering branch and re-checked
    until the axis sum is exactly 1 everywhere.
    """
    masks = tuple(as_mask(m, f"mask {i + 1}").copy() for i, m in enumerate(masks))
    if masks:
        shape = masks[0].shape
        for i, m in enumerate(masks):
            if m.shape != shape:
                raise ValueError(f"mask {i + 1} shape {m.shape} != {shape}")
        union = np.maximum.reduce(masks)
    elif shape is None:
        raise ValueError("build_mask_set with no masks needs an explicit shape")
    else:
        shape = tuple(shape)
        if len(shape) != 2 or min(shape) < 1:
            raise ValueError(f"mask shape must be (H, W), got {shape}")
        union = np.zeros(shape)
    m0 = 1.0 - union
    stack = np.stack((m0,) + masks)
    counts = stack.sum(axis=0)
    weights = stack / counts
    first = np.argmax(stack > 0, axis=0)[None]
    for _ in range(_ABSORB_ROUNDS):
        resid = 1.0 - weights.sum(axis=0)
        if not resid.any():
            break
        anchored = np.take_along_axis(weights, first, axis=0) + resid[None]
        np.put_along_axis(weights, first, anchored, axis=0)
    else:
        raise AssertionError("mask weights failed to normalize exactly")
    return MaskSet(masks=masks, m0=m0, weights=weights, first_cover=first[0])


def _check_branches(branches, ms: MaskSet) -> list:
    if len(branches) != ms.n + 1:
        raise ValueError(f"expected {ms.n + 1} branch latents, got {len(branches)}")
    out = [as_grid(b, f"branch {i}") for i, b in enumerate(branches)]
    for i, b in enumerate(out):
        if b.shape[:2] != ms.shape:
            raise ValueError(f"branch {i} shape {b.shape} does not match masks {ms.shape}")
        if b.shape != out[0].shape:
            raise ValueError("branch latents must share one shape")
    return out


def l_md(y_prev: np.ndarray, branches, ms: MaskSet) -> float:
    """Sum over branches of the squared masked distance to y_prev."""
    y_prev = as_grid(y_prev, "y_prev")
    branches = _check_branches(branches, ms)
    if y_prev.shape != branches[0].shape:
        raise ValueError("y_prev shape does not match branch latents")
    total = 0.0
    for i, phi in enumerate(branches):
        diff = y_prev - phi
        total += float(np.sum(ms.mask(i)[:, :, None] * diff * diff))
    return total


def psi_step(branches, ms: MaskSet) -> np.ndarray:
    """Per-pixel weighted blend of branch latents; minimizes l_md.

    Blending is anchored at each pixel's first covering branch, so
    single-cover pixels and fully agreeing branches reproduce their
    branch values bitwise.
    """
    branches = _check_branches(branches, ms)
    stacked = np.stack(branches)
    anchor = np.take_along_axis(stacked, ms.first_cover[None, :, :, None], axis=0)[0]
    out = anchor.copy()
    for i, phi in enumerate(branches):
        out += ms.weights[i][:, :, None] * (phi - anchor)
    return out


@dataclass(frozen=True)
class BootstrapConfig:
    """Early-step background splicing: for the first tb denoising
    iterations each edit branch sees a noised constant-color background
    outside its mask.  seed offsets the color/noise stream; the identity
    encoder maps the color image straight into latent space."""

    tb: int = 10
    seed: int = 0
    encoder: str = "identity"

    def __post_init__(self):
        if self.tb < 0:
            raise ValueError("tb must be >= 0")
        if self.encoder != "identity":
            raise ValueError(f"unknown encoder mode {self.encoder!r}")


def make_background_bt(
    t: int, shape, cfg: BootstrapConfig, sched: NoiseSchedule, rng: SeededRng
) -> np.ndarray:
    """Constant-color latent noised to level t.

    The per-channel color is drawn once per stream (uniform in [-1, 1]);
    the forward noise is keyed by t, so repeated calls with the same rng
    and t return the identical grid.
    """
    shape = tuple(shape)
    color = rng.child(0).uniform(-1.0, 1.0, shape[2])
    b0 = np.ones(shape) * color
    if t == 0:
        return b0
    eps = rng.child(1 + t).normal(shape)
    return ddpm_forward(b0, t, eps, sched)


def bootstrap_latent(
    y_t: np.ndarray, m_i: np.ndarray, b_t: np.ndarray, step_index: int, tb: int
) -> np.ndarray:
    """Splice: keep y_t inside the mask, b_t outside, for the first tb
    denoising iterations (step_index counts from 0); identity afterwards."""
    y_t = as_grid(y_t, "y_t")
    m_i = as_mask(m_i)
    b_t = as_grid(b_t, "b_t")
    if b_t.shape != y_t.shape or m_i.shape != y_t.shape[:2]:
        raise ValueError("bootstrap_latent: shape mismatch")
    if step_index >= tb:
        return y_t.copy()
    m = m_i[:, :, None]
    return m * y_t + (1.0 - m) * b_t
