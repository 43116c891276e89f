"""Deterministic tensor-grid arithmetic shared by every stage of the engine.

A latent grid is a plain ``numpy`` array of shape ``(height, width,
channels)`` in row-major ``(y, x, c)`` order.  The engine computes in
float64; the on-disk container stores float32 (see :mod:`lomoe.formats`).
All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def as_grid(a, name: str = "grid") -> np.ndarray:
    """Validate and return ``a`` as a float64 (H, W, C) grid.

    Raises ValueError on wrong rank, empty dims, or non-finite entries.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_mask(m, name: str = "mask") -> np.ndarray:
    """Validate a single-channel binary mask of shape (H, W)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {m.shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError(f"{name} entries must be 0 or 1")
    return m


def softmax_tau(z, tau: float) -> np.ndarray:
    """Temperature softmax ``exp(z_i/tau) / sum_j exp(z_j/tau)``.

    Stabilized by max-subtraction.  ``tau`` smooths the distribution:
    large tau flattens toward uniform, small tau sharpens.  Works on the
    last axis of any array, so a (H, W, L) logit block is normalized
    per pixel.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax_tau: empty input")
    if not np.isfinite(tau) or tau <= 0.0:
        raise ValueError(f"softmax_tau: tau must be positive, got {tau}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_tau: non-finite entry in input")
    u = z / tau
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def max_pool2(grid: np.ndarray) -> np.ndarray:
    """2x2 max pool over the spatial axes; channels preserved."""
    h, w, c = grid.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    blocks = grid.reshape(h // 2, 2, w // 2, 2, c)
    return blocks.max(axis=(1, 3))


def max_pool_pyramid(eta0: np.ndarray, levels: int) -> list[np.ndarray]:
    """Pyramid of noise maps: level 0 is the input, each next level is its
    2x2 max pool.  Requires spatial dims divisible by ``2**(levels-1)``.
    """
    eta0 = as_grid(eta0, "eta0")
    if levels < 1:
        raise ValueError(f"max_pool_pyramid: levels must be >= 1, got {levels}")
    div = 1 << (levels - 1)
    h, w, _ = eta0.shape
    if h % div or w % div:
        raise ValueError(
            f"max_pool_pyramid: {h}x{w} not divisible by 2^(levels-1)={div}"
        )
    out = [eta0]
    for _ in range(levels - 1):
        out.append(max_pool2(out[-1]))
    return out


def avg_pool2(grid: np.ndarray) -> np.ndarray:
    """2x2 average pool over the spatial axes; channels preserved."""
    h, w, c = grid.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    blocks = grid.reshape(h // 2, 2, w // 2, 2, c)
    return blocks.mean(axis=(1, 3))


def avg_pool_pyramid(eta0: np.ndarray, levels: int) -> list[np.ndarray]:
    """Pyramid of noise maps: level 0 is the input, each next level is its
    2x2 average pool.  Requires spatial dims divisible by ``2**(levels-1)``.

    Unlike the max pyramid, averaging keeps every level zero-mean for
    zero-mean input, so correlation statistics computed per level stay
    unbiased on white noise.
    """
    eta0 = as_grid(eta0, "eta0")
    if levels < 1:
        raise ValueError(f"avg_pool_pyramid: levels must be >= 1, got {levels}")
    div = 1 << (levels - 1)
    h, w, _ = eta0.shape
    if h % div or w % div:
        raise ValueError(
            f"avg_pool_pyramid: {h}x{w} not divisible by 2^(levels-1)={div}"
        )
    out = [eta0]
    for _ in range(levels - 1):
        out.append(avg_pool2(out[-1]))
    return out


def mean_var(grid: np.ndarray) -> tuple[float, float]:
    """Mean and population variance (divide by element count) of a grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("mean_var: empty grid")
    mu = float(grid.mean())
    var = float(np.mean((grid - mu) ** 2))
    return mu, var


def masked_l2(grid: np.ndarray, mask: np.ndarray) -> float:
    """sqrt(sum of squared entries where mask is 1), mask broadcast over
    channels.  An all-zero mask gives 0."""
    grid = as_grid(grid, "grid")
    mask = as_mask(mask)
    if mask.shape != grid.shape[:2]:
        raise ValueError(
            f"masked_l2: mask {mask.shape} does not match grid {grid.shape[:2]}"
        )
    return float(np.sqrt(np.sum(mask[:, :, None] * grid * grid)))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeededRng:
    """A named random stream: counter-based (Philox), so the same
    (seed, stream) pair yields bit-identical draws on any machine and
    under any thread schedule.

    Instances are immutable stream labels.  ``generator()`` starts the
    stream from its beginning; callers that need several independent
    sources derive children with :meth:`child`.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "SeededRng":
        """Fork a sub-stream; distinct indices give independent streams."""
        return SeededRng(self.seed, _splitmix64((self.stream << 8) ^ index))

    def normal(self, shape) -> np.ndarray:
        """Standard-normal draw from the start of this stream."""
        return self.generator().standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self.generator().uniform(low, high, shape)
