"""Bench cases, quality metrics, and report emission.

A bench case bundles an image with N masks and per-mask source/target
prompts plus whole-image annotations, mirroring the annotation schema of
region-editing benchmarks.  Metrics split into classical background
scores (PSNR/SSIM over the unedited region) and analytic fidelity scores
that ask the world's own mixture which component a region now resembles.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate
from scipy.special import logsumexp

from .errors import SchemaError
from .grids import as_grid, as_mask
from .denoiser import ToyWorld
from .compose import MaskSet
from .formats import load_image_ppm, load_latent, load_mask_pgm

CASE_FIELDS = ("id", "image", "masks", "tip", "smp", "tmp", "ein", "bindings")

_SSIM_C1 = (0.01 * 2.0) ** 2
_SSIM_C2 = (0.03 * 2.0) ** 2


@dataclass(frozen=True)
class BenchCase:
    """One editing task: image, masks, and per-mask prompt annotations.

    ``bindings`` maps every prompt string used by the case onto a world
    token id.  ``base`` is the directory relative paths resolve against;
    it is set by the loader and never serialized.
    """

    id: str
    image: str
    masks: tuple
    tip: str
    smp: tuple
    tmp: tuple
    ein: str
    bindings: dict
    base: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base, path)

    def load_image(self) -> np.ndarray:
        path = self.resolve(self.image)
        return load_latent(path) if path.endswith(".lat") else load_image_ppm(path)

    def load_masks(self) -> list:
        return [load_mask_pgm(self.resolve(p)) for p in self.masks]

    def token_for(self, prompt: str) -> int:
        if prompt not in self.bindings:
            raise ValueError(f"prompt {prompt!r} has no token binding")
        return int(self.bindings[prompt])


def _require(obj: dict, name: str, kind, path: str):
    if name not in obj:
        raise SchemaError(f"{path}: {name}: missing required field")
    value = obj[name]
    if not isinstance(value, kind):
        raise SchemaError(f"{path}: {name}: expected {kind.__name__}")
    return value


def load_case(path: str) -> BenchCase:
    """Parse and validate a case file; errors name the offending field."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except OSError as e:
        raise SchemaError(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: case file must be a JSON object")
    case_id = _require(obj, "id", str, path)
    image = _require(obj, "image", str, path)
    masks = _require(obj, "masks", list, path)
    tip = _require(obj, "tip", str, path)
    smp = _require(obj, "smp", list, path)
    tmp = _require(obj, "tmp", list, path)
    ein = _require(obj, "ein", str, path)
    bindings = _require(obj, "bindings", dict, path)
    for name, entries in (("masks", masks), ("smp", smp), ("tmp", tmp)):
        if not all(isinstance(x, str) for x in entries):
            raise SchemaError(f"{path}: {name}: entries must be strings")
    if len(smp) != len(masks):
        raise SchemaError(
            f"{path}: smp count: expected {len(masks)} to match masks, got {len(smp)}"
        )
    if len(tmp) != len(masks):
        raise SchemaError(
            f"{path}: tmp count: expected {len(masks)} to match masks, got {len(tmp)}"
        )
    for key, value in bindings.items():
        if not isinstance(key, str) or isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{path}: bindings: must map strings to token ids")
        if value < 0:
            raise SchemaError(f"{path}: bindings: token id for {key!r} is negative")
    case = BenchCase(
        id=case_id, image=image, masks=tuple(masks), tip=tip, smp=tuple(smp),
        tmp=tuple(tmp), ein=ein, bindings=dict(bindings),
        base=os.path.dirname(os.path.abspath(path)),
    )
    if not os.path.exists(case.resolve(case.image)):
        raise SchemaError(f"{path}: image: file not found: {case.image}")
    for m in case.masks:
        if not os.path.exists(case.resolve(m)):
            raise SchemaError(f"{path}: masks: file not found: {m}")
    return case


def save_case(case: BenchCase, path: str) -> None:
    """Canonical serialization: sorted keys, two-space indent, newline.

    Re-saving a loaded case reproduces the file byte for byte.
    """
    obj = {
        "id": case.id, "image": case.image, "masks": list(case.masks),
        "tip": case.tip, "smp": list(case.smp), "tmp": list(case.tmp),
        "ein": case.ein, "bindings": dict(case.bindings),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def bg_psnr(a: np.ndarray, b: np.ndarray, m0: np.ndarray) -> float:
    """Peak signal-to-noise over the background region, peak = 2
    (the [-1, 1] image range); identical backgrounds give +inf."""
    a = as_grid(a, "a")
    b = as_grid(b, "b")
    m0 = as_mask(m0)
    if a.shape != b.shape or m0.shape != a.shape[:2]:
        raise ValueError("bg_psnr: shape mismatch")
    active = int(m0.sum())
    if active == 0:
        raise ValueError("bg_psnr: background mask is empty")
    diff = (a - b) * m0[:, :, None]
    mse = float(np.sum(diff * diff)) / (active * a.shape[2])
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(4.0 / mse)


def _gaussian_kernel(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def bg_ssim(a: np.ndarray, b: np.ndarray, m0: np.ndarray) -> float:
    """Windowed structural similarity averaged over background centers.

    7x7 Gaussian window (sigma 1.5), reflect padding at borders, the
    usual stabilizers scaled for a dynamic range of 2; per-channel maps
    averaged over windows whose center pixel is background, then over
    channels.  Masked-out content is zeroed in both inputs first so the
    score depends on the background region alone even where windows
    overlap a mask.
    """
    a = as_grid(a, "a")
    b = as_grid(b, "b")
    m0 = as_mask(m0)
    if a.shape != b.shape or m0.shape != a.shape[:2]:
        raise ValueError("bg_ssim: shape mismatch")
    if int(m0.sum()) == 0:
        raise ValueError("bg_ssim: background mask is empty")
    kernel = _gaussian_kernel()
    sel = m0 == 1.0
    a = a * m0[:, :, None]
    b = b * m0[:, :, None]
    per_channel = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = correlate(x, kernel, mode="reflect")
        mu_y = correlate(y, kernel, mode="reflect")
        var_x = correlate(x * x, kernel, mode="reflect") - mu_x * mu_x
        var_y = correlate(y * y, kernel, mode="reflect") - mu_y * mu_y
        cov = correlate(x * y, kernel, mode="reflect") - mu_x * mu_y
        ssim_map = ((2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)) / (
            (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
        )
        per_channel.append(float(ssim_map[sel].mean()))
    return float(np.mean(per_channel))


def _region_loglik(values: np.ndarray, sel: np.ndarray, world: ToyWorld, tok: int) -> float:
    # Marginal log-likelihood of the region's content under the token's
    # own mixture at zero noise level (isotropic per component).
    comps = world.token_components(tok)
    terms = []
    for comp in comps:
        resid = (values - comp.mean)[sel]
        var = comp.std * comp.std
        n = resid.size
        terms.append(
            np.log(comp.weight)
            - 0.5 * n * np.log(2.0 * np.pi * var)
            - 0.5 * float(np.sum(resid * resid)) / var
        )
    return float(logsumexp(terms))


def fidelity_scores(
    y: np.ndarray, ms: MaskSet, smp_tokens, tmp_tokens, world: ToyWorld
) -> tuple:
    """Two-hypothesis posterior per mask: does the region's content look
    like the target token or the source token?  Returns the mean source
    and target responsibilities over masks; N=0 gives (None, None)."""
    y = as_grid(y, "y")
    if len(smp_tokens) != ms.n or len(tmp_tokens) != ms.n:
        raise ValueError("fidelity_scores: one source and target token per mask")
    if ms.n == 0:
        return None, None
    source, target = [], []
    for i in range(ms.n):
        sel = ms.mask(i + 1) == 1.0
        ll_s = _region_loglik(y, sel, world, int(smp_tokens[i]))
        ll_t = _region_loglik(y, sel, world, int(tmp_tokens[i]))
        norm = logsumexp([ll_s, ll_t])
        source.append(float(np.exp(ll_s - norm)))
        target.append(float(np.exp(ll_t - norm)))
    return float(np.mean(source)), float(np.mean(target))


def structural_proxy(a: np.ndarray, b: np.ndarray) -> float:
    """Coarse layout distance: L2 between 4x-downsampled (max-pooled)
    channel means, divided by the pooled element count."""
    a = as_grid(a, "a")
    b = as_grid(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"structural_proxy: shape mismatch {a.shape} vs {b.shape}")
    h, w, _ = a.shape
    if h % 4 or w % 4:
        raise ValueError(f"structural_proxy: dims must be divisible by 4, got {h}x{w}")
    pa = _pool4(a.mean(axis=2))
    pb = _pool4(b.mean(axis=2))
    return float(np.sqrt(np.sum((pa - pb) ** 2)) / pa.size)


def _pool4(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 4, 4, w // 4, 4).max(axis=(1, 3))


@dataclass(frozen=True)
class MetricsRecord:
    """One row of quality numbers for an edit; fidelities are None when
    the job had no edit masks."""

    bg_psnr: float
    bg_ssim: float
    source_fidelity: float | None
    target_fidelity: float | None
    structural_proxy: float
    timings: dict = field(default_factory=dict)

    def to_dict(self, with_timings: bool = True) -> dict:
        out = {
            "bg_psnr": _json_float(self.bg_psnr),
            "bg_ssim": _json_float(self.bg_ssim),
            "source_fidelity": _json_float(self.source_fidelity),
            "target_fidelity": _json_float(self.target_fidelity),
            "structural_proxy": _json_float(self.structural_proxy),
        }
        if with_timings:
            out["timings"] = {k: float(v) for k, v in sorted(self.timings.items())}
        return out


def _json_float(v):
    # Strict JSON has no Infinity/NaN literals; use string sentinels.
    if v is None:
        return None
    v = float(v)
    if np.isfinite(v):
        return v
    return "inf" if v > 0 else ("-inf" if v < 0 else "nan")


def write_report_json(report: dict, path: str) -> None:
    """Deterministic JSON emission (sorted keys, stable layout)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(report))


def write_report_csv(rows: list, path: str) -> None:
    """Rows are flat dicts; the header is the sorted union of keys."""
    columns = sorted({k for row in rows for k in row})
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row.get(k)) for k in columns})


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
