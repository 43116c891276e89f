"""Binary and text containers: PPM images, PGM masks, latent grids, worlds.

All loaders reject malformed input with a FormatError carrying the byte
offset of the first offending byte where that is meaningful; they never
crash or return garbage.  The engine computes in float64 but the latent
container stores 32-bit floats, so save/load round-trips are exact at
float32 precision.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError
from .grids import as_grid, as_mask
from .denoiser import Component, ToyWorld, NULL_TOKEN, NULL_STD

LATENT_MAGIC = b"LOMOE1\n"


def save_latent(grid: np.ndarray, path: str) -> None:
    """Write magic, an ASCII "H W C" dims line, then little-endian
    float32 payload in row-major order."""
    grid = as_grid(grid, "latent")
    h, w, c = grid.shape
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(f"{h} {w} {c}\n".encode("ascii"))
        f.write(grid.astype("<f4").tobytes())


def load_latent(path: str) -> np.ndarray:
    data = _read_file(path)
    if data[: len(LATENT_MAGIC)] != LATENT_MAGIC:
        raise FormatError(f"{path}: bad latent magic", offset=0)
    nl = data.find(b"\n", len(LATENT_MAGIC))
    if nl < 0:
        raise FormatError(f"{path}: unterminated dims line", offset=len(LATENT_MAGIC))
    dims_start = len(LATENT_MAGIC)
    fields = data[dims_start:nl].split()
    if len(fields) != 3:
        raise FormatError(f"{path}: dims line must be 'H W C'", offset=dims_start)
    try:
        h, w, c = (int(x) for x in fields)
    except ValueError:
        raise FormatError(f"{path}: non-integer dims", offset=dims_start) from None
    if min(h, w, c) < 1:
        raise FormatError(f"{path}: non-positive dims {h}x{w}x{c}", offset=dims_start)
    payload = data[nl + 1 :]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}",
            offset=nl + 1 + min(len(payload), expected),
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise FormatError(
            f"{path}: non-finite value in payload", offset=nl + 1 + int(bad[0]) * 4
        )
    return values


def _read_file(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None


def _parse_netpbm_header(data: bytes, magic: bytes, path: str) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset) for a binary
    netpbm header, honoring '#' comments."""
    if data[:2] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header", offset=pos)
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise FormatError(f"{path}: unexpected byte in header", offset=pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval", offset=pos)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: non-positive dimensions {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files supported (maxval 255)", offset=2)
    return width, height, maxval, pos + 1


def load_image_ppm(path: str) -> np.ndarray:
    """8-bit P6 image as an (H, W, 3) grid mapped onto [-1, 1]."""
    data = _read_file(path)
    width, height, _, start = _parse_netpbm_header(data, b"P6", path)
    expected = width * height * 3
    payload = data[start:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}",
            offset=start + min(len(payload), expected),
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 127.5 - 1.0


def save_image_ppm(grid: np.ndarray, path: str) -> None:
    """Quantize a [-1, 1] grid to 8-bit P6 (exact at the endpoints)."""
    grid = as_grid(grid, "image")
    if grid.shape[2] != 3:
        raise ValueError(f"P6 needs 3 channels, got {grid.shape[2]}")
    quant = np.round((np.clip(grid, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    h, w, _ = grid.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quant.tobytes())


def load_mask_pgm(path: str) -> np.ndarray:
    """8-bit P5 image thresholded at 128 into a binary (H, W) mask."""
    data = _read_file(path)
    width, height, _, start = _parse_netpbm_header(data, b"P5", path)
    expected = width * height
    payload = data[start:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}",
            offset=start + min(len(payload), expected),
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return (pixels >= 128).astype(np.float64)


def save_mask_pgm(mask: np.ndarray, path: str) -> None:
    mask = as_mask(mask)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask * 255).astype(np.uint8).tobytes())


def save_world(world: ToyWorld, path: str, means_dirname: str = "means") -> None:
    """Write the line-oriented world file plus one .lat file per mean.

    Mean files land in ``means_dirname`` next to the world file and are
    referenced by relative path.
    """
    base = os.path.dirname(os.path.abspath(path))
    means_dir = os.path.join(base, means_dirname)
    os.makedirs(means_dir, exist_ok=True)
    lines = []
    for tok in sorted(world.components):
        label = world.labels.get(tok, f"tok{tok}")
        lines.append(f"token {tok} {label}")
    for tok in sorted(world.components):
        for j, comp in enumerate(world.components[tok]):
            rel = f"{means_dirname}/tok{tok}_c{j}.lat"
            save_latent(comp.mean, os.path.join(base, rel))
            lines.append(f"component {tok} {comp.weight!r} {comp.std!r} mean {rel}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_world(path: str) -> ToyWorld:
    """Parse `token <id> <label>` / `component <token-id> <weight> <std>
    mean <file.lat>` lines; mean paths resolve against the world file."""
    base = os.path.dirname(os.path.abspath(path))
    labels = {}
    comps: dict[int, list[Component]] = {}
    try:
        with open(path, "r", encoding="ascii") as f:
            raw_lines = f.read().splitlines()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror or e}") from None
    for lineno, line in enumerate(raw_lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        where = f"{path}:{lineno}"
        if parts[0] == "token":
            if len(parts) < 3:
                raise FormatError(f"{where}: token line needs '<id> <label>'")
            labels[_parse_int(parts[1], where)] = " ".join(parts[2:])
        elif parts[0] == "component":
            if len(parts) != 6 or parts[4] != "mean":
                raise FormatError(
                    f"{where}: component line needs '<token-id> <weight> <std> mean <file>'"
                )
            tok = _parse_int(parts[1], where)
            weight = _parse_float(parts[2], where)
            std = _parse_float(parts[3], where)
            mean = load_latent(os.path.join(base, parts[5]))
            comps.setdefault(tok, []).append(Component(weight, mean, std))
        else:
            raise FormatError(f"{where}: unknown directive {parts[0]!r}")
    if not comps:
        raise FormatError(f"{path}: world file defines no components")
    if NULL_TOKEN not in comps:
        shape = comps[next(iter(comps))][0].mean.shape
        comps[NULL_TOKEN] = [Component(1.0, np.zeros(shape), NULL_STD)]
        labels.setdefault(NULL_TOKEN, "null")
    try:
        return ToyWorld(
            vocab=max(comps) + 1,
            components={k: tuple(v) for k, v in comps.items()},
            shape=comps[NULL_TOKEN][0].mean.shape,
            labels=labels,
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def _parse_int(s: str, where: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise FormatError(f"{where}: expected integer, got {s!r}") from None


def _parse_float(s: str, where: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise FormatError(f"{where}: expected number, got {s!r}") from None
    if not np.isfinite(v):
        raise FormatError(f"{where}: non-finite number {s!r}")
    return v
