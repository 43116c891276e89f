"""Deterministic generator for the shipped 16x16 toy bench.

Three fixed regions (a disk, a square, a stripe) each have two tokens
that share the region's support but differ in color, so every case can
retarget a region from its source token to a sibling token.  Every
token is a two-component mixture: the majority component is the flat
color pattern, the minority adds a faint whole-grid tint, so posterior
responsibilities stay soft and the guided update's in-mask displacement
is what moves them (see token_tint).  Images add a faint low-frequency
background deviation on top of the token means; it is what
distinguishes a preserved background from a regenerated one.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from .denoiser import PROMPT_LEN, ToyWorld, make_prompt, make_world
from .bench import BenchCase, canonical_json, load_case, save_case
from .formats import save_image_ppm, save_mask_pgm, save_world, load_world
from .pipeline import EditJob, job_from_case, run_edit
from .preserve import GuidanceConfig

SHAPE = (16, 16, 3)
OBJ_STD = 0.08
MAIN_WEIGHT = 0.85
DEV_SCALE = 0.06
TINT_SCALE = 0.05

_COLORS = {
    "red-disk": (0.9, -0.35, -0.35),
    "blue-disk": (-0.35, -0.2, 0.9),
    "green-square": (-0.25, 0.85, -0.25),
    "gold-square": (0.85, 0.7, -0.4),
    "plum-stripe": (0.75, -0.3, 0.8),
    "teal-stripe": (-0.45, 0.7, 0.85),
}

TOKEN_IDS = {label: i + 1 for i, label in enumerate(_COLORS)}


def _disk(cy: int, cx: int, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0 : SHAPE[0], 0 : SHAPE[1]]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)


def _rect(y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
    m = np.zeros(SHAPE[:2])
    m[y0:y1, x0:x1] = 1.0
    return m


def region_masks() -> dict:
    return {
        "disk": _disk(5, 5, 3.2),
        "square": _rect(9, 14, 9, 14),
        "stripe": _rect(2, 5, 9, 15),
    }


def _region_of(label: str) -> str:
    return label.split("-")[1]


def token_pattern(label: str) -> np.ndarray:
    support = region_masks()[_region_of(label)]
    return support[:, :, None] * np.asarray(_COLORS[label])


def token_tint(tok: int) -> np.ndarray:
    """Faint whole-grid field distinguishing a token's two components.

    The minority component adds this tint on top of the shared pattern,
    so the two components of a token differ by the tint alone.  The
    background prediction inherits the tint in proportion to the
    minority responsibility, which is how in-mask guidance couples to
    background damage: that is the coupling the temperature ablation
    measures.

    Two properties keep the coupling well behaved.  The difference
    carries no pattern term, so the quadratic norm penalty on the tint
    pins both the reconstruction and the edit to the majority component
    once the noise floor drops below the tint scale, and late steps
    never flip.  And each channel is centred to sum to zero over every
    object region, so swapping one flat-colour pattern for another
    leaves the component evidence untouched: only the guided update's
    in-mask displacement, whose size the softmax temperature sets, can
    move the responsibilities.
    """
    yy, xx = np.mgrid[0 : SHAPE[0], 0 : SHAPE[1]]
    channels = [
        np.sin(2.0 * np.pi * ((tok + 1.0) * yy + (c + 1.0) * xx) / 16.0)
        for c in range(SHAPE[2])
    ]
    tint = np.stack(channels, axis=2)
    for support in region_masks().values():
        area = support.sum()
        for c in range(SHAPE[2]):
            inside = tint[:, :, c] * support
            tint[:, :, c] -= support * (inside.sum() / area)
    tint *= TINT_SCALE * np.sqrt(0.5) / np.sqrt((tint**2).mean())
    return tint


def build_world() -> ToyWorld:
    tokens = {}
    labels = {0: "null"}
    for label, tok in TOKEN_IDS.items():
        pattern = token_pattern(label)
        tokens[tok] = [
            (MAIN_WEIGHT, pattern, OBJ_STD),
            (1.0 - MAIN_WEIGHT, pattern + token_tint(tok), OBJ_STD),
        ]
        labels[tok] = label
    return make_world(SHAPE, tokens, labels=labels)


def deviation(index: int) -> np.ndarray:
    """Faint smooth background field, distinct per case, visible to the
    coarse structural proxy but small next to the token stds.  It is
    zeroed over the object regions so that replacing a region's content
    moves the in-mask latent by a pure pattern difference, which the
    region-centred tints are blind to."""
    yy, xx = np.mgrid[0 : SHAPE[0], 0 : SHAPE[1]]
    channels = [
        np.sin(2.0 * np.pi * (yy + 3.0 * index + 2.0 * c) / 16.0)
        * np.cos(2.0 * np.pi * (xx + 5.0 * index - c) / 16.0)
        for c in range(SHAPE[2])
    ]
    field = DEV_SCALE * np.stack(channels, axis=2)
    outside = 1.0 - np.clip(sum(region_masks().values()), 0.0, 1.0)
    return field * outside[:, :, None]


def case_specs() -> list:
    return [
        {"id": "disk-red-to-blue", "content": ["red-disk", "green-square"],
         "smp": ["red-disk"], "tmp": ["blue-disk"], "dev": 1},
        {"id": "disk-blue-to-red", "content": ["blue-disk", "green-square"],
         "smp": ["blue-disk"], "tmp": ["red-disk"], "dev": 2},
        {"id": "square-green-to-gold", "content": ["red-disk", "green-square"],
         "smp": ["green-square"], "tmp": ["gold-square"], "dev": 3},
        {"id": "square-gold-to-green", "content": ["red-disk", "gold-square"],
         "smp": ["gold-square"], "tmp": ["green-square"], "dev": 4},
        {"id": "stripe-plum-to-teal", "content": ["plum-stripe", "green-square"],
         "smp": ["plum-stripe"], "tmp": ["teal-stripe"], "dev": 5},
        {"id": "stripe-teal-to-plum", "content": ["teal-stripe", "red-disk"],
         "smp": ["teal-stripe"], "tmp": ["plum-stripe"], "dev": 6},
        {"id": "pair-disk-square", "content": ["red-disk", "green-square"],
         "smp": ["red-disk", "green-square"], "tmp": ["blue-disk", "gold-square"], "dev": 7},
        {"id": "pair-swap-back", "content": ["blue-disk", "gold-square"],
         "smp": ["blue-disk", "gold-square"], "tmp": ["red-disk", "green-square"], "dev": 8},
    ]


def case_image(spec: dict) -> np.ndarray:
    img = deviation(spec["dev"])
    for label in spec["content"]:
        img = img + token_pattern(label)
    return img


def write_suite(root: str) -> None:
    """Write world, images, masks, and case files; fully deterministic,
    so regeneration is byte-identical to the committed data."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    save_world(build_world(), os.path.join(root, "world.txt"))
    for name, mask in region_masks().items():
        save_mask_pgm(mask, os.path.join(root, "masks", f"{name}.pgm"))
    for spec in case_specs():
        save_image_ppm(case_image(spec), os.path.join(root, "images", f"{spec['id']}.ppm"))
        case = BenchCase(
            id=spec["id"],
            image=f"images/{spec['id']}.ppm",
            masks=tuple(f"masks/{_region_of(s)}.pgm" for s in spec["smp"]),
            tip=" and ".join(spec["tmp"]),
            smp=tuple(spec["smp"]),
            tmp=tuple(spec["tmp"]),
            ein="; ".join(f"turn the {s} into a {t}" for s, t in zip(spec["smp"], spec["tmp"])),
            bindings={lbl: TOKEN_IDS[lbl] for lbl in sorted(set(spec["smp"] + spec["tmp"]))},
            base=root,
        )
        save_case(case, os.path.join(root, f"{spec['id']}.json"))


def load_suite(root: str) -> tuple:
    world = load_world(os.path.join(root, "world.txt"))
    cases = [load_case(os.path.join(root, f"{spec['id']}.json")) for spec in case_specs()]
    return world, cases


def suite_jobs(world: ToyWorld, cases, **overrides) -> list:
    return [job_from_case(case, world, **overrides) for case in cases]


def ablation_jobs(world: ToyWorld, cases, **overrides) -> list:
    """Ten paired-comparison jobs for the inversion-vs-random-start study:
    the eight cases plus two reseeded variants of the multi-mask cases.

    Preservation guidance is disabled by default (pass ``guide=`` to
    override): the study compares starting latents, and the guidance terms
    pull both runs toward the same cached reference, which at toy scale
    collapses the two starts to near-identical outputs and leaves nothing
    for the comparison to measure."""
    overrides.setdefault("guide", GuidanceConfig(lambda_b=0.0, lambda_xa=0.0))
    jobs = suite_jobs(world, cases, **overrides)
    from dataclasses import replace

    jobs.append(replace(jobs[6], seed=jobs[6].seed + 1000))
    jobs.append(replace(jobs[7], seed=jobs[7].seed + 2000))
    return jobs


def timing_job_factory(world: ToyWorld, **overrides):
    """Jobs with n disjoint 4x4 mask squares for the timing bench."""
    slots = [(r, c) for r in (1, 6, 11) for c in (1, 6, 11)]
    x0 = case_image({"content": ["red-disk", "green-square"], "dev": 0})

    def factory(n: int) -> EditJob:
        if not 1 <= n <= len(slots):
            raise ValueError(f"n must be in [1, {len(slots)}], got {n}")
        masks = tuple(_rect(r, r + 4, c, c + 4) for r, c in slots[:n])
        length = max(PROMPT_LEN, n)
        src = TOKEN_IDS["red-disk"]
        tgt = TOKEN_IDS["blue-disk"]
        c0 = make_prompt([src] * n, label="timing source", length=length)
        prompts = tuple(
            make_prompt([tgt], label="timing target", length=length) for _ in range(n)
        )
        return EditJob(
            x0=x0, c0=c0, masks=masks, prompts=prompts,
            smp_tokens=(src,) * n, tmp_tokens=(tgt,) * n, **overrides,
        )

    return factory


def write_golden(root: str, world: ToyWorld, cases, head) -> dict:
    """Run the suite at defaults and record the metric values that the
    acceptance thresholds were calibrated against."""
    rows = {}
    for case in cases:
        result = run_edit(job_from_case(case, world), world, head)
        rows[case.id] = result.metrics.to_dict(with_timings=False)
    golden = {"defaults": EditJob(
        x0=np.zeros(SHAPE), c0=make_prompt([1]), masks=(), prompts=()
    ).config_echo(), "cases": rows}
    golden["defaults"].pop("c0")
    golden["defaults"].pop("prompts")
    golden["defaults"].pop("n_masks")
    with open(os.path.join(root, "golden.json"), "w", encoding="utf-8") as f:
        f.write(canonical_json(golden))
    return golden


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    root = args[0] if args else "toybench"
    write_suite(root)
    from .pipeline import head_for_world

    world, cases = load_suite(root)
    write_golden(root, world, cases, head_for_world(world))
    print(f"toy bench written to {root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
