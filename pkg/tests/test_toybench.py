"""Toy bench generator invariants and shipped-data freshness.

The committed suite under toybench/ must be reproducible bit for bit
from the generator; regeneration into a scratch directory proves the
shipped files were not edited by hand.
"""

import os

import numpy as np
import pytest

from lomoe.compose import BootstrapConfig
from lomoe.denoiser import PROMPT_LEN
from lomoe.toybench import (
    MAIN_WEIGHT,
    OBJ_STD,
    SHAPE,
    TINT_SCALE,
    TOKEN_IDS,
    ablation_jobs,
    build_world,
    case_specs,
    deviation,
    region_masks,
    suite_jobs,
    timing_job_factory,
    token_pattern,
    token_tint,
    write_suite,
)


def test_regenerated_suite_matches_shipped_bytes(suite_root, tmp_path):
    write_suite(str(tmp_path))
    regenerated = []
    for dirpath, _, filenames in os.walk(tmp_path):
        for fn in filenames:
            full = os.path.join(dirpath, fn)
            regenerated.append(os.path.relpath(full, tmp_path))
    assert regenerated
    for rel in sorted(regenerated):
        with open(os.path.join(tmp_path, rel), "rb") as f_new:
            with open(os.path.join(suite_root, rel), "rb") as f_old:
                assert f_new.read() == f_old.read(), rel


def test_regions_are_disjoint_and_inside_the_grid():
    masks = region_masks()
    names = sorted(masks)
    for i, a in enumerate(names):
        assert masks[a].shape == SHAPE[:2]
        assert masks[a].sum() > 0
        for b in names[i + 1 :]:
            assert float((masks[a] * masks[b]).sum()) == 0.0, (a, b)


def test_token_patterns_live_on_their_region():
    masks = region_masks()
    for label, tok in TOKEN_IDS.items():
        region = label.split("-")[1]
        pattern = token_pattern(label)
        outside = pattern * (1.0 - masks[region])[:, :, None]
        assert float(np.abs(outside).max()) == 0.0
        assert float(np.abs(pattern).max()) > 0.0
        assert tok >= 1


def test_token_tint_is_region_centred_with_fixed_scale():
    masks = region_masks()
    for tok in TOKEN_IDS.values():
        tint = token_tint(tok)
        assert float(np.sqrt((tint**2).mean())) == pytest.approx(
            TINT_SCALE * np.sqrt(0.5), rel=1e-12
        )
        for support in masks.values():
            for c in range(SHAPE[2]):
                assert float((tint[:, :, c] * support).sum()) == pytest.approx(0.0, abs=1e-10)


def test_world_tokens_are_two_component_tint_pairs():
    world = build_world()
    assert world.vocab == len(TOKEN_IDS) + 1
    for label, tok in TOKEN_IDS.items():
        comps = world.components[tok]
        assert len(comps) == 2
        assert comps[0].weight == MAIN_WEIGHT and comps[1].weight == 1.0 - MAIN_WEIGHT
        assert comps[0].std == OBJ_STD and comps[1].std == OBJ_STD
        np.testing.assert_allclose(
            comps[1].mean - comps[0].mean, token_tint(tok), atol=1e-12
        )
        assert world.labels[tok] == label


def test_deviation_avoids_object_regions():
    covered = np.clip(sum(region_masks().values()), 0.0, 1.0)
    for index in (1, 4, 8):
        dev = deviation(index)
        assert float(np.abs(dev * covered[:, :, None]).max()) == 0.0
        assert float(np.abs(dev).max()) > 0.0


def test_case_specs_are_well_formed():
    specs = case_specs()
    assert len(specs) == 8
    assert len({s["id"] for s in specs}) == 8
    for s in specs:
        assert len(s["smp"]) == len(s["tmp"])
        for src, tgt in zip(s["smp"], s["tmp"]):
            # each edit recolors a region in place
            assert src.split("-")[1] == tgt.split("-")[1]
            assert src in s["content"]


def test_suite_jobs_bind_all_cases(world, cases):
    jobs = suite_jobs(world, cases, steps=4, t_total=40, boot=BootstrapConfig(tb=2))
    assert len(jobs) == 8
    for job, case in zip(jobs, cases):
        assert job.n == len(case.masks)
        assert job.steps == 4


def test_ablation_jobs_add_reseeded_pairs(world, cases):
    jobs = ablation_jobs(world, cases, steps=4, t_total=40, boot=BootstrapConfig(tb=2))
    assert len(jobs) == 10
    assert jobs[8].seed == jobs[6].seed + 1000
    assert jobs[9].seed == jobs[7].seed + 2000
    np.testing.assert_array_equal(jobs[8].x0, jobs[6].x0)


def test_timing_job_factory_builds_disjoint_masks(world):
    factory = timing_job_factory(world, steps=2, t_total=20, boot=BootstrapConfig(tb=0))
    for n in (1, 3, 7):
        job = factory(n)
        assert job.n == n
        stack = np.stack(job.masks)
        assert float(stack.sum(axis=0).max()) == 1.0
        assert len(job.c0.tokens) == max(PROMPT_LEN, n)
    with pytest.raises(ValueError, match="n must be in"):
        factory(10)
