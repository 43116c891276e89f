"""End-to-end orchestration: invert, reconstruct, edit, ablate, time.

One edit runs three phases over a shared step map.  Inversion lifts the
input to x_inv while storing latents and regularized predictions; the
reconstruction walk caches the rectified reference path and its
attention maps; the edit loop then denoises from x_inv with one branch
per mask plus a background branch, applying the guided update before
branch evaluation (so every branch sees the corrected latent), fusing
branches with the mask-weighted blend, and re-adding the reconstruction
drift so a no-op edit reproduces the reference path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .grids import SeededRng, as_grid, as_mask
from .schedule import DEFAULT_STEPS, DEFAULT_T, ddim_denoise_step, make_schedule, make_step_map
from .denoiser import (
    PROMPT_LEN,
    AttentionHead,
    PromptSpec,
    ToyWorld,
    guided_noise,
    make_attention_head,
    make_prompt,
)
from .inversion import RegConfig, invert
from .compose import BootstrapConfig, bootstrap_latent, build_mask_set, make_background_bt, psi_step
from .preserve import GuidanceConfig, ReconCache, guided_update, reconstruct
from .bench import BenchCase, MetricsRecord, bg_psnr, bg_ssim, fidelity_scores, structural_proxy

STREAM_BOOTSTRAP = 0xB0075
STREAM_RANDOM_START = 0x5EED0
DEFAULT_HEAD_SEED = 7


def head_for_world(world: ToyWorld, t_total: int = DEFAULT_T, seed: int = DEFAULT_HEAD_SEED) -> AttentionHead:
    """The suite's read-out head, regenerated from a fixed seed so that
    golden runs, CLI runs, and tests all see the same projections."""
    return make_attention_head(
        seed=seed, channels=world.shape[2], vocab=world.vocab, t_total=t_total
    )


@dataclass(frozen=True)
class EditJob:
    """Everything one edit needs: the input, masks with their target
    prompts, the source prompt, and all phase configs.

    smp_tokens / tmp_tokens are the per-mask source/target world tokens
    used by the fidelity metrics; leave empty to skip those scores.
    """

    x0: np.ndarray
    c0: PromptSpec
    masks: tuple
    prompts: tuple
    t_total: int = DEFAULT_T
    steps: int = DEFAULT_STEPS
    kind: str = "linear-beta"
    reg: RegConfig = field(default_factory=RegConfig)
    guide: GuidanceConfig = field(default_factory=GuidanceConfig)
    boot: BootstrapConfig = field(default_factory=BootstrapConfig)
    seed: int = 0
    guidance: float = 1.0
    smp_tokens: tuple = ()
    tmp_tokens: tuple = ()

    def __post_init__(self):
        x0 = as_grid(self.x0, "x0").copy()
        x0.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        masks = tuple(as_mask(m, f"mask {i + 1}").copy() for i, m in enumerate(self.masks))
        object.__setattr__(self, "masks", masks)
        prompts = tuple(self.prompts)
        if len(prompts) != len(masks):
            raise ValueError(f"{len(masks)} masks need {len(masks)} prompts, got {len(prompts)}")
        for i, p in enumerate(prompts):
            if len(p.tokens) != len(self.c0.tokens):
                raise ValueError(f"prompt {i + 1} length differs from the source prompt")
        object.__setattr__(self, "prompts", prompts)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.boot.tb > self.steps:
            raise ValueError(f"tb={self.boot.tb} exceeds inference steps {self.steps}")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        for name, toks in (("smp_tokens", self.smp_tokens), ("tmp_tokens", self.tmp_tokens)):
            toks = tuple(int(t) for t in toks)
            if toks and len(toks) != len(masks):
                raise ValueError(f"{name} must have one entry per mask")
            object.__setattr__(self, name, toks)

    @property
    def n(self) -> int:
        return len(self.masks)

    def config_echo(self) -> dict:
        return {
            "t_total": self.t_total, "steps": self.steps, "kind": self.kind,
            "seed": self.seed, "guidance": self.guidance, "n_masks": self.n,
            "c0": list(self.c0.tokens),
            "prompts": [list(p.tokens) for p in self.prompts],
            "lambda_reg": self.reg.lambda_reg, "levels": self.reg.levels,
            "k_reg": self.reg.k_reg, "eta_reg": self.reg.eta_reg,
            "lambda_xa": self.guide.lambda_xa, "lambda_b": self.guide.lambda_b,
            "k_g": self.guide.k_g, "eta_g": self.guide.eta_g, "tau": self.guide.tau,
            "tb": self.boot.tb,
        }


@dataclass(frozen=True)
class EditResult:
    """Edited latent, the reconstruction it is measured against, metrics,
    wall-clock per phase, and the configuration echo."""

    y_final: np.ndarray
    recon_final: np.ndarray
    metrics: MetricsRecord
    timings: dict
    config: dict


def job_from_case(case: BenchCase, world: ToyWorld, **overrides) -> EditJob:
    """Bind a bench case to a world: the source prompt is built from the
    per-mask source tokens, one target prompt per mask from its target
    token.  Keyword overrides feed the EditJob constructor."""
    x0 = case.load_image()
    masks = case.load_masks()
    length = max(PROMPT_LEN, len(masks))
    smp_tokens = tuple(case.token_for(s) for s in case.smp)
    tmp_tokens = tuple(case.token_for(t) for t in case.tmp)
    c0 = make_prompt(smp_tokens, label=" + ".join(case.smp), length=length)
    prompts = tuple(
        make_prompt([tok], label=lbl, length=length)
        for tok, lbl in zip(tmp_tokens, case.tmp)
    )
    return EditJob(
        x0=x0, c0=c0, masks=tuple(masks), prompts=prompts,
        smp_tokens=smp_tokens, tmp_tokens=tmp_tokens, **overrides,
    )


def _edit_loop(
    job: EditJob, world: ToyWorld, head: AttentionHead, cache: ReconCache, y0: np.ndarray
) -> np.ndarray:
    sched = make_schedule(job.t_total, job.kind)
    ms = build_mask_set(job.masks, shape=job.x0.shape[:2])
    boot_rng = SeededRng(job.seed, STREAM_BOOTSTRAP).child(job.boot.seed)
    branch_prompts = (job.c0,) + job.prompts
    y = y0.copy()
    for idx, (t_hi, t_lo) in enumerate(cache.step_map.pairs_descending()):
        y = guided_update(
            y, t_hi, cache.x_prime(t_hi), cache.a_ref(t_hi), ms, job.prompts, head, job.guide
        )
        if ms.n and idx < job.boot.tb:
            b_t = make_background_bt(t_hi, y.shape, job.boot, sched, boot_rng)
            branch_in = [y] + [
                bootstrap_latent(y, ms.mask(i), b_t, idx, job.boot.tb)
                for i in range(1, ms.n + 1)
            ]
        else:
            branch_in = [y] * (ms.n + 1)
        outs = []
        for x_i, c_i in zip(branch_in, branch_prompts):
            eps = guided_noise(x_i, t_hi, c_i, job.guidance, world, sched)
            outs.append(ddim_denoise_step(x_i, eps, t_hi, t_lo, sched))
        y = psi_step(outs, ms) + cache.drift(t_lo)
    return y


def _compute_metrics(
    job: EditJob, world: ToyWorld, y: np.ndarray, recon_final: np.ndarray, timings: dict
) -> MetricsRecord:
    ms = build_mask_set(job.masks, shape=job.x0.shape[:2])
    if ms.m0.sum() > 0:
        psnr = bg_psnr(y, recon_final, ms.m0)
        ssim = bg_ssim(y, recon_final, ms.m0)
    else:
        # full-coverage edits have no background to score
        psnr = None
        ssim = None
    if job.smp_tokens and job.tmp_tokens:
        src, tgt = fidelity_scores(y, ms, job.smp_tokens, job.tmp_tokens, world)
    else:
        src, tgt = None, None
    return MetricsRecord(
        bg_psnr=psnr, bg_ssim=ssim, source_fidelity=src, target_fidelity=tgt,
        structural_proxy=structural_proxy(y, job.x0), timings=dict(timings),
    )


def _run(job: EditJob, world: ToyWorld, head: AttentionHead, random_start: bool) -> EditResult:
    t_start = time.perf_counter()
    timings = {}

    t0 = time.perf_counter()
    trace = invert(job.x0, job.c0, job.steps, job.reg, world,
                   make_schedule(job.t_total, job.kind))
    timings["invert"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cache = reconstruct(trace, world, make_schedule(job.t_total, job.kind), head,
                        tau=job.guide.tau)
    timings["reconstruct"] = time.perf_counter() - t0

    if random_start:
        y_top = SeededRng(job.seed, STREAM_RANDOM_START).normal(job.x0.shape)
    else:
        y_top = trace.x_inv
    t0 = time.perf_counter()
    y = _edit_loop(job, world, head, cache, y_top)
    timings["edit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    metrics = _compute_metrics(job, world, y, cache.final, timings)
    timings["metrics"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start
    metrics = replace(metrics, timings=dict(timings))
    return EditResult(
        y_final=y, recon_final=cache.final, metrics=metrics,
        timings=dict(timings), config=job.config_echo(),
    )


def run_edit(job: EditJob, world: ToyWorld, head: AttentionHead) -> EditResult:
    """Full single-pass edit starting from the inverted latent."""
    return _run(job, world, head, random_start=False)


def run_edit_random_start(job: EditJob, world: ToyWorld, head: AttentionHead) -> EditResult:
    """Ablation variant: identical loop, but the edit starts from seeded
    noise instead of x_inv (the reference path is still computed)."""
    return _run(job, world, head, random_start=True)


def run_iterative(job: EditJob, world: ToyWorld, head: AttentionHead) -> EditResult:
    """Apply the masks one edit pass at a time, re-inverting in between.

    Pass k edits mask k only, feeding its output latent into pass k+1.
    The metrics of the last pass are reported against the full mask set;
    per-pass wall-clock lands in timings as pass_1..pass_N.
    """
    if job.n < 1:
        raise ValueError("run_iterative needs at least one mask")
    current = job.x0
    timings = {}
    result = None
    for k in range(job.n):
        sub = replace(
            job,
            x0=current,
            masks=(job.masks[k],),
            prompts=(job.prompts[k],),
            smp_tokens=(job.smp_tokens[k],) if job.smp_tokens else (),
            tmp_tokens=(job.tmp_tokens[k],) if job.tmp_tokens else (),
        )
        result = run_edit(sub, world, head)
        current = result.y_final
        timings[f"pass_{k + 1}"] = result.timings["total"]
    timings["total"] = sum(timings.values())
    # rectified reconstructions equal their inputs, so the original x0 is
    # the comparable background reference across all passes
    final_metrics = _compute_metrics(job, world, current, job.x0, timings)
    return EditResult(
        y_final=current, recon_final=result.recon_final, metrics=final_metrics,
        timings=timings, config=job.config_echo(),
    )


@dataclass(frozen=True)
class AblationReport:
    """Metric rows swept along one knob with everything else fixed."""

    axis: str
    values: tuple
    rows: tuple

    def to_dict(self, with_timings: bool = True) -> dict:
        return {
            "axis": self.axis,
            "rows": [
                {"value": v, **r.to_dict(with_timings)}
                for v, r in zip(self.values, self.rows)
            ],
        }


ABLATION_AXES = ("tau", "tb", "inversion")


def run_ablation(job: EditJob, axis: str, values, world: ToyWorld, head: AttentionHead) -> AblationReport:
    """Sweep tau or tb over explicit values, or compare the two start
    latents; the seed stays fixed across the whole grid."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if axis == "inversion":
        rows = (
            run_edit(job, world, head).metrics,
            run_edit_random_start(job, world, head).metrics,
        )
        return AblationReport(axis=axis, values=("inversion", "random"), rows=rows)
    values = tuple(values)
    if not values:
        raise ValueError("ablation needs at least one value")
    rows = []
    for v in values:
        if axis == "tau":
            sub = replace(job, guide=replace(job.guide, tau=float(v)))
        else:
            sub = replace(job, boot=replace(job.boot, tb=int(v)))
        rows.append(run_edit(sub, world, head).metrics)
    return AblationReport(axis=axis, values=values, rows=tuple(rows))


def bench_timing(
    n_masks, repetitions: int, job_factory, world: ToyWorld, head: AttentionHead
) -> list:
    """Median single-pass vs iterative wall-clock per mask count.

    job_factory(n) must return an EditJob with n masks.  The speedup
    column is iterative over single-pass time.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    rows = []
    for n in n_masks:
        job = job_factory(int(n))
        if job.n != int(n):
            raise ValueError(f"job factory returned {job.n} masks for n={n}")
        singles, iters = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            run_edit(job, world, head)
            singles.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            run_iterative(job, world, head)
            iters.append(time.perf_counter() - t0)
        med_s = float(np.median(singles))
        med_i = float(np.median(iters))
        rows.append({
            "n_masks": int(n),
            "single_s": med_s,
            "iterative_s": med_i,
            "speedup": med_i / med_s,
        })
    return rows
