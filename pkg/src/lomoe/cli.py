"""Command-line front end.

Every subcommand that works on a bench case loads the world from
``--world`` (default: ``world.txt`` beside the case file), binds the
case to an edit job with the shared flags, and writes latents plus a
json or csv report into ``--out``.  Reports never contain wall-clock
values except for ``bench``, whose whole output is wall-clock, so a
repeated invocation with the same flags and seed is byte-identical.

Exit codes: 0 success, 2 bad input (schema, format, or argument
errors), 3 numeric failure inside the engine.
"""

from __future__ import annotations

import argparse
import os
import sys

from .bench import (
    MetricsRecord,
    bg_psnr,
    bg_ssim,
    fidelity_scores,
    load_case,
    structural_proxy,
    write_report_csv,
    write_report_json,
)
from .compose import BootstrapConfig, build_mask_set
from .errors import FormatError, NumericError, SchemaError
from .formats import load_latent, load_world, save_latent
from .inversion import RegConfig, invert, l_kl
from .pipeline import (
    ABLATION_AXES,
    bench_timing,
    head_for_world,
    job_from_case,
    run_ablation,
    run_edit,
)
from .preserve import GuidanceConfig, reconstruct
from .schedule import DEFAULT_STEPS, DEFAULT_T, make_schedule
from . import toybench

_G = GuidanceConfig()
_R = RegConfig()
_B = BootstrapConfig()


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--t-total", type=int, default=DEFAULT_T, dest="t_total")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=_G.tau)
    p.add_argument("--tb", type=int, default=_B.tb)
    p.add_argument("--lambda-xa", type=float, default=_G.lambda_xa, dest="lambda_xa")
    p.add_argument("--lambda-b", type=float, default=_G.lambda_b, dest="lambda_b")
    p.add_argument("--lambda-reg", type=float, default=_R.lambda_reg, dest="lambda_reg")
    p.add_argument("--kg", type=int, default=_G.k_g)
    p.add_argument("--eta-g", type=float, default=_G.eta_g, dest="eta_g")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--world", default=None, help="world file (default: world.txt beside the case)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--report", choices=("json", "csv"), default="json")


def _world_for(args, case_path: str):
    path = args.world
    if path is None:
        path = os.path.join(os.path.dirname(os.path.abspath(case_path)), "world.txt")
        if not os.path.exists(path):
            raise ValueError(f"no --world given and {path} does not exist")
    return load_world(path)


def _job(args, case, world):
    return job_from_case(
        case,
        world,
        t_total=args.t_total,
        steps=args.steps,
        seed=args.seed,
        guidance=args.guidance,
        reg=RegConfig(lambda_reg=args.lambda_reg),
        guide=GuidanceConfig(
            lambda_xa=args.lambda_xa,
            lambda_b=args.lambda_b,
            k_g=args.kg,
            eta_g=args.eta_g,
            tau=args.tau,
        ),
        boot=BootstrapConfig(tb=args.tb),
    )


def _emit(args, stem: str, report: dict, rows: list) -> None:
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{stem}.{args.report}")
    if args.report == "json":
        write_report_json(report, path)
    else:
        write_report_csv(rows, path)
    print(path)


def _save(args, name: str, grid) -> str:
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    save_latent(grid, path)
    print(path)
    return name


def _cmd_invert(args) -> int:
    case = load_case(args.case)
    world = _world_for(args, args.case)
    job = _job(args, case, world)
    trace = invert(job.x0, job.c0, job.steps, job.reg, world,
                   make_schedule(job.t_total, job.kind))
    out = _save(args, f"{case.id}.xinv.lat", trace.x_inv)
    final_l_kl = l_kl(trace.eps_hats[-1], job.reg.epsilon_stab)
    report = {
        "case": case.id, "command": "invert", "config": job.config_echo(),
        "x_inv": out, "final_l_kl": final_l_kl,
    }
    _emit(args, f"{case.id}.invert", report, [{"case": case.id, "final_l_kl": final_l_kl}])
    return 0


def _cmd_recon(args) -> int:
    case = load_case(args.case)
    world = _world_for(args, args.case)
    job = _job(args, case, world)
    sched = make_schedule(job.t_total, job.kind)
    trace = invert(job.x0, job.c0, job.steps, job.reg, world, sched)
    cache = reconstruct(trace, world, sched, head_for_world(world, job.t_total),
                        tau=args.tau)
    out = _save(args, f"{case.id}.recon.lat", cache.final)
    gap = max(
        float(abs(cache.x_prime(t) - trace.latent_at(t)).max())
        for t in (0,) + cache.step_map.timesteps
    )
    report = {
        "case": case.id, "command": "recon", "config": job.config_echo(),
        "recon": out, "path_max_abs_gap": gap,
    }
    _emit(args, f"{case.id}.recon", report, [{"case": case.id, "path_max_abs_gap": gap}])
    return 0


def _cmd_edit(args) -> int:
    case = load_case(args.case)
    world = _world_for(args, args.case)
    job = _job(args, case, world)
    result = run_edit(job, world, head_for_world(world, job.t_total))
    edit_out = _save(args, f"{case.id}.edit.lat", result.y_final)
    recon_out = _save(args, f"{case.id}.recon.lat", result.recon_final)
    metrics = result.metrics.to_dict(with_timings=False)
    report = {
        "case": case.id, "command": "edit", "config": result.config,
        "edit": edit_out, "recon": recon_out, "metrics": metrics,
    }
    _emit(args, f"{case.id}.edit", report, [{"case": case.id, **metrics}])
    return 0


def _cmd_metrics(args) -> int:
    case = load_case(args.case)
    world = _world_for(args, args.case)
    edited = load_latent(args.edited)
    against = load_latent(args.against) if args.against else case.load_image()
    ms = build_mask_set(tuple(case.load_masks()), shape=edited.shape[:2])
    if ms.m0.sum() > 0:
        psnr, ssim = bg_psnr(edited, against, ms.m0), bg_ssim(edited, against, ms.m0)
    else:
        psnr, ssim = None, None
    if ms.n:
        src, tgt = fidelity_scores(
            edited, ms,
            tuple(case.token_for(s) for s in case.smp),
            tuple(case.token_for(t) for t in case.tmp),
            world,
        )
    else:
        src, tgt = None, None
    record = MetricsRecord(
        bg_psnr=psnr, bg_ssim=ssim, source_fidelity=src, target_fidelity=tgt,
        structural_proxy=structural_proxy(edited, against),
    )
    metrics = record.to_dict(with_timings=False)
    report = {"case": case.id, "command": "metrics", "metrics": metrics}
    _emit(args, f"{case.id}.metrics", report, [{"case": case.id, **metrics}])
    return 0


def _cmd_ablate(args) -> int:
    case = load_case(args.case)
    world = _world_for(args, args.case)
    job = _job(args, case, world)
    if args.axis == "inversion":
        if args.values:
            raise ValueError("--values is not used with --axis inversion")
        values = ()
    elif not args.values:
        raise ValueError(f"--axis {args.axis} needs --values")
    else:
        values = tuple(
            int(v) if args.axis == "tb" else float(v) for v in args.values
        )
    report = run_ablation(job, args.axis, values, world,
                          head_for_world(world, job.t_total))
    obj = report.to_dict(with_timings=False)
    obj.update({"case": case.id, "command": "ablate", "config": job.config_echo()})
    _emit(args, f"{case.id}.ablate-{args.axis}", obj, obj["rows"])
    return 0


def _parse_mask_counts(text: str) -> list:
    try:
        counts = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad mask counts {text!r}") from None
    if not counts:
        raise argparse.ArgumentTypeError("at least one mask count required")
    return counts


def _cmd_bench(args) -> int:
    if args.world is not None:
        raise ValueError("bench runs on the built-in toy world; --world is not supported")
    world = toybench.build_world()
    factory = toybench.timing_job_factory(
        world,
        t_total=args.t_total, steps=args.steps, seed=args.seed, guidance=args.guidance,
        reg=RegConfig(lambda_reg=args.lambda_reg),
        guide=GuidanceConfig(lambda_xa=args.lambda_xa, lambda_b=args.lambda_b,
                             k_g=args.kg, eta_g=args.eta_g, tau=args.tau),
        boot=BootstrapConfig(tb=args.tb),
    )
    rows = bench_timing(args.masks, args.reps, factory, world,
                        head_for_world(world, args.t_total))
    _emit(args, "bench", {"command": "bench", "rows": rows}, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lomoe",
        description="Localized multi-object latent editing on analytic toy worlds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (
        ("invert", _cmd_invert, "regularized inversion of a case image"),
        ("recon", _cmd_recon, "inversion plus rectified reconstruction"),
        ("edit", _cmd_edit, "full multi-mask edit with metrics"),
        ("ablate", _cmd_ablate, "sweep tau or tb, or compare start latents"),
        ("metrics", _cmd_metrics, "score an edited latent against a case"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("case", help="bench case json file")
        if name == "ablate":
            p.add_argument("--axis", choices=ABLATION_AXES, required=True)
            p.add_argument("--values", nargs="*", default=[])
        if name == "metrics":
            p.add_argument("--edited", required=True, help="latent to score")
            p.add_argument("--against", default=None,
                           help="reference latent (default: the case image)")
        _add_shared(p)
        p.set_defaults(func=fn)

    p = sub.add_parser(name="bench", help="single-pass vs iterative timing table")
    p.add_argument("--masks", type=_parse_mask_counts, default=[1, 3, 5, 7],
                   help="comma-separated mask counts, e.g. 1,3,5,7")
    p.add_argument("--reps", type=int, default=5)
    _add_shared(p)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (SchemaError, FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
