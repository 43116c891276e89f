"""Localized multi-object image editing on latent grids.

The engine runs deterministic invert/denoise walks around a pluggable
noise predictor.  The bundled predictor is exact: prompts index an
analytic Gaussian-mixture world whose Bayes-optimal prediction has a
closed form, so edits, inversions, and every preservation loss can be
validated against oracles instead of a trained network.
"""

from .errors import FormatError, NumericError, SchemaError
from .grids import (
    SeededRng,
    as_grid,
    as_mask,
    avg_pool2,
    avg_pool_pyramid,
    masked_l2,
    max_pool2,
    max_pool_pyramid,
    mean_var,
    softmax_tau,
)
from .schedule import (
    DEFAULT_STEPS,
    DEFAULT_T,
    NoiseSchedule,
    StepIndexMap,
    ddim_denoise_step,
    ddim_invert_step,
    ddim_step,
    ddpm_forward,
    make_schedule,
    make_step_map,
)
from .denoiser import (
    AttentionHead,
    AttentionMap,
    Component,
    PromptSpec,
    ToyWorld,
    attention_input_map,
    attention_logits,
    attention_maps,
    guided_noise,
    make_attention_head,
    make_prompt,
    make_world,
    null_prompt,
    predict_noise,
    sample,
    time_embedding,
)
from .inversion import (
    InversionTrace,
    RegConfig,
    invert,
    l_kl,
    l_kl_grad,
    l_pair,
    l_pair_grad,
    regularize_noise,
)
from .compose import (
    BootstrapConfig,
    MaskSet,
    bootstrap_latent,
    build_mask_set,
    l_md,
    make_background_bt,
    psi_step,
)
from .preserve import (
    GuidanceConfig,
    ReconCache,
    guided_update,
    l_b,
    l_xa,
    reconstruct,
)
from .formats import (
    load_image_ppm,
    load_latent,
    load_mask_pgm,
    load_world,
    save_image_ppm,
    save_latent,
    save_mask_pgm,
    save_world,
)
from .bench import (
    BenchCase,
    MetricsRecord,
    bg_psnr,
    bg_ssim,
    canonical_json,
    fidelity_scores,
    load_case,
    save_case,
    structural_proxy,
    write_report_csv,
    write_report_json,
)
from .pipeline import (
    AblationReport,
    EditJob,
    EditResult,
    bench_timing,
    head_for_world,
    job_from_case,
    run_ablation,
    run_edit,
    run_edit_random_start,
    run_iterative,
)

__version__ = "0.1.0"

__all__ = [
    "AblationReport", "AttentionHead", "AttentionMap", "BenchCase",
    "BootstrapConfig", "Component", "DEFAULT_STEPS", "DEFAULT_T", "EditJob",
    "EditResult", "FormatError", "GuidanceConfig", "InversionTrace",
    "MaskSet", "MetricsRecord", "NoiseSchedule", "NumericError", "PromptSpec",
    "ReconCache", "RegConfig", "SchemaError", "SeededRng", "StepIndexMap",
    "ToyWorld", "as_grid", "as_mask", "attention_input_map",
    "attention_logits", "attention_maps", "avg_pool2", "avg_pool_pyramid",
    "bench_timing", "bg_psnr",
    "bg_ssim", "bootstrap_latent", "build_mask_set", "canonical_json",
    "ddim_denoise_step", "ddim_invert_step", "ddim_step", "ddpm_forward",
    "fidelity_scores", "guided_noise", "guided_update", "head_for_world",
    "invert", "job_from_case", "l_b", "l_kl", "l_kl_grad", "l_md", "l_pair",
    "l_pair_grad", "l_xa", "load_case", "load_image_ppm", "load_latent",
    "load_mask_pgm", "load_world", "make_attention_head",
    "make_background_bt", "make_prompt", "make_schedule", "make_step_map",
    "make_world", "masked_l2", "max_pool2", "max_pool_pyramid", "mean_var",
    "null_prompt", "predict_noise", "psi_step", "reconstruct",
    "regularize_noise", "run_ablation", "run_edit", "run_edit_random_start",
    "run_iterative", "sample", "save_case", "save_image_ppm", "save_latent",
    "save_mask_pgm", "save_world", "softmax_tau", "structural_proxy",
    "time_embedding", "write_report_csv", "write_report_json",
]
