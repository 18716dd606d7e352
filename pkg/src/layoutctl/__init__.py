"""Mask-free, training-free object layout control for latent diffusion.

Two synchronized denoising trajectories run side by side: the source run is
read (cross-attention masks, self-attention queries), the target run is
steered by injecting affine-relocated queries during the first ``t_star``
steps. The same thresholded cross-attention doubles as a text-driven
segmenter for existing images.
"""

from .errors import (
    BackendError,
    ConfigError,
    NoOpEditWarning,
    PipelineRunError,
    ScorerUnavailableError,
    TokenNotFoundError,
    TruncationWarning,
)
from .layout import AffineMap, apply_layouts, build_affine, edit_query, mask_centroid
from .masking import create_mask, normalized_token_map, resample_mask, union_masks
from .schedule import DiffusionSchedule, ddim_step
from .taps import TapPlan, full_capture_plan
from .types import (
    AttentionRecord,
    AttentionSite,
    LayoutParams,
    MaskGrid,
    PromptSpec,
    RunConfig,
    grid_shape_for_layer,
    scaled_params_for_grid,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "AttentionRecord",
    "AttentionSite",
    "BackendError",
    "ConfigError",
    "DiffusionSchedule",
    "LayoutParams",
    "MaskGrid",
    "NoOpEditWarning",
    "PipelineRunError",
    "PromptSpec",
    "RunConfig",
    "RunResult",
    "ScorerUnavailableError",
    "StubScorer",
    "TapPlan",
    "TokenNotFoundError",
    "TruncationWarning",
    "apply_layouts",
    "build_affine",
    "build_toy_backend",
    "clip_score",
    "create_backend",
    "create_mask",
    "ddim_step",
    "edit_query",
    "full_capture_plan",
    "grid_shape_for_layer",
    "initial_latent",
    "lpips_distance",
    "load_job",
    "mask_centroid",
    "normalized_token_map",
    "resample_mask",
    "resolve_job",
    "run_layout_edit",
    "scaled_params_for_grid",
    "segment_image",
    "union_masks",
    "__version__",
]


def __getattr__(name):
    # Late imports keep the base import light and dodge circular imports in
    # modules that pull in backends.
    if name in ("run_layout_edit", "RunResult", "initial_latent", "capture_source_records"):
        from . import pipeline

        return getattr(pipeline, name)
    if name in ("build_toy_backend", "create_backend"):
        from . import backends

        return getattr(backends, name)
    if name == "segment_image":
        from .segmentation import segment_image

        return segment_image
    if name in ("StubScorer", "clip_score", "lpips_distance", "create_scorer"):
        from . import evaluation

        return getattr(evaluation, name)
    if name in ("load_job", "resolve_job", "write_snapshot"):
        from . import jobs

        return getattr(jobs, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
