"""Dual-trajectory sampling with layout-controlled query injection.

Two DDIM trajectories share one initial latent: the source run denoises the
source prompt untouched while its cross-attention maps and self-attention
queries are captured; the target run denoises the target prompt and, during
the first ``t_star`` steps, has its self-attention queries inside the layer
window replaced by affine-relocated copies of the source queries. Masks that
gate the relocation are rebuilt every controlled step from the source run's
current cross-attention, so no user-drawn mask is ever needed.

The source trajectory is never modified by the edit ("source purity"); with
identity edit parameters the injected queries equal the captured ones bitwise
and both output images coincide exactly.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backends.base import DenoiserBackend
from .errors import ConfigError, PipelineRunError
from .layout import FillPolicy, apply_layouts
from .masking import create_mask
from .schedule import DiffusionSchedule, ddim_step
from .taps import EMPTY_PLAN, TapPlan, dump_records
from .types import (
    AttentionRecord,
    LayoutParams,
    MaskGrid,
    PromptSpec,
    RunConfig,
    scaled_params_for_grid,
)


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


@dataclass
class StepTrace:
    """What happened at one denoising step."""

    step: int
    timestep: int
    controlled: bool
    injected_layers: Tuple[int, ...]
    z_source_checksum: str
    z_target_checksum: str
    duration_s: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "step": self.step,
            "timestep": self.timestep,
            "controlled": self.controlled,
            "injected_layers": list(self.injected_layers),
            "z_source_checksum": self.z_source_checksum,
            "z_target_checksum": self.z_target_checksum,
            "duration_s": self.duration_s,
        }


@dataclass
class RunTrace:
    """Per-step log of a dual run, JSON-serializable via ``to_dict``."""

    steps: List[StepTrace] = field(default_factory=list)
    masks: Dict[int, Dict[int, MaskGrid]] = field(default_factory=dict)
    mask_source_layers: Tuple[int, ...] = ()
    reference_shape: Optional[Tuple[int, int]] = None

    def edited_steps(self) -> List[int]:
        return [s.step for s in self.steps if s.injected_layers]

    def to_dict(self) -> Dict[str, object]:
        return {
            "mask_source_layers": list(self.mask_source_layers),
            "reference_shape": list(self.reference_shape) if self.reference_shape else None,
            "steps": [s.to_dict() for s in self.steps],
        }


@dataclass
class RunResult:
    z_source: np.ndarray
    z_target: np.ndarray
    image_source: np.ndarray
    image_target: np.ndarray
    trace: RunTrace


def initial_latent(backend: DenoiserBackend, seed: int) -> np.ndarray:
    """The shared starting noise for both trajectories."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(backend.latent_shape, dtype=np.float32)


def _validate(
    backend: DenoiserBackend,
    prompt_source: PromptSpec,
    edits: Sequence[LayoutParams],
    config: RunConfig,
) -> Tuple[List[int], List[int]]:
    lo, hi = config.layer_window
    if not 0 <= lo <= hi < backend.layer_count:
        raise ConfigError(
            f"layer_window {config.layer_window} out of range for a backend "
            f"with {backend.layer_count} layers"
        )
    m = len(prompt_source.token_ids)
    for e in edits:
        if not 0 <= e.token_index < m:
            raise ConfigError(
                f"edit token index {e.token_index} out of range for a "
                f"{m}-token source prompt"
            )
    window_self = backend.self_layers_in_window(config.layer_window)
    cross = backend.cross_layers()
    return window_self, cross


def run_layout_edit(
    backend: DenoiserBackend,
    prompt_source: PromptSpec,
    prompt_target: PromptSpec,
    edits: Sequence[LayoutParams],
    config: RunConfig,
    *,
    fill: FillPolicy = "nearest_background",
    mask_source_layers: Optional[Sequence[int]] = None,
    dump_dir: Optional[str | Path] = None,
    keep_masks: bool = True,
) -> RunResult:
    """Run the dual source/target trajectories and decode both images.

    ``mask_source_layers`` restricts which cross-attention layers feed the
    masks (default: all of them). ``dump_dir`` additionally writes every
    captured tensor to disk. Raises PipelineRunError with the partial trace
    attached if a step fails.
    """
    window_self, all_cross = _validate(backend, prompt_source, edits, config)
    if mask_source_layers is None:
        mask_layers = all_cross
    else:
        mask_layers = sorted(set(int(l) for l in mask_source_layers))
        bad = [l for l in mask_layers if backend.layer_kinds.get(l) != "cross"]
        if bad:
            raise ConfigError(f"mask source layers must be cross layers, got {bad}")

    schedule = DiffusionSchedule.create(config.total_steps)
    resolutions = backend.layer_resolutions
    # dx/dy are expressed at the finest injected layer's grid.
    reference_shape = (
        max((resolutions[l] for l in window_self), key=lambda r: r[0] * r[1])
        if window_self
        else None
    )

    capture_plan = TapPlan(
        capture_cross=frozenset(mask_layers),
        capture_self_q=frozenset(window_self),
    )

    z0 = initial_latent(backend, config.seed)
    z_s = z0.copy()
    z_t = z0.copy()

    trace = RunTrace(
        mask_source_layers=tuple(mask_layers),
        reference_shape=reference_shape,
    )
    active = bool(edits) and bool(window_self)

    for step in range(config.total_steps):
        began = time.perf_counter()
        t = schedule.timestep(step)
        controlled = active and step in config.controlled_steps()
        try:
            plan_s = capture_plan if controlled else EMPTY_PLAN
            eps_s, records = backend.denoise_step(
                z_s, t, prompt_source, config.guidance_scale, plan_s, step_index=step
            )

            inject_plan = EMPTY_PLAN
            if controlled:
                inject_plan = _build_injections(
                    records,
                    edits,
                    window_self,
                    resolutions,
                    reference_shape,
                    fill,
                    trace,
                    step,
                    keep_masks,
                )
            eps_t, _ = backend.denoise_step(
                z_t, t, prompt_target, config.guidance_scale, inject_plan, step_index=step
            )

            if dump_dir is not None:
                dump_records(records, dump_dir)

            z_s = ddim_step(z_s, eps_s, step, schedule)
            z_t = ddim_step(z_t, eps_t, step, schedule)
        except ConfigError:
            raise
        except Exception as exc:
            err = PipelineRunError(f"step {step} failed: {exc}")
            err.partial_trace = trace
            raise err from exc

        trace.steps.append(
            StepTrace(
                step=step,
                timestep=t,
                controlled=controlled,
                injected_layers=tuple(inject_plan.inject_q) if controlled else (),
                z_source_checksum=_checksum(z_s),
                z_target_checksum=_checksum(z_t),
                duration_s=time.perf_counter() - began,
            )
        )

    return RunResult(
        z_source=z_s,
        z_target=z_t,
        image_source=backend.codec.decode(z_s),
        image_target=backend.codec.decode(z_t),
        trace=trace,
    )


def capture_source_records(
    backend: DenoiserBackend,
    prompt: PromptSpec,
    config: RunConfig,
    step: int,
    plan: TapPlan,
) -> List[AttentionRecord]:
    """Denoise the source trajectory up to ``step`` and capture there.

    Used by inspection tooling; the trajectory is the same one
    ``run_layout_edit`` would produce for this config.
    """
    if not 0 <= step < config.total_steps:
        raise ConfigError(
            f"step {step} out of range for a {config.total_steps}-step run"
        )
    schedule = DiffusionSchedule.create(config.total_steps)
    z = initial_latent(backend, config.seed)
    for s in range(step + 1):
        active = plan if s == step else EMPTY_PLAN
        eps, records = backend.denoise_step(
            z, schedule.timestep(s), prompt, config.guidance_scale, active, step_index=s
        )
        if s == step:
            return records
        z = ddim_step(z, eps, s, schedule)
    raise AssertionError("unreachable")


def _build_injections(
    records: Sequence[AttentionRecord],
    edits: Sequence[LayoutParams],
    window_self: Sequence[int],
    resolutions: Dict[int, Tuple[int, int]],
    reference_shape: Tuple[int, int],
    fill: FillPolicy,
    trace: RunTrace,
    step: int,
    keep_masks: bool,
) -> TapPlan:
    cross_records = [r for r in records if r.site.kind == "cross"]
    by_layer = {r.site.layer: r for r in records if r.site.kind == "self"}

    inject: Dict[int, np.ndarray] = {}
    for layer in window_self:
        record = by_layer.get(layer)
        if record is None:  # backend failed to produce a planned capture
            raise PipelineRunError(f"no self-query captured at layer {layer}")
        shape = resolutions[layer]
        layer_edits = []
        for e in edits:
            mask = create_mask(cross_records, e.token_index, e.eta, layer, resolutions)
            layer_edits.append((mask, scaled_params_for_grid(e, reference_shape, shape)))
            if keep_masks and shape == reference_shape:
                trace.masks.setdefault(step, {})[e.token_index] = mask
        inject[layer] = apply_layouts(record.self_query, layer_edits, fill=fill)
    return TapPlan(inject_q=inject)
