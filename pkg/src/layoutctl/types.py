"""Core value types shared by every module.

Conventions used throughout the package:

* grids are indexed ``(row, col)`` with row 0 at the top; ``dy`` moves objects
  down, ``dx`` moves them right; ``theta`` is degrees, counterclockwise as seen
  by a viewer of the image
* denoising steps are 0-based counting from the first (noisiest) step
* ``layer`` is the global attention-layer index in execution order; self- and
  cross-attention layers share one index space and a ``kind`` tells them apart
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PromptSpec:
    """A prompt with its tokenization and the token indices selected for control.

    ``object_tokens`` pairs a token index with a human-readable label; indices
    refer to positions in ``token_ids`` (special tokens included).
    """

    text: str
    token_ids: Tuple[int, ...]
    object_tokens: Tuple[Tuple[int, str], ...] = ()

    def __post_init__(self):
        m = len(self.token_ids)
        for idx, label in self.object_tokens:
            if not 0 <= idx < m:
                raise ConfigError(
                    f"object token index {idx} ({label!r}) out of range for a "
                    f"{m}-token prompt"
                )

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class LayoutParams:
    """Per-object control: translation, rotation, scale, drop flag and mask threshold.

    ``dx``/``dy`` are latent-grid cells at the finest controlled layer
    resolution (rescaled proportionally for coarser layers), ``theta`` is in
    degrees (counterclockwise positive), ``eta`` is the mask threshold in
    [0, 1]. ``drop`` erases the object instead of relocating it, and forces
    the transform fields to identity.
    """

    token_index: int
    dx: float = 0.0
    dy: float = 0.0
    theta: float = 0.0
    scale: float = 1.0
    drop: bool = False
    eta: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")
        if self.drop and (self.dx, self.dy, self.theta, self.scale) != (0.0, 0.0, 0.0, 1.0):
            raise ConfigError("drop=True requires dx=dy=theta=0 and scale=1")

    @property
    def is_identity_transform(self) -> bool:
        return (
            not self.drop
            and self.dx == 0.0
            and self.dy == 0.0
            and self.theta % 360.0 == 0.0
            and self.scale == 1.0
        )


@dataclass(frozen=True)
class RunConfig:
    """Sampler constants for one dual-trajectory run.

    ``t_star`` is the number of initial denoising steps with layout control
    active: steps ``0 .. t_star-1`` are controlled, later steps run plain.
    ``layer_window`` is an inclusive (lo, hi) range of global attention-layer
    indices; self-attention layers inside it receive query injection.
    """

    total_steps: int = 30
    t_star: int = 15
    guidance_scale: float = 7.5
    layer_window: Tuple[int, int] = (0, 15)
    seed: int = 0
    image_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.t_star <= self.total_steps:
            raise ConfigError(
                f"t_star must be in [0, total_steps={self.total_steps}], got {self.t_star}"
            )
        lo, hi = self.layer_window
        if lo < 0 or hi < lo:
            raise ConfigError(f"layer_window must satisfy 0 <= lo <= hi, got {self.layer_window}")

    def controlled_steps(self) -> range:
        """Steps (0-based, noisiest first) during which layout control is applied."""
        return range(self.t_star)


@dataclass(frozen=True)
class AttentionSite:
    """Address of one attention layer at one denoising step."""

    step: int
    layer: int
    kind: Literal["self", "cross"]

    def __post_init__(self):
        if self.step < 0:
            raise ConfigError(f"step must be >= 0, got {self.step}")
        if self.layer < 0:
            raise ConfigError(f"layer must be >= 0, got {self.layer}")
        if self.kind not in ("self", "cross"):
            raise ConfigError(f"kind must be 'self' or 'cross', got {self.kind!r}")


@dataclass(frozen=True, eq=False)
class MaskGrid:
    """Binary spatial mask for one token at one layer's resolution.

    ``source_layer`` is the layer whose grid geometry the mask matches.
    """

    token_index: int
    grid: np.ndarray
    source_layer: int

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ConfigError(f"mask grid must be 2-D, got shape {g.shape}")
        vals = np.unique(g)
        if not np.all(np.isin(vals, (0, 1))):
            raise ConfigError("mask grid entries must be exactly 0 or 1")
        object.__setattr__(self, "grid", g.astype(np.uint8))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def n_cells(self) -> int:
        return int(self.grid.size)

    def __eq__(self, other):
        if not isinstance(other, MaskGrid):
            return NotImplemented
        return (
            self.token_index == other.token_index
            and self.source_layer == other.source_layer
            and self.grid.shape == other.grid.shape
            and bool(np.all(self.grid == other.grid))
        )


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """One captured tensor: a post-softmax cross map or a raw self-attention query.

    Exactly one of ``cross_map`` (heads, n, m) / ``self_query`` (heads, n, d_head)
    is populated, matching ``site.kind``. Queries are captured after their
    injection point, so a record from an injected layer holds the tensor the
    model actually used.
    """

    site: AttentionSite
    cross_map: Optional[np.ndarray] = None
    self_query: Optional[np.ndarray] = None

    def __post_init__(self):
        has_cross = self.cross_map is not None
        has_self = self.self_query is not None
        if has_cross == has_self:
            raise ConfigError("exactly one of cross_map/self_query must be set")
        if has_cross and self.site.kind != "cross":
            raise ConfigError(f"cross_map record at a {self.site.kind!r} site")
        if has_self and self.site.kind != "self":
            raise ConfigError(f"self_query record at a {self.site.kind!r} site")
        tensor = self.cross_map if has_cross else self.self_query
        if np.asarray(tensor).ndim != 3:
            raise ConfigError("attention records hold 3-D tensors (heads, n, ...)")

    @property
    def tensor(self) -> np.ndarray:
        return self.cross_map if self.cross_map is not None else self.self_query


def grid_shape_for_layer(layer: int, backend_info) -> Tuple[int, int]:
    """Spatial (h, w) factorization of the feature sequence at ``layer``.

    ``backend_info`` is either a mapping ``layer -> (h, w)`` or any object with
    a ``layer_resolutions`` attribute holding one.
    """
    resolutions = getattr(backend_info, "layer_resolutions", backend_info)
    if not isinstance(resolutions, Mapping):
        raise ConfigError("backend_info must expose a layer -> (h, w) mapping")
    try:
        h, w = resolutions[layer]
    except KeyError:
        raise ConfigError(
            f"unknown layer {layer}; backend has layers {sorted(resolutions)}"
        ) from None
    return int(h), int(w)


def scaled_params_for_grid(
    params: LayoutParams,
    reference_shape: Tuple[int, int],
    target_shape: Tuple[int, int],
) -> LayoutParams:
    """Rescale dx/dy from the reference grid to a coarser/finer layer grid.

    Translation is expressed at the finest controlled resolution; at a layer of
    half the height, dy halves. theta/scale/eta/drop are resolution-free.
    """
    if reference_shape == target_shape or params.drop:
        return params
    rh, rw = reference_shape
    th, tw = target_shape
    return LayoutParams(
        token_index=params.token_index,
        dx=params.dx * (tw / rw),
        dy=params.dy * (th / rh),
        theta=params.theta,
        scale=params.scale,
        drop=params.drop,
        eta=params.eta,
    )
