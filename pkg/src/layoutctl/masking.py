"""Binary object masks from captured cross-attention maps.

A token's mask is built by thresholding its aggregated cross-attention column:
per captured layer the column is head-averaged and min-max normalized over the
spatial cells, the normalized maps are bilinearly resampled to the target
layer's grid and averaged, and the average is thresholded at ``eta``. The
normalization makes one ``eta`` band usable regardless of prompt length and
layer; aggregation is a plain mean over heads and layers.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .types import AttentionRecord, MaskGrid, grid_shape_for_layer


def _nearest_indices(src_size: int, dst_size: int) -> np.ndarray:
    """Center-aligned nearest-neighbor source index for each destination index."""
    centers = (np.arange(dst_size) + 0.5) * (src_size / dst_size)
    return np.minimum(centers.astype(np.int64), src_size - 1)


def resize_nearest(grid: np.ndarray, to: Tuple[int, int]) -> np.ndarray:
    th, tw = to
    rows = _nearest_indices(grid.shape[0], th)
    cols = _nearest_indices(grid.shape[1], tw)
    return grid[np.ix_(rows, cols)]


def resize_bilinear(grid: np.ndarray, to: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment, edges clamped."""
    th, tw = to
    sh, sw = grid.shape
    out = np.asarray(grid, dtype=np.float64)

    def axis_coords(src: int, dst: int):
        c = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        c = np.clip(c, 0.0, src - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = c - lo
        return lo, hi, frac

    r_lo, r_hi, r_f = axis_coords(sh, th)
    c_lo, c_hi, c_f = axis_coords(sw, tw)
    top = out[np.ix_(r_lo, c_lo)] * (1 - c_f) + out[np.ix_(r_lo, c_hi)] * c_f
    bot = out[np.ix_(r_hi, c_lo)] * (1 - c_f) + out[np.ix_(r_hi, c_hi)] * c_f
    return top * (1 - r_f[:, None]) + bot * r_f[:, None]


def normalized_token_map(record: AttentionRecord, token_index: int, shape: Tuple[int, int]) -> np.ndarray:
    """Head-averaged, min-max normalized spatial map of one token's attention column."""
    attn = record.cross_map
    heads, n, m = attn.shape
    if not 0 <= token_index < m:
        raise IndexError(f"token index {token_index} out of range for text length {m}")
    h, w = shape
    if h * w != n:
        raise ConfigError(f"layer shape {shape} does not factor feature length {n}")
    column = attn[:, :, token_index].mean(axis=0)
    lo, hi = column.min(), column.max()
    if hi > lo:
        column = (column - lo) / (hi - lo)
    else:
        column = np.zeros_like(column)
    return column.reshape(h, w)


def create_mask(
    records: Sequence[AttentionRecord],
    token_index: int,
    eta: float,
    target_layer: int,
    resolutions: Mapping[int, Tuple[int, int]],
) -> MaskGrid:
    """Threshold the aggregated cross-attention of one token into a binary mask.

    Args:
        records: cross-attention records captured at one denoising step.
        token_index: prompt token whose column is thresholded.
        eta: threshold in [0, 1]; cells with aggregated attention >= eta are 1.
        target_layer: layer whose (h, w) the output grid matches.
        resolutions: layer -> (h, w) map (a backend's ``layer_resolutions``).
    """
    if not records:
        raise ConfigError("create_mask needs at least one cross-attention record")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must be in [0, 1], got {eta}")
    cross = [r for r in records if r.site.kind == "cross"]
    if not cross:
        raise ConfigError("no cross-attention records among the captures")

    target_shape = grid_shape_for_layer(target_layer, resolutions)
    # canonical layer order so the result is independent of capture order
    cross = sorted(cross, key=lambda r: r.site.layer)
    acc = np.zeros(target_shape, dtype=np.float64)
    for record in cross:
        shape = grid_shape_for_layer(record.site.layer, resolutions)
        norm = normalized_token_map(record, token_index, shape)
        acc += resize_bilinear(norm, target_shape)
    acc /= len(cross)

    grid = (acc >= eta).astype(np.uint8)
    return MaskGrid(token_index=token_index, grid=grid, source_layer=target_layer)


def resample_mask(mask: MaskGrid, to: Tuple[int, int]) -> MaskGrid:
    """Nearest-neighbor resample of a binary mask to a new grid size."""
    th, tw = to
    if th < 1 or tw < 1:
        raise ConfigError(f"target dims must be >= 1, got {to}")
    if (th, tw) == mask.shape:
        return MaskGrid(mask.token_index, mask.grid.copy(), mask.source_layer)
    grid = resize_nearest(mask.grid, (th, tw))
    return MaskGrid(mask.token_index, grid, mask.source_layer)


def union_masks(masks: Sequence[MaskGrid]) -> MaskGrid:
    """Cellwise logical OR of equally-shaped masks."""
    if not masks:
        raise ConfigError("union of zero masks is undefined")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ConfigError(f"mask shape mismatch: {m.shape} vs {shape}")
    grid = np.zeros(shape, dtype=np.uint8)
    for m in masks:
        grid |= m.grid
    token = masks[0].token_index if len(masks) == 1 else -1
    return MaskGrid(token_index=token, grid=grid, source_layer=masks[0].source_layer)


def export_mask_png(
    mask: MaskGrid,
    path: str | Path,
    *,
    eta: float | None = None,
    step: int | None = None,
    source_layers: Iterable[int] | None = None,
) -> Path:
    """Write a mask as an 8-bit PNG (0/255) with a JSON sidecar."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.grid * np.uint8(255), mode="L").save(path)
    sidecar = {
        "token_index": mask.token_index,
        "eta": eta,
        "step": step,
        "source_layers": sorted(source_layers) if source_layers is not None else None,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return path
