"""Affine relocation of masked self-attention queries.

An object is the set of grid cells where its mask is 1. Its query vectors are
transported to new cells under an affine map (translate / rotate / scale about
the mask centroid) and written over the background; cells the object vacates
are filled from the nearest background query so the background continues
behind it (zero fill available as an option). Transport uses inverse mapping:
every grid cell pulls from the cell its coordinates come from under the
inverse affine, so upscaled objects have no holes.

Cell rounding is nearest-neighbor with exact halves rounding toward the higher
index. Rotation angles that are multiples of 90 degrees use exact {-1, 0, 1}
matrix entries, so together with power-of-two scales the transport is exact in
float64 and free of half-boundary jitter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NoOpEditWarning
from .types import LayoutParams, MaskGrid

FillPolicy = Literal["nearest_background", "zero"]


@dataclass(frozen=True)
class AffineMap:
    """2x3 affine map over (row, col) grid coordinates: p' = linear @ p + offset."""

    linear: np.ndarray  # (2, 2)
    offset: np.ndarray  # (2,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.offset

    def inverse(self) -> "AffineMap":
        a, b = self.linear[0]
        c, d = self.linear[1]
        det = a * d - b * c
        if det == 0:
            raise ConfigError("affine map is singular")
        inv = np.array([[d, -b], [-c, a]], dtype=np.float64) / det
        return AffineMap(linear=inv, offset=-(inv @ self.offset))

    @property
    def matrix(self) -> np.ndarray:
        return np.concatenate([self.linear, self.offset[:, None]], axis=1)


def _rotation_rowcol(theta_deg: float) -> np.ndarray:
    """Rotation matrix in (row, col) coordinates, counterclockwise for a viewer.

    Multiples of 90 degrees snap to exact integer entries.
    """
    t = theta_deg % 360.0
    if t % 90.0 == 0.0:
        cos, sin = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}[t]
    else:
        rad = np.deg2rad(t)
        cos, sin = np.cos(rad), np.sin(rad)
    # rows grow downward, so viewer-CCW is (row' = cos*r - sin*c, col' = sin*r + cos*c)
    return np.array([[cos, -sin], [sin, cos]], dtype=np.float64)


def build_affine(params: LayoutParams, centroid: Tuple[float, float]) -> AffineMap:
    """translate(dx, dy) after rotate(theta) after scale(scale), both about ``centroid``."""
    linear = params.scale * _rotation_rowcol(params.theta)
    c = np.asarray(centroid, dtype=np.float64)
    t = np.array([params.dy, params.dx], dtype=np.float64)
    offset = c + t - linear @ c
    return AffineMap(linear=linear, offset=offset)


def mask_centroid(mask: MaskGrid) -> Tuple[float, float]:
    rows, cols = np.nonzero(mask.grid)
    if rows.size == 0:
        raise ConfigError("centroid of an empty mask is undefined")
    return float(rows.mean()), float(cols.mean())


def nearest_cell(points: np.ndarray) -> np.ndarray:
    """Round fractional (row, col) coordinates; halves go toward the higher index."""
    return np.floor(np.asarray(points, dtype=np.float64) + 0.5).astype(np.int64)


def _transport_indices(mask: np.ndarray, params: LayoutParams) -> Tuple[np.ndarray, np.ndarray]:
    """Flat (destination, source) index pairs for one object's transport.

    Every grid cell pulls from ``inverse(affine)`` of its own coordinates; it
    becomes a destination iff the pulled cell is in-bounds and on the mask.
    """
    h, w = mask.shape
    centroid_mask = MaskGrid(token_index=-1, grid=mask, source_layer=-1)
    inv = build_affine(params, mask_centroid(centroid_mask)).inverse()

    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dest_coords = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    src = nearest_cell(inv.apply(dest_coords))
    in_bounds = (src[:, 0] >= 0) & (src[:, 0] < h) & (src[:, 1] >= 0) & (src[:, 1] < w)
    src_clipped = np.clip(src, 0, [h - 1, w - 1])
    on_object = mask[src_clipped[:, 0], src_clipped[:, 1]].astype(bool) & in_bounds

    dest_flat = np.flatnonzero(on_object)
    src_flat = src[dest_flat, 0] * w + src[dest_flat, 1]
    return dest_flat, src_flat


def _nearest_background_sources(
    fill_flat: np.ndarray, background_flat: np.ndarray, shape: Tuple[int, int]
) -> np.ndarray:
    """For each fill cell, the flat index of the nearest background cell.

    Manhattan distance; ties break to the first background cell in row-major
    order (argmin returns the first minimum over the row-major candidates).
    """
    h, w = shape
    fr, fc = np.divmod(fill_flat, w)
    br, bc = np.divmod(background_flat, w)
    dist = np.abs(fr[:, None] - br[None, :]).astype(np.int32) + np.abs(
        fc[:, None] - bc[None, :]
    ).astype(np.int32)
    return background_flat[np.argmin(dist, axis=1)]


def apply_layouts(
    q_s: np.ndarray,
    edits: Sequence[Tuple[MaskGrid, LayoutParams]],
    fill: FillPolicy = "nearest_background",
) -> np.ndarray:
    """Compose per-object transports of ``q_s`` into one edited query tensor.

    Object vectors always come from the original ``q_s``; when moved objects
    collide, the later-listed edit wins. Cells covered by no object keep their
    source query, and object cells left uncovered are filled per ``fill``.
    Dropped objects contribute no destinations, so their cells are filled.

    Args:
        q_s: source self-attention queries, shape (heads, n, d).
        edits: (mask, params) per object; masks share one (h, w) with h*w = n.
        fill: "nearest_background" copies the query of the closest off-object
            cell (Manhattan distance, row-major ties); "zero" writes zeros.
    """
    if q_s.ndim != 3:
        raise ConfigError(f"queries must have shape (heads, n, d), got {q_s.shape}")
    if fill not in ("nearest_background", "zero"):
        raise ConfigError(f"unknown fill policy {fill!r}")
    q_ms = q_s.copy()
    if not edits:
        return q_ms

    shape = edits[0][0].shape
    h, w = shape
    if h * w != q_s.shape[1]:
        raise ConfigError(f"mask shape {shape} does not factor query length {q_s.shape[1]}")
    for mask, _ in edits:
        if mask.shape != shape:
            raise ConfigError(f"mask shape mismatch: {mask.shape} vs {shape}")

    object_cells = np.zeros(h * w, dtype=bool)
    live = []
    for mask, params in edits:
        flat = mask.grid.ravel().astype(bool)
        if not flat.any():
            warnings.warn(
                f"layout edit for token {params.token_index} has an empty mask; no-op",
                NoOpEditWarning,
                stacklevel=2,
            )
            continue
        object_cells |= flat
        if not params.drop:
            live.append((mask.grid, params))

    if not object_cells.any():
        return q_ms

    transports = [_transport_indices(grid, params) for grid, params in live]

    covered = np.zeros(h * w, dtype=bool)
    for dest_flat, _ in transports:
        covered[dest_flat] = True
    vacated = np.flatnonzero(object_cells & ~covered)

    if vacated.size:
        if fill == "zero":
            q_ms[:, vacated, :] = 0.0
        else:
            background = np.flatnonzero(~object_cells)
            if background.size == 0:
                q_ms[:, vacated, :] = 0.0  # degenerate all-object mask
            else:
                src = _nearest_background_sources(vacated, background, shape)
                q_ms[:, vacated, :] = q_s[:, src, :]

    for dest_flat, src_flat in transports:
        q_ms[:, dest_flat, :] = q_s[:, src_flat, :]
    return q_ms


def edit_query(
    q_s: np.ndarray,
    mask: MaskGrid,
    params: LayoutParams,
    fill: FillPolicy = "nearest_background",
) -> np.ndarray:
    """Relocate (or drop) one masked object inside a self-attention query tensor.

    Identity parameters reproduce ``q_s`` exactly; see ``apply_layouts`` for
    the composition and fill rules.
    """
    return apply_layouts(q_s, [(mask, params)], fill=fill)
