"""PNG helpers. Float images are channel-first (3, H, W) in [-1, 1]."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) or (H, W) float in [-1, 1] -> (H, W, 3) or (H, W) uint8."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        if arr.shape[0] != 3:
            raise ConfigError(f"expected 3 channels first, got shape {arr.shape}")
        arr = arr.transpose(1, 2, 0)
    elif arr.ndim != 2:
        raise ConfigError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    scaled = np.floor((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """(H, W, 3) or (H, W) uint8 -> (3, H, W) float32 in [-1, 1]."""
    arr = np.asarray(arr)
    out = arr.astype(np.float32) / 127.5 - 1.0
    if out.ndim == 2:
        out = np.stack([out] * 3)
    else:
        out = out[..., :3].transpose(2, 0, 1)
    return out


def save_image(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_heatmap(path: str | Path, grid: np.ndarray, upscale_to: Optional[int] = None) -> Path:
    """Min-max normalized grayscale PNG of a 2-D float map."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ConfigError(f"heatmap wants a 2-D grid, got shape {grid.shape}")
    lo, hi = grid.min(), grid.max()
    norm = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    img = Image.fromarray(np.floor(norm * 255.0 + 0.5).astype(np.uint8))
    if upscale_to and max(img.size) < upscale_to:
        factor = max(1, upscale_to // max(img.size))
        img = img.resize((img.width * factor, img.height * factor), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def contact_sheet(images: Sequence[np.ndarray], cols: Optional[int] = None) -> np.ndarray:
    """Tile equally-sized (3, H, W) images into one image, row-major."""
    if not images:
        raise ConfigError("contact sheet of zero images")
    shape = images[0].shape
    for im in images:
        if im.shape != shape:
            raise ConfigError(f"image shape mismatch: {im.shape} vs {shape}")
    n = len(images)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    _, h, w = shape
    sheet = np.full((3, rows * h, cols * w), -1.0, dtype=np.float32)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        sheet[:, r * h : (r + 1) * h, c * w : (c + 1) * w] = im
    return sheet
