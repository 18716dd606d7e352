"""Text-driven segmentation from denoiser attention, no training and no mask input.

An image is encoded to a latent and pushed through a single conditional
denoise at a mid-range timestep. No noise is added to the latent: the
attention of the clean encoding is already token-selective, so one forward
pass yields a binary mask per queried token plus query-magnitude heatmaps
that separate object from background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backends.base import DenoiserBackend
from .errors import ConfigError
from .masking import create_mask, resample_mask
from .schedule import TRAIN_TIMESTEPS
from .taps import TapPlan
from .types import MaskGrid, PromptSpec

DEFAULT_TIMESTEP = TRAIN_TIMESTEPS // 2


@dataclass
class SegmentationResult:
    """Masks and diagnostics from one segmentation pass."""

    prompt: PromptSpec
    masks: Dict[int, MaskGrid]  # token index -> latent-resolution mask
    image_masks: Dict[int, np.ndarray]  # token index -> (H, W) uint8 at image size
    query_magnitude: np.ndarray  # (h, w) L2 norm of self-queries, finest layer
    token_stats: Dict[int, Dict[str, float]]
    timestep: int
    added_noise: float = 0.0
    eta: float = 0.2
    meta: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        def finite(x: float) -> Optional[float]:
            return float(x) if np.isfinite(x) else None

        return {
            "prompt": self.prompt.text,
            "tokens": {
                str(i): {
                    "coverage": finite(self.token_stats[i]["coverage"]),
                    "query_norm_object": finite(self.token_stats[i]["query_norm_object"]),
                    "query_norm_background": finite(self.token_stats[i]["query_norm_background"]),
                }
                for i in sorted(self.masks)
            },
            "timestep": self.timestep,
            "added_noise": self.added_noise,
            "eta": self.eta,
            **self.meta,
        }


def resolve_token_queries(
    backend: DenoiserBackend, prompt_text: str, queries: Sequence[str | int]
) -> Tuple[PromptSpec, List[int]]:
    """Token queries may be indices or words; words resolve to their first
    occurrence in the tokenized prompt."""
    ids, strings = backend.tokenize(prompt_text)
    indices: List[int] = []
    labels: List[Tuple[int, str]] = []
    for q in queries:
        if isinstance(q, int) or (isinstance(q, str) and q.lstrip("-").isdigit()):
            idx = int(q)
            if not 0 <= idx < len(ids):
                raise ConfigError(
                    f"token index {idx} out of range for a {len(ids)}-token prompt"
                )
        else:
            from .backends.toy import find_token_index

            idx = find_token_index(strings, q)
        indices.append(idx)
        labels.append((idx, strings[idx]))
    prompt = PromptSpec(text=prompt_text, token_ids=ids, object_tokens=tuple(labels))
    return prompt, indices


def segment_image(
    backend: DenoiserBackend,
    image: np.ndarray,
    prompt_text: str,
    token_queries: Sequence[str | int],
    *,
    eta: float = 0.2,
    timestep: int = DEFAULT_TIMESTEP,
    mask_source_layers: Optional[Sequence[int]] = None,
) -> SegmentationResult:
    """Segment ``image`` by the prompt tokens in ``token_queries``.

    The latent is the codec encoding of the image as-is (``added_noise`` is
    recorded as 0.0 and the pass is fully deterministic). Masks come from the
    same thresholded cross-attention aggregation the layout pipeline uses, at
    the finest cross layer's resolution, then nearest-upsampled to image size.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must be in [0, 1], got {eta}")
    if not 0 <= timestep < TRAIN_TIMESTEPS:
        raise ConfigError(f"timestep must be in [0, {TRAIN_TIMESTEPS}), got {timestep}")

    prompt, indices = resolve_token_queries(backend, prompt_text, token_queries)
    z = backend.codec.encode(np.asarray(image, dtype=np.float32))

    kinds = backend.layer_kinds
    resolutions = backend.layer_resolutions
    if mask_source_layers is None:
        cross_layers = backend.cross_layers()
    else:
        cross_layers = sorted(set(int(l) for l in mask_source_layers))
        bad = [l for l in cross_layers if kinds.get(l) != "cross"]
        if bad:
            raise ConfigError(f"mask source layers must be cross layers, got {bad}")
    self_layers = backend.self_layers()
    finest_self = max(self_layers, key=lambda l: resolutions[l][0] * resolutions[l][1])
    finest_cross = max(cross_layers, key=lambda l: resolutions[l][0] * resolutions[l][1])

    plan = TapPlan(
        capture_cross=frozenset(cross_layers),
        capture_self_q=frozenset({finest_self}),
    )
    # Single conditional pass: guidance 1 skips the unconditional branch.
    _, records = backend.denoise_step(z, timestep, prompt, 1.0, plan, step_index=0)

    cross_records = [r for r in records if r.site.kind == "cross"]
    q_record = next(r for r in records if r.site.kind == "self")
    h, w = resolutions[finest_self]
    q_norm = np.linalg.norm(q_record.self_query, axis=(0, 2)).reshape(h, w)

    image_hw = backend.codec.image_shape[1:]
    masks: Dict[int, MaskGrid] = {}
    image_masks: Dict[int, np.ndarray] = {}
    stats: Dict[int, Dict[str, float]] = {}
    for idx in indices:
        mask = create_mask(cross_records, idx, eta, finest_cross, resolutions)
        masks[idx] = mask
        image_masks[idx] = resample_mask(mask, image_hw).grid

        at_q = resample_mask(mask, (h, w)).grid.astype(bool)
        obj = float(q_norm[at_q].mean()) if at_q.any() else float("nan")
        bg = float(q_norm[~at_q].mean()) if (~at_q).any() else float("nan")
        stats[idx] = {
            "coverage": float(mask.grid.mean()),
            "query_norm_object": obj,
            "query_norm_background": bg,
        }

    return SegmentationResult(
        prompt=prompt,
        masks=masks,
        image_masks=image_masks,
        query_magnitude=q_norm,
        token_stats=stats,
        timestep=timestep,
        added_noise=0.0,
        eta=eta,
        meta={"mask_source_layers": list(cross_layers), "query_layer": finest_self},
    )
