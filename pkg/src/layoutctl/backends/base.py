"""Backend interfaces: the denoiser/text-encoder bundle and the latent codec.

A backend exposes a flat, execution-ordered index over its attention layers;
self- and cross-attention layers share the index space and ``layer_kinds``
tells them apart. Captures and injections act on the conditional
classifier-free-guidance branch (the prompt-bearing forward); the
unconditional branch uses the empty prompt and runs untouched.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Dict, List, Tuple

import numpy as np

from ..taps import TapPlan
from ..types import AttentionRecord, PromptSpec


class LatentCodec(ABC):
    """Maps between pixel images (c, H, W) and latents (C, h, w)."""

    @abstractmethod
    def encode(self, image: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def decode(self, latent: np.ndarray) -> np.ndarray: ...

    @property
    @abstractmethod
    def image_shape(self) -> Tuple[int, int, int]: ...


class DenoiserBackend(ABC):
    """A denoiser with taps. Deterministic: identical inputs and plans give
    bitwise-identical outputs."""

    heads: int
    head_dim: int

    @property
    @abstractmethod
    def layer_count(self) -> int: ...

    @property
    @abstractmethod
    def layer_kinds(self) -> Dict[int, str]: ...

    @property
    @abstractmethod
    def layer_resolutions(self) -> Dict[int, Tuple[int, int]]: ...

    @property
    @abstractmethod
    def latent_shape(self) -> Tuple[int, int, int]: ...

    @property
    @abstractmethod
    def codec(self) -> LatentCodec: ...

    @abstractmethod
    def tokenize(self, text: str) -> Tuple[Tuple[int, ...], Tuple[str, ...]]: ...

    @abstractmethod
    def denoise_step(
        self,
        z_t: np.ndarray,
        t: int,
        prompt: PromptSpec,
        guidance_scale: float,
        taps: TapPlan,
        step_index: int = 0,
    ) -> Tuple[np.ndarray, List[AttentionRecord]]:
        """Classifier-free-guided noise prediction with captures/injections.

        ``t`` is the train-scale timestep; ``step_index`` only labels the
        returned records' sites. At guidance scale 1 the unconditional branch
        is skipped and the conditional prediction is returned as-is.
        """

    def self_layers(self) -> List[int]:
        return [l for l, k in sorted(self.layer_kinds.items()) if k == "self"]

    def cross_layers(self) -> List[int]:
        return [l for l, k in sorted(self.layer_kinds.items()) if k == "cross"]

    def self_layers_in_window(self, window: Tuple[int, int]) -> List[int]:
        lo, hi = window
        return [l for l in self.self_layers() if lo <= l <= hi]
