"""Image/text alignment and perceptual-distance scoring.

The harness only assumes a narrow scorer interface so tests and CI can run on
a deterministic stub while real CLIP/LPIPS models plug in behind the same
methods. Real scorers are constructed lazily; a missing dependency raises
ScorerUnavailableError instead of silently returning zeros.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ScorerUnavailableError
from .masking import resize_bilinear

_WORD_RE = re.compile(r"[a-z0-9']+")
_FEATURE_SCALES = ((8, 8), (4, 4), (2, 2), (1, 1))
_FEATURE_DIM = sum(h * w for h, w in _FEATURE_SCALES)


class Scorer(ABC):
    """Embeds images and text into one space and measures perceptual distance."""

    name: str = "scorer"

    @abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...

    @abstractmethod
    def perceptual_distance(self, a: np.ndarray, b: np.ndarray) -> float: ...

    def fingerprint(self) -> str:
        return hashlib.sha256(self.name.encode()).hexdigest()[:12]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return 0.0
    return float(a @ b) / denom


class StubScorer(Scorer):
    """Deterministic, dependency-free scorer for tests and smoke runs.

    Image features are multiscale mean-pooled grayscale values (continuous in
    pixel space); text features hash each word to a fixed pseudo-embedding.
    Distances are cosine-based: identical images score exactly 0 and the
    measure is symmetric.
    """

    name = "stub"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def fingerprint(self) -> str:
        return hashlib.sha256(f"stub:{self.seed}".encode()).hexdigest()[:12]

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            gray = image
        elif image.ndim == 3:
            gray = image.mean(axis=0)
        else:
            raise ConfigError(f"expected (H, W) or (C, H, W) image, got {image.shape}")
        feats = [resize_bilinear(gray, hw).ravel() for hw in _FEATURE_SCALES]
        v = np.concatenate(feats)
        v = v - v.mean()
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def embed_text(self, text: str) -> np.ndarray:
        words = _WORD_RE.findall(text.lower())
        if not words:
            raise ConfigError("cannot embed empty text")
        v = np.zeros(_FEATURE_DIM, dtype=np.float64)
        for w in words:
            digest = hashlib.sha256(f"{self.seed}:{w}".encode()).digest()
            word_seed = int.from_bytes(digest[:8], "big")
            v += np.random.default_rng(word_seed).standard_normal(_FEATURE_DIM)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def perceptual_distance(self, a: np.ndarray, b: np.ndarray) -> float:
        fa = self.embed_image(a)
        fb = self.embed_image(b)
        if np.array_equal(fa, fb):
            return 0.0
        return 0.5 * (1.0 - _cosine(fa, fb))


class ClipScorer(Scorer):  # pragma: no cover - needs model weights
    """Real CLIP embeddings via transformers; perceptual distance via lpips."""

    name = "clip"

    def __init__(self, model_path: Optional[str] = None, device: Optional[str] = None):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ScorerUnavailableError(
                "clip scorer needs torch and transformers; "
                "install with: pip install 'layoutctl[metrics]'"
            ) from exc
        if not model_path:
            raise ScorerUnavailableError(
                "clip scorer needs a local model path (no downloads at run time)"
            )
        self.torch = torch
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.model = CLIPModel.from_pretrained(model_path).to(self.device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_path)
        self._lpips = None

    def fingerprint(self) -> str:
        return hashlib.sha256(f"clip:{self.model.config._name_or_path}".encode()).hexdigest()[:12]

    def _to_pil(self, image: np.ndarray):
        from PIL import Image

        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr.transpose(1, 2, 0)
        arr = np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)
        return Image.fromarray(arr)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        inputs = self.processor(images=self._to_pil(image), return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            out = self.model.get_image_features(**inputs)
        return out[0].cpu().numpy()

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self.processor(text=[text], return_tensors="pt", padding=True).to(self.device)
        with self.torch.no_grad():
            out = self.model.get_text_features(**inputs)
        return out[0].cpu().numpy()

    def perceptual_distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if self._lpips is None:
            try:
                import lpips
            except ImportError as exc:
                raise ScorerUnavailableError(
                    "perceptual distance needs the lpips package; "
                    "install with: pip install 'layoutctl[metrics]'"
                ) from exc
            self._lpips = lpips.LPIPS(net="alex").to(self.device).eval()
        torch = self.torch

        def prep(x):
            t = torch.from_numpy(np.asarray(x, dtype=np.float32))[None]
            return t.clamp(-1, 1).to(self.device)

        with torch.no_grad():
            d = self._lpips(prep(a), prep(b))
        return float(d.item())


def create_scorer(kind: str = "stub", **kwargs) -> Scorer:
    if kind == "stub":
        return StubScorer(seed=int(kwargs.get("seed", 0)))
    if kind == "clip":
        return ClipScorer(
            model_path=kwargs.get("model_path"), device=kwargs.get("device")
        )
    raise ConfigError(f"unknown scorer {kind!r} (expected 'stub' or 'clip')")


def clip_score(scorer: Scorer, image: np.ndarray, text: str) -> float:
    """CLIP-style alignment: 100 x cosine(image embedding, text embedding)."""
    return 100.0 * _cosine(scorer.embed_image(image), scorer.embed_text(text))


def lpips_distance(scorer: Scorer, a: np.ndarray, b: np.ndarray) -> float:
    return scorer.perceptual_distance(a, b)


@dataclass
class EvalRow:
    name: str
    clip: Optional[float]
    lpips: Optional[float]

    def to_dict(self) -> Dict[str, object]:
        return {"name": self.name, "clip": self.clip, "lpips": self.lpips}


def _score_one(
    args: Tuple[str, np.ndarray, Optional[str], Optional[np.ndarray], str, int]
) -> EvalRow:
    name, image, text, reference, scorer_kind, scorer_seed = args
    scorer = create_scorer(scorer_kind, seed=scorer_seed)
    c = clip_score(scorer, image, text) if text else None
    l = lpips_distance(scorer, image, reference) if reference is not None else None
    return EvalRow(name=name, clip=c, lpips=l)


def evaluate_pairs(
    scorer: Scorer,
    items: Sequence[Dict[str, object]],
    jobs: int = 1,
) -> List[EvalRow]:
    """Score items of the form {name, image, text?, reference?}.

    With jobs > 1 a process pool is used; that path supports the stub scorer
    only (real scorers hold device state that does not pickle).
    """
    if jobs > 1:
        if not isinstance(scorer, StubScorer):
            raise ConfigError("parallel evaluation supports the stub scorer only")
        payload = [
            (
                str(it["name"]),
                np.asarray(it["image"]),
                it.get("text"),
                None if it.get("reference") is None else np.asarray(it["reference"]),
                scorer.name,
                scorer.seed,
            )
            for it in items
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_score_one, payload))

    rows = []
    for it in items:
        text = it.get("text")
        ref = it.get("reference")
        rows.append(
            EvalRow(
                name=str(it["name"]),
                clip=clip_score(scorer, np.asarray(it["image"]), str(text)) if text else None,
                lpips=lpips_distance(scorer, np.asarray(it["image"]), np.asarray(ref))
                if ref is not None
                else None,
            )
        )
    return rows


def write_results(
    rows: Sequence[EvalRow],
    out_dir: str | Path,
    scorer: Scorer,
    extra_meta: Optional[Dict[str, object]] = None,
) -> Tuple[Path, Path]:
    """Emit results.csv and results.json (with scorer fingerprint) into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "clip", "lpips"])
        for r in rows:
            writer.writerow(
                [r.name, "" if r.clip is None else f"{r.clip:.6f}",
                 "" if r.lpips is None else f"{r.lpips:.6f}"]
            )

    clip_vals = [r.clip for r in rows if r.clip is not None]
    lpips_vals = [r.lpips for r in rows if r.lpips is not None]
    doc = {
        "scorer": scorer.name,
        "scorer_fingerprint": scorer.fingerprint(),
        "rows": [r.to_dict() for r in rows],
        "summary": {
            "clip_mean": float(np.mean(clip_vals)) if clip_vals else None,
            "lpips_mean": float(np.mean(lpips_vals)) if lpips_vals else None,
            "count": len(rows),
        },
    }
    if extra_meta:
        doc.update(extra_meta)
    json_path = out / "results.json"
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2)
    return csv_path, json_path
