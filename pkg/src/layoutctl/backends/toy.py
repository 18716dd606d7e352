"""Deterministic numpy toy backend.

A miniature latent-diffusion stack that is cheap enough for CI and exact
enough for bitwise tests: a hash-vocabulary tokenizer, a fixed random
embedding table, a mirrored encoder/decoder attention net, and an exactly
invertible pixel-unshuffle codec. All weights are drawn once from
``np.random.default_rng(seed)`` in a fixed order, all math is float32, and
there is no dropout or sampling anywhere in the forward pass, so two calls
with the same inputs produce identical bytes.

Layer indexing: attention layers are numbered in execution order, self before
cross within a block. With R resolutions the encoder contributes layers
0..2R-1 and the mirrored decoder 2R..4R-1, e.g. resolutions
[(8, 8), (4, 4)] give layer_count == 8.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import BackendError, ConfigError, TruncationWarning
from ..masking import resize_nearest
from ..taps import EMPTY_PLAN, CaptureSink, TapPlan, validate_plan
from ..types import AttentionRecord, PromptSpec
from .base import DenoiserBackend, LatentCodec

_WORD_RE = re.compile(r"[a-z0-9']+")

VOCAB_SIZE = 4096
MAX_TOKENS = 32
BOS_ID = 0
EOS_ID = 1
HEADS = 2
IMAGE_CHANNELS = 3
SHUFFLE_FACTOR = 2
LATENT_CHANNELS = IMAGE_CHANNELS * SHUFFLE_FACTOR * SHUFFLE_FACTOR

DEFAULT_RESOLUTIONS: Tuple[Tuple[int, int], ...] = ((16, 16), (8, 8), (4, 4), (2, 2))
DEFAULT_WIDTH = 64


def _word_id(word: str) -> int:
    # Stable across processes; python's hash() is salted.
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return 2 + int.from_bytes(digest[:8], "big") % (VOCAB_SIZE - 2)


class ToyTokenizer:
    """Lowercase word tokenizer with a hashed vocabulary and BOS/EOS."""

    vocab_size = VOCAB_SIZE
    max_tokens = MAX_TOKENS

    def tokenize(self, text: str) -> Tuple[Tuple[int, ...], Tuple[str, ...]]:
        if not text or not text.strip():
            raise ConfigError("prompt text is empty")
        return self._encode(text)

    def encode_maybe_empty(self, text: str) -> Tuple[Tuple[int, ...], Tuple[str, ...]]:
        # Internal path for the unconditional branch.
        if not text or not text.strip():
            return (BOS_ID, EOS_ID), ("<bos>", "<eos>")
        return self._encode(text)

    def _encode(self, text: str) -> Tuple[Tuple[int, ...], Tuple[str, ...]]:
        words = _WORD_RE.findall(text.lower())
        limit = self.max_tokens - 2
        if len(words) > limit:
            warnings.warn(
                f"prompt truncated from {len(words)} to {limit} words",
                TruncationWarning,
                stacklevel=3,
            )
            words = words[:limit]
        ids = (BOS_ID, *[_word_id(w) for w in words], EOS_ID)
        strings = ("<bos>", *words, "<eos>")
        return ids, strings


def find_token_index(strings: Sequence[str], query: str) -> int:
    """First occurrence of ``query`` among token strings (exact match on the
    lowercased word)."""
    needle = query.lower().strip()
    for i, s in enumerate(strings):
        if s == needle:
            return i
    from ..errors import TokenNotFoundError

    raise TokenNotFoundError(
        f"token {query!r} not found in prompt tokens {list(strings)!r}"
    )


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:  # odd dim pad
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb.astype(np.float32)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    # Contiguous so computed and injected queries share a memory layout;
    # BLAS kernels are layout-sensitive and bitwise tests need one path.
    return np.ascontiguousarray(x.reshape(n, heads, d // heads).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


def _resize_tokens(x: np.ndarray, src: Tuple[int, int], dst: Tuple[int, int]) -> np.ndarray:
    if src == dst:
        return x
    h, w = src
    grid = x.reshape(h, w, -1)
    out = resize_nearest(grid, dst)
    return out.reshape(dst[0] * dst[1], -1)


class PixelShuffleCodec(LatentCodec):
    """Exactly invertible space-to-depth codec: (3, 2h, 2w) <-> (12, h, w)."""

    def __init__(self, latent_hw: Tuple[int, int]):
        self._latent_hw = latent_hw

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        h, w = self._latent_hw
        return (IMAGE_CHANNELS, h * SHUFFLE_FACTOR, w * SHUFFLE_FACTOR)

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        if image.shape != self.image_shape:
            raise BackendError(
                f"expected image shape {self.image_shape}, got {tuple(image.shape)}"
            )
        c, big_h, big_w = image.shape
        f = SHUFFLE_FACTOR
        h, w = big_h // f, big_w // f
        blocks = image.reshape(c, h, f, w, f)
        return blocks.transpose(0, 2, 4, 1, 3).reshape(c * f * f, h, w)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        h, w = self._latent_hw
        if latent.shape != (LATENT_CHANNELS, h, w):
            raise BackendError(
                f"expected latent shape {(LATENT_CHANNELS, h, w)}, got {tuple(latent.shape)}"
            )
        f = SHUFFLE_FACTOR
        blocks = latent.reshape(IMAGE_CHANNELS, f, f, h, w)
        return blocks.transpose(0, 3, 1, 4, 2).reshape(IMAGE_CHANNELS, h * f, w * f)


class ToyBackend(DenoiserBackend):
    def __init__(
        self,
        seed: int = 0,
        resolutions: Sequence[Tuple[int, int]] = DEFAULT_RESOLUTIONS,
        d: int = DEFAULT_WIDTH,
    ):
        resolutions = tuple((int(h), int(w)) for h, w in resolutions)
        if not resolutions:
            raise ConfigError("resolutions must be non-empty")
        for h, w in resolutions:
            if h < 1 or w < 1:
                raise ConfigError(f"bad resolution {(h, w)}")
        if d % HEADS != 0:
            raise ConfigError(f"model width {d} not divisible by {HEADS} heads")

        self.seed = int(seed)
        self.resolutions = resolutions
        self.d = int(d)
        self.heads = HEADS
        self.head_dim = d // HEADS
        self.tokenizer = ToyTokenizer()

        r = len(resolutions)
        kinds: Dict[int, str] = {}
        res_of: Dict[int, Tuple[int, int]] = {}
        idx = 0
        for res in resolutions:  # encoder
            kinds[idx], res_of[idx] = "self", res
            kinds[idx + 1], res_of[idx + 1] = "cross", res
            idx += 2
        for res in reversed(resolutions):  # decoder mirrors back up
            kinds[idx], res_of[idx] = "self", res
            kinds[idx + 1], res_of[idx + 1] = "cross", res
            idx += 2
        self._kinds = kinds
        self._res_of = res_of
        self._n_blocks = 2 * r

        self._codec = PixelShuffleCodec(resolutions[0])
        self._init_weights()

    # -- weights ------------------------------------------------------------

    def _init_weights(self) -> None:
        rng = np.random.default_rng(self.seed)
        d = self.d
        scale = 1.0 / np.sqrt(d)

        def mat(rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
            # Cast last: the whole net must stay float32 end to end.
            return (rng.standard_normal((rows, cols)) * (scale * gain)).astype(np.float32)

        self.token_emb = mat(VOCAB_SIZE, d, gain=float(np.sqrt(d)))  # unit-variance rows
        self.w_stem = mat(LATENT_CHANNELS, d, gain=float(np.sqrt(d / LATENT_CHANNELS)))
        self.b_stem = np.zeros(d, dtype=np.float32)

        self.blocks: List[Dict[str, np.ndarray]] = []
        for _ in range(self._n_blocks):
            blk = {
                "self_wq": mat(d, d),
                "self_wk": mat(d, d),
                "self_wv": mat(d, d),
                "self_wo": mat(d, d),
                "cross_wq": mat(d, d),
                "cross_wk": mat(d, d),
                "cross_wv": mat(d, d),
                "cross_wo": mat(d, d),
            }
            self.blocks.append(blk)

        self.w_head = mat(d, LATENT_CHANNELS)
        self.b_head = np.zeros(LATENT_CHANNELS, dtype=np.float32)

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.token_emb.tobytes())
        h.update(self.w_stem.tobytes())
        for blk in self.blocks:
            for key in sorted(blk):
                h.update(blk[key].tobytes())
        h.update(self.w_head.tobytes())
        return h.hexdigest()

    # -- metadata -----------------------------------------------------------

    @property
    def layer_count(self) -> int:
        return 2 * self._n_blocks

    @property
    def layer_kinds(self) -> Dict[int, str]:
        return dict(self._kinds)

    @property
    def layer_resolutions(self) -> Dict[int, Tuple[int, int]]:
        return dict(self._res_of)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        h, w = self.resolutions[0]
        return (LATENT_CHANNELS, h, w)

    @property
    def codec(self) -> LatentCodec:
        return self._codec

    def describe(self) -> Dict[str, object]:
        return {
            "kind": "toy",
            "seed": self.seed,
            "resolutions": [list(r) for r in self.resolutions],
            "d": self.d,
            "heads": self.heads,
            "layer_count": self.layer_count,
            "latent_shape": list(self.latent_shape),
        }

    # -- text ---------------------------------------------------------------

    def tokenize(self, text: str) -> Tuple[Tuple[int, ...], Tuple[str, ...]]:
        return self.tokenizer.tokenize(text)

    def _embed_ids(self, ids: Sequence[int]) -> np.ndarray:
        ids_arr = np.asarray(ids, dtype=np.int64)
        if ids_arr.ndim != 1 or ids_arr.size == 0:
            raise BackendError("token ids must be a non-empty 1-D sequence")
        if (ids_arr < 0).any() or (ids_arr >= VOCAB_SIZE).any():
            raise BackendError("token id out of vocabulary range")
        emb = self.token_emb[ids_arr]
        return emb + _sinusoid(np.arange(len(ids_arr)), self.d)

    # -- forward ------------------------------------------------------------

    def _attention(
        self, q: np.ndarray, k: np.ndarray, v: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        logits = q @ k.transpose(0, 2, 1) / np.float32(np.sqrt(self.head_dim))
        probs = _softmax(logits)
        return probs, probs @ v

    def _self_block(
        self,
        x: np.ndarray,
        layer: int,
        blk: Dict[str, np.ndarray],
        plan: TapPlan,
        sink: Optional[CaptureSink],
    ) -> np.ndarray:
        hN = _layer_norm(x)
        q = _split_heads(hN @ blk["self_wq"], self.heads)
        injected = plan.inject_q.get(layer)
        if injected is not None:
            q = np.ascontiguousarray(np.asarray(injected, dtype=np.float32))
        # Capture after the injection point: records hold the queries the
        # attention actually consumed.
        if sink is not None:
            sink.offer_self_q(layer, q)
        k = _split_heads(hN @ blk["self_wk"], self.heads)
        v = _split_heads(hN @ blk["self_wv"], self.heads)
        _, out = self._attention(q, k, v)
        return x + _merge_heads(out) @ blk["self_wo"]

    def _cross_block(
        self,
        x: np.ndarray,
        layer: int,
        blk: Dict[str, np.ndarray],
        text_emb: np.ndarray,
        sink: Optional[CaptureSink],
    ) -> np.ndarray:
        hN = _layer_norm(x)
        q = _split_heads(hN @ blk["cross_wq"], self.heads)
        k = _split_heads(text_emb @ blk["cross_wk"], self.heads)
        v = _split_heads(text_emb @ blk["cross_wv"], self.heads)
        probs, out = self._attention(q, k, v)
        if sink is not None:
            sink.offer_cross(layer, probs)
        return x + _merge_heads(out) @ blk["cross_wo"]

    def _forward(
        self,
        z: np.ndarray,
        t: int,
        text_emb: np.ndarray,
        plan: TapPlan,
        sink: Optional[CaptureSink],
    ) -> np.ndarray:
        c, h0, w0 = self.latent_shape
        x = z.reshape(c, h0 * w0).T @ self.w_stem + self.b_stem
        x = x + _sinusoid(np.asarray([float(t)]), self.d)

        res_list = self.resolutions
        r = len(res_list)
        enc_feats: List[np.ndarray] = []
        layer = 0
        for i, res in enumerate(res_list):
            if i > 0:
                x = _resize_tokens(x, res_list[i - 1], res)
            blk = self.blocks[i]
            x = self._self_block(x, layer, blk, plan, sink)
            x = self._cross_block(x, layer + 1, blk, text_emb, sink)
            enc_feats.append(x)
            layer += 2

        for j in range(r):
            res = res_list[r - 1 - j]
            blk = self.blocks[r + j]
            if j > 0:
                x = _resize_tokens(x, res_list[r - j], res) + enc_feats[r - 1 - j]
            x = self._self_block(x, layer, blk, plan, sink)
            x = self._cross_block(x, layer + 1, blk, text_emb, sink)
            layer += 2

        eps = _layer_norm(x) @ self.w_head + self.b_head
        return eps.T.reshape(c, h0, w0).astype(np.float32, copy=False)

    # -- public entry point ---------------------------------------------------

    def denoise_step(
        self,
        z_t: np.ndarray,
        t: int,
        prompt: PromptSpec,
        guidance_scale: float,
        taps: TapPlan = EMPTY_PLAN,
        step_index: int = 0,
    ) -> Tuple[np.ndarray, List[AttentionRecord]]:
        z_t = np.asarray(z_t, dtype=np.float32)
        if z_t.shape != self.latent_shape:
            raise BackendError(
                f"expected latent shape {self.latent_shape}, got {tuple(z_t.shape)}"
            )
        validate_plan(taps, self)

        cond_emb = self._embed_ids(prompt.token_ids)
        sink = CaptureSink(step_index, taps)

        if guidance_scale == 1.0:
            # Degenerate guidance: the combined prediction equals the
            # conditional one exactly, so skip the unconditional pass.
            eps = self._forward(z_t, t, cond_emb, taps, sink)
            return eps, sink.records

        uncond_ids, _ = self.tokenizer.encode_maybe_empty("")
        uncond_emb = self._embed_ids(uncond_ids)
        eps_u = self._forward(z_t, t, uncond_emb, EMPTY_PLAN, None)
        eps_c = self._forward(z_t, t, cond_emb, taps, sink)
        eps = eps_u + np.float32(guidance_scale) * (eps_c - eps_u)
        return eps.astype(np.float32, copy=False), sink.records


def build_toy_backend(
    seed: int = 0,
    resolutions: Sequence[Tuple[int, int]] = DEFAULT_RESOLUTIONS,
    d: int = DEFAULT_WIDTH,
) -> ToyBackend:
    return ToyBackend(seed=seed, resolutions=resolutions, d=d)
