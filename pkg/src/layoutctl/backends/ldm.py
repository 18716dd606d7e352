"""Stable-Diffusion adapter (optional, requires the ``ldm`` extra).

Wraps a locally stored diffusers checkpoint behind the same tap interface as
the toy backend. Heavy imports are deferred to :func:`build_ldm_backend` so
the rest of the package works without torch/diffusers installed.

Determinism notes: the VAE encode uses the posterior mean (never sampled),
prompts run as two separate unconditional/conditional forwards, and captures
and injections touch only the conditional forward.
"""

from __future__ import annotations

import math
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import BackendError, ConfigError
from ..taps import EMPTY_PLAN, CaptureSink, TapPlan, validate_plan
from ..types import AttentionRecord, PromptSpec
from .base import DenoiserBackend, LatentCodec

CHECKPOINT_ENV = "LAYOUTCTL_SD_CHECKPOINT"
VAE_SCALE = 0.18215


def _import_stack():
    try:
        import torch
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from diffusers.models.attention_processor import Attention
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:  # pragma: no cover - exercised only with extras
        raise BackendError(
            "the ldm backend needs torch, diffusers and transformers; "
            "install with: pip install 'layoutctl[ldm]'"
        ) from exc
    return torch, AutoencoderKL, UNet2DConditionModel, Attention, CLIPTextModel, CLIPTokenizer


class _VaeCodec(LatentCodec):
    def __init__(self, backend: "LdmBackend"):
        self._b = backend

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        _, h, w = self._b.latent_shape
        return (3, h * 8, w * 8)

    def encode(self, image: np.ndarray) -> np.ndarray:
        torch = self._b.torch
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None].to(
            self._b.device, self._b.dtype
        )
        with torch.no_grad():
            posterior = self._b.vae.encode(x).latent_dist
            z = posterior.mean * VAE_SCALE
        return z[0].float().cpu().numpy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        torch = self._b.torch
        z = torch.from_numpy(np.asarray(latent, dtype=np.float32))[None].to(
            self._b.device, self._b.dtype
        )
        with torch.no_grad():
            x = self._b.vae.decode(z / VAE_SCALE).sample
        return x[0].float().cpu().numpy()


class _TapProcessor:
    """Attention processor that mirrors the default computation and exposes
    query/prob taps for one layer index."""

    def __init__(self, backend: "LdmBackend", layer: int, is_cross: bool):
        self.backend = backend
        self.layer = layer
        self.is_cross = is_cross

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        torch = self.backend.torch
        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states
        batch, seq_len, _ = hidden_states.shape
        if attention_mask is not None:
            attention_mask = attn.prepare_attention_mask(attention_mask, context.shape[1], batch)

        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)

        query = attn.head_to_batch_dim(query)  # (batch*heads, n, dh)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)

        sink = self.backend.active_sink
        plan = self.backend.active_plan
        if plan is not None and batch == 1 and not self.is_cross:
            injected = plan.inject_q.get(self.layer)
            if injected is not None:
                query = torch.from_numpy(np.asarray(injected, dtype=np.float32)).to(
                    query.device, query.dtype
                )
            if sink is not None:
                sink.offer_self_q(self.layer, query.float().cpu().numpy())

        # Explicit softmax keeps the captured map identical to what multiplies V.
        scale = 1.0 / math.sqrt(query.shape[-1])
        logits = torch.baddbmm(
            torch.zeros(query.shape[0], query.shape[1], key.shape[1], device=query.device, dtype=query.dtype),
            query,
            key.transpose(-1, -2),
            beta=0,
            alpha=scale,
        )
        if attention_mask is not None:
            logits = logits + attention_mask
        probs = logits.softmax(dim=-1)

        if plan is not None and sink is not None and batch == 1 and self.is_cross:
            sink.offer_cross(self.layer, probs.float().cpu().numpy())

        out = torch.bmm(probs.to(value.dtype), value)
        out = attn.batch_to_head_dim(out)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        return out


class LdmBackend(DenoiserBackend):
    def __init__(self, checkpoint: str, device: Optional[str] = None, dtype: Optional[str] = None):
        (
            self.torch,
            AutoencoderKL,
            UNet2DConditionModel,
            self._Attention,
            CLIPTextModel,
            CLIPTokenizer,
        ) = _import_stack()
        torch = self.torch

        if not os.path.isdir(checkpoint):
            raise ConfigError(f"checkpoint directory not found: {checkpoint}")
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.dtype = {"float16": torch.float16, "bfloat16": torch.bfloat16}.get(
            dtype or "", torch.float32
        )

        def sub(name):
            return os.path.join(checkpoint, name)

        self.tokenizer_impl = CLIPTokenizer.from_pretrained(sub("tokenizer"))
        self.text_encoder = CLIPTextModel.from_pretrained(sub("text_encoder")).to(
            self.device, self.dtype
        )
        self.vae = AutoencoderKL.from_pretrained(sub("vae")).to(self.device, self.dtype)
        self.unet = UNet2DConditionModel.from_pretrained(sub("unet")).to(
            self.device, self.dtype
        )
        for m in (self.text_encoder, self.vae, self.unet):
            m.eval()

        self.heads = 8  # refined per layer below; SD v1 uses 8 everywhere
        self.active_sink: Optional[CaptureSink] = None
        self.active_plan: Optional[TapPlan] = None

        self._codec = _VaeCodec(self)
        sample = self.unet.config.sample_size
        self._latent_shape = (self.unet.config.in_channels, sample, sample)
        self._enumerate_layers()
        self._install_processors()

    # -- layer discovery ------------------------------------------------------

    def _enumerate_layers(self) -> None:
        """Number attention layers in true execution order via a probe pass."""
        torch = self.torch
        calls: List[Tuple[str, bool, int]] = []

        originals = {}
        for name, module in self.unet.named_modules():
            if isinstance(module, self._Attention):
                originals[name] = module.processor

                def make_probe(mod_name):
                    def probe(attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kw):
                        calls.append(
                            (
                                mod_name,
                                encoder_hidden_states is not None,
                                hidden_states.shape[1],
                            )
                        )
                        context = (
                            encoder_hidden_states
                            if encoder_hidden_states is not None
                            else hidden_states
                        )
                        q = attn.head_to_batch_dim(attn.to_q(hidden_states))
                        k = attn.head_to_batch_dim(attn.to_k(context))
                        v = attn.head_to_batch_dim(attn.to_v(context))
                        probs = (q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])).softmax(-1)
                        out = attn.batch_to_head_dim(probs @ v)
                        return attn.to_out[1](attn.to_out[0](out))

                    return probe

                module.processor = make_probe(name)

        c, h, w = self._latent_shape
        with torch.no_grad():
            dummy_z = torch.zeros(1, c, h, w, device=self.device, dtype=self.dtype)
            dummy_emb = torch.zeros(
                1,
                self.tokenizer_impl.model_max_length,
                self.text_encoder.config.hidden_size,
                device=self.device,
                dtype=self.dtype,
            )
            self.unet(dummy_z, 0, encoder_hidden_states=dummy_emb)

        for name, module in self.unet.named_modules():
            if isinstance(module, self._Attention):
                module.processor = originals[name]

        self._layer_names: List[str] = []
        kinds: Dict[int, str] = {}
        res_of: Dict[int, Tuple[int, int]] = {}
        aspect = h / w
        for idx, (name, is_cross, n) in enumerate(calls):
            self._layer_names.append(name)
            kinds[idx] = "cross" if is_cross else "self"
            gh = int(round(math.sqrt(n * aspect)))
            gw = n // max(gh, 1)
            if gh * gw != n:
                gh = int(round(math.sqrt(n)))
                gw = gh
            res_of[idx] = (gh, gw)
        self._kinds = kinds
        self._res_of = res_of
        modules = dict(self.unet.named_modules())
        first = modules[self._layer_names[0]]
        self.heads = first.heads
        self.head_dim = first.to_q.out_features // first.heads

    def _install_processors(self) -> None:
        modules = dict(self.unet.named_modules())
        for idx, name in enumerate(self._layer_names):
            modules[name].processor = _TapProcessor(self, idx, self._kinds[idx] == "cross")

    # -- metadata -------------------------------------------------------------

    @property
    def layer_count(self) -> int:
        return len(self._layer_names)

    @property
    def layer_kinds(self) -> Dict[int, str]:
        return dict(self._kinds)

    @property
    def layer_resolutions(self) -> Dict[int, Tuple[int, int]]:
        return dict(self._res_of)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return self._latent_shape

    @property
    def codec(self) -> LatentCodec:
        return self._codec

    def describe(self) -> Dict[str, object]:
        return {
            "kind": "ldm",
            "device": str(self.device),
            "layer_count": self.layer_count,
            "latent_shape": list(self.latent_shape),
        }

    # -- text -------------------------------------------------------------

    def tokenize(self, text: str) -> Tuple[Tuple[int, ...], Tuple[str, ...]]:
        if not text or not text.strip():
            raise ConfigError("prompt text is empty")
        enc = self.tokenizer_impl(
            text,
            padding="max_length",
            max_length=self.tokenizer_impl.model_max_length,
            truncation=True,
        )
        ids = tuple(enc["input_ids"])
        strings = tuple(
            self.tokenizer_impl.convert_ids_to_tokens(i).replace("</w>", "") for i in ids
        )
        return ids, strings

    def _embed(self, text: str):
        torch = self.torch
        enc = self.tokenizer_impl(
            text,
            padding="max_length",
            max_length=self.tokenizer_impl.model_max_length,
            truncation=True,
            return_tensors="pt",
        )
        with torch.no_grad():
            out = self.text_encoder(enc.input_ids.to(self.device))
        return out.last_hidden_state.to(self.dtype)

    # -- denoising ----------------------------------------------------------

    def denoise_step(
        self,
        z_t: np.ndarray,
        t: int,
        prompt: PromptSpec,
        guidance_scale: float,
        taps: TapPlan = EMPTY_PLAN,
        step_index: int = 0,
    ) -> Tuple[np.ndarray, List[AttentionRecord]]:
        torch = self.torch
        if tuple(z_t.shape) != self.latent_shape:
            raise BackendError(
                f"expected latent shape {self.latent_shape}, got {tuple(z_t.shape)}"
            )
        validate_plan(taps, self)

        z = torch.from_numpy(np.asarray(z_t, dtype=np.float32))[None].to(
            self.device, self.dtype
        )
        sink = CaptureSink(step_index, taps)

        def run(emb, plan, active_sink):
            self.active_plan = plan
            self.active_sink = active_sink
            try:
                with torch.no_grad():
                    return self.unet(z, t, encoder_hidden_states=emb).sample
            finally:
                self.active_plan = None
                self.active_sink = None

        eps_c = run(self._embed(prompt.text), taps, sink)
        if guidance_scale == 1.0:
            eps = eps_c
        else:
            eps_u = run(self._embed(""), EMPTY_PLAN, None)
            eps = eps_u + guidance_scale * (eps_c - eps_u)
        return eps[0].float().cpu().numpy(), sink.records


def build_ldm_backend(
    checkpoint: Optional[str] = None,
    device: Optional[str] = None,
    dtype: Optional[str] = None,
) -> LdmBackend:
    checkpoint = checkpoint or os.environ.get(CHECKPOINT_ENV)
    if not checkpoint:
        raise ConfigError(
            f"no checkpoint given; pass backend.checkpoint or set ${CHECKPOINT_ENV}"
        )
    return LdmBackend(checkpoint, device=device, dtype=dtype)
