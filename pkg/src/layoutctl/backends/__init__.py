"""Denoiser backends and the factory that the CLI and job loader use."""

from __future__ import annotations

from typing import Any, Dict

from ..errors import ConfigError
from .base import DenoiserBackend, LatentCodec
from .toy import ToyBackend, build_toy_backend

__all__ = [
    "DenoiserBackend",
    "LatentCodec",
    "ToyBackend",
    "build_toy_backend",
    "create_backend",
]


def create_backend(spec: Dict[str, Any] | None = None, **overrides: Any) -> DenoiserBackend:
    """Build a backend from a job-file ``backend`` object.

    ``{"kind": "toy", "seed": 0, "resolutions": [[16, 16], ...], "d": 64}``
    or ``{"kind": "ldm", "checkpoint": ..., "device": ...}``. Keyword
    overrides win over the spec dict.
    """
    cfg = dict(spec or {})
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    kind = cfg.pop("kind", "toy")

    if kind == "toy":
        known = {"seed", "resolutions", "d"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown toy backend options: {sorted(extra)}")
        kwargs = {}
        if "seed" in cfg:
            kwargs["seed"] = int(cfg["seed"])
        if "resolutions" in cfg:
            kwargs["resolutions"] = [tuple(r) for r in cfg["resolutions"]]
        if "d" in cfg:
            kwargs["d"] = int(cfg["d"])
        return build_toy_backend(**kwargs)

    if kind == "ldm":
        from .ldm import build_ldm_backend

        known = {"checkpoint", "device", "dtype"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown ldm backend options: {sorted(extra)}")
        return build_ldm_backend(**cfg)

    raise ConfigError(f"unknown backend kind {kind!r} (expected 'toy' or 'ldm')")
