"""JSON job files: load, validate, resolve, and snapshot.

A job fully describes one dual run. ``resolve_job`` materializes every
default and resolves token words to indices, producing both the live objects
the pipeline needs and a plain-dict snapshot; resolving that snapshot again
yields byte-identical artifacts, so the snapshot written next to a run's
outputs is a rerunnable record of exactly what was executed.

Error messages point into the document with a ``$.path[i].field`` prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .backends import DenoiserBackend, create_backend
from .backends.toy import find_token_index
from .errors import ConfigError
from .types import LayoutParams, PromptSpec, RunConfig

_RUN_KEYS = {"total_steps", "t_star", "guidance_scale", "layer_window", "seed", "image_size"}
_OBJECT_KEYS = {"token", "dx", "dy", "theta", "scale", "drop", "eta"}
_TOP_KEYS = {"prompt_source", "prompt_target", "objects", "run", "backend", "masking", "layout_fill"}


def _type_name(value: Any) -> str:
    return type(value).__name__


def _expect(value: Any, types: tuple, path: str) -> Any:
    if not isinstance(value, types) or isinstance(value, bool) and bool not in types:
        wanted = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}: expected {wanted}, got {_type_name(value)}")
    return value


def _expect_number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected number, got {_type_name(value)}")
    return float(value)


def load_job(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"job file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: job document must be a JSON object")
    return raw


@dataclass
class ResolvedJob:
    """A job with every default materialized and all tokens numeric."""

    prompt_source: PromptSpec
    prompt_target: PromptSpec
    edits: List[LayoutParams]
    run: RunConfig
    backend: DenoiserBackend
    mask_source_layers: Optional[List[int]]
    layout_fill: str
    snapshot: Dict[str, Any]


def _resolve_run(raw_run: Dict[str, Any]) -> RunConfig:
    unknown = set(raw_run) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"$.run: unknown keys {sorted(unknown)}")
    kwargs: Dict[str, Any] = {}
    if "total_steps" in raw_run:
        kwargs["total_steps"] = int(_expect_number(raw_run["total_steps"], "$.run.total_steps"))
    if "t_star" in raw_run:
        kwargs["t_star"] = int(_expect_number(raw_run["t_star"], "$.run.t_star"))
    if "guidance_scale" in raw_run:
        kwargs["guidance_scale"] = _expect_number(raw_run["guidance_scale"], "$.run.guidance_scale")
    if "layer_window" in raw_run:
        win = _expect(raw_run["layer_window"], (list,), "$.run.layer_window")
        if len(win) != 2:
            raise ConfigError("$.run.layer_window: expected [lo, hi]")
        kwargs["layer_window"] = (
            int(_expect_number(win[0], "$.run.layer_window[0]")),
            int(_expect_number(win[1], "$.run.layer_window[1]")),
        )
    if "seed" in raw_run:
        kwargs["seed"] = int(_expect_number(raw_run["seed"], "$.run.seed"))
    if raw_run.get("image_size") is not None:
        size = _expect(raw_run["image_size"], (list,), "$.run.image_size")
        if len(size) != 2:
            raise ConfigError("$.run.image_size: expected [height, width]")
        kwargs["image_size"] = (int(size[0]), int(size[1]))
    try:
        return RunConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"$.run: {exc}") from None


def _resolve_object(
    i: int, obj: Dict[str, Any], token_strings: Sequence[str]
) -> LayoutParams:
    path = f"$.objects[{i}]"
    _expect(obj, (dict,), path)
    unknown = set(obj) - _OBJECT_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if "token" not in obj:
        raise ConfigError(f"{path}.token: required")

    token = obj["token"]
    if isinstance(token, bool):
        raise ConfigError(f"{path}.token: expected string or integer index")
    if isinstance(token, int):
        if not 0 <= token < len(token_strings):
            raise ConfigError(
                f"{path}.token: index {token} out of range for a "
                f"{len(token_strings)}-token prompt"
            )
        token_index = token
    elif isinstance(token, str):
        try:
            token_index = find_token_index(token_strings, token)
        except ConfigError as exc:
            raise ConfigError(f"{path}.token: {exc}") from None
    else:
        raise ConfigError(f"{path}.token: expected string or integer index")

    dx = _expect_number(obj.get("dx", 0.0), f"{path}.dx")
    dy = _expect_number(obj.get("dy", 0.0), f"{path}.dy")
    theta = _expect_number(obj.get("theta", 0.0), f"{path}.theta")
    scale = _expect_number(obj.get("scale", 1.0), f"{path}.scale")
    drop = obj.get("drop", False)
    if not isinstance(drop, bool):
        raise ConfigError(f"{path}.drop: expected boolean, got {_type_name(drop)}")
    eta = _expect_number(obj.get("eta", 0.2), f"{path}.eta")

    if eta == 1.0 and not drop:
        # Threshold 1.0 is the documented alias for dropping the object.
        drop = True
    try:
        return LayoutParams(
            token_index=token_index, dx=dx, dy=dy, theta=theta,
            scale=scale, drop=drop, eta=eta,
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve_job(
    raw: Dict[str, Any], backend: Optional[DenoiserBackend] = None
) -> ResolvedJob:
    """Validate ``raw``, build the backend (unless given) and all live objects."""
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"$: unknown keys {sorted(unknown)}")
    if "prompt_source" not in raw:
        raise ConfigError("$.prompt_source: required")
    source_text = _expect(raw["prompt_source"], (str,), "$.prompt_source")
    if not source_text.strip():
        raise ConfigError("$.prompt_source: must be non-empty")
    target_text = _expect(raw.get("prompt_target", source_text), (str,), "$.prompt_target")
    if not target_text.strip():
        raise ConfigError("$.prompt_target: must be non-empty")

    backend_spec = _expect(raw.get("backend", {}), (dict,), "$.backend")
    if backend is None:
        backend = create_backend(backend_spec)

    run = _resolve_run(_expect(raw.get("run", {}), (dict,), "$.run"))

    src_ids, src_strings = backend.tokenize(source_text)
    tgt_ids, _ = backend.tokenize(target_text)

    objects = _expect(raw.get("objects", []), (list,), "$.objects")
    edits = [_resolve_object(i, obj, src_strings) for i, obj in enumerate(objects)]

    prompt_source = PromptSpec(
        text=source_text,
        token_ids=src_ids,
        object_tokens=tuple((e.token_index, src_strings[e.token_index]) for e in edits),
    )
    prompt_target = PromptSpec(text=target_text, token_ids=tgt_ids)

    masking = _expect(raw.get("masking", {}), (dict,), "$.masking")
    unknown = set(masking) - {"source_layers"}
    if unknown:
        raise ConfigError(f"$.masking: unknown keys {sorted(unknown)}")
    source_layers: Optional[List[int]] = None
    if masking.get("source_layers") is not None:
        layers = _expect(masking["source_layers"], (list,), "$.masking.source_layers")
        source_layers = [
            int(_expect_number(l, f"$.masking.source_layers[{j}]"))
            for j, l in enumerate(layers)
        ]

    layout_fill = raw.get("layout_fill", "nearest_background")
    if layout_fill not in ("nearest_background", "zero"):
        raise ConfigError(
            f"$.layout_fill: expected 'nearest_background' or 'zero', got {layout_fill!r}"
        )

    described = backend.describe() if hasattr(backend, "describe") else dict(backend_spec)
    snapshot = {
        "prompt_source": source_text,
        "prompt_target": target_text,
        "objects": [
            {
                "token": e.token_index,
                "dx": e.dx,
                "dy": e.dy,
                "theta": e.theta,
                "scale": e.scale,
                "drop": e.drop,
                "eta": e.eta,
            }
            for e in edits
        ],
        "run": {
            "total_steps": run.total_steps,
            "t_star": run.t_star,
            "guidance_scale": run.guidance_scale,
            "layer_window": list(run.layer_window),
            "seed": run.seed,
            "image_size": list(run.image_size) if run.image_size else None,
        },
        "backend": {
            k: described[k]
            for k in ("kind", "seed", "resolutions", "d", "checkpoint", "device")
            if k in described
        },
        "masking": {"source_layers": source_layers},
        "layout_fill": layout_fill,
    }

    return ResolvedJob(
        prompt_source=prompt_source,
        prompt_target=prompt_target,
        edits=edits,
        run=run,
        backend=backend,
        mask_source_layers=source_layers,
        layout_fill=layout_fill,
        snapshot=snapshot,
    )


def write_snapshot(job: ResolvedJob, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(job.snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
