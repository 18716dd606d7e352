"""Attention instrumentation: what to capture and what to inject.

A ``TapPlan`` is handed to a backend's denoise step. Capture sets name the
layers whose cross-attention maps / self-attention queries should be recorded
from the conditional forward; ``inject_q`` replaces the self-attention query
at a layer before the attention product (the layer's own keys and values are
kept). Captures never perturb the pass; injection shapes are validated before
any compute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .types import AttentionRecord, AttentionSite

EMPTY_PLAN_FIELDS = (frozenset(), frozenset(), {})


@dataclass(frozen=True)
class TapPlan:
    capture_cross: FrozenSet[int] = frozenset()
    capture_self_q: FrozenSet[int] = frozenset()
    inject_q: Mapping[int, np.ndarray] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not (self.capture_cross or self.capture_self_q or self.inject_q)


EMPTY_PLAN = TapPlan()


def validate_plan(plan: TapPlan, backend) -> None:
    """Check every referenced layer and injected tensor against the backend.

    Raises ConfigError on an unknown layer, a kind mismatch, or an injection
    tensor that does not match the layer's (heads, n, d_head).
    """
    kinds = backend.layer_kinds
    resolutions = backend.layer_resolutions

    for layer in sorted(plan.capture_cross):
        _check_layer(layer, "cross", kinds)
    for layer in sorted(plan.capture_self_q):
        _check_layer(layer, "self", kinds)
    for layer, tensor in plan.inject_q.items():
        _check_layer(layer, "self", kinds)
        h, w = resolutions[layer]
        expected = (backend.heads, h * w, backend.head_dim)
        if tuple(tensor.shape) != expected:
            raise ConfigError(
                f"injected query at layer {layer} has shape {tuple(tensor.shape)}, "
                f"expected {expected}"
            )
        if not np.all(np.isfinite(tensor)):
            raise ConfigError(f"injected query at layer {layer} contains non-finite values")


def _check_layer(layer: int, kind: str, kinds: Mapping[int, str]) -> None:
    if layer not in kinds:
        raise ConfigError(f"layer {layer} does not exist (backend has {len(kinds)} layers)")
    if kinds[layer] != kind:
        raise ConfigError(f"layer {layer} is a {kinds[layer]}-attention layer, not {kind}")


class CaptureSink:
    """Collects attention records during one denoise step, in execution order."""

    def __init__(self, step: int, plan: TapPlan):
        self.step = step
        self.plan = plan
        self.records: List[AttentionRecord] = []

    def offer_cross(self, layer: int, attn_probs: np.ndarray) -> None:
        if layer in self.plan.capture_cross:
            site = AttentionSite(step=self.step, layer=layer, kind="cross")
            self.records.append(AttentionRecord(site=site, cross_map=attn_probs.copy()))

    def offer_self_q(self, layer: int, q: np.ndarray) -> None:
        if layer in self.plan.capture_self_q:
            site = AttentionSite(step=self.step, layer=layer, kind="self")
            self.records.append(AttentionRecord(site=site, self_query=q.copy()))


def full_capture_plan(backend, inject_q: Mapping[int, np.ndarray] | None = None) -> TapPlan:
    """A plan capturing every cross map and self query the backend has."""
    kinds = backend.layer_kinds
    return TapPlan(
        capture_cross=frozenset(l for l, k in kinds.items() if k == "cross"),
        capture_self_q=frozenset(l for l, k in kinds.items() if k == "self"),
        inject_q=dict(inject_q or {}),
    )


def dump_records(records: Sequence[AttentionRecord], out_dir: str | Path) -> Path:
    """Write records as one .npy per (step, layer, kind) plus an index manifest.

    Appends to an existing dump directory; the manifest is rewritten whole.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.json"
    entries = []
    if index_path.exists():
        entries = json.loads(index_path.read_text())["entries"]
    for record in records:
        site = record.site
        name = f"step{site.step:03d}_layer{site.layer:02d}_{site.kind}.npy"
        np.save(out_dir / name, record.tensor)
        entries.append(
            {
                "step": site.step,
                "layer": site.layer,
                "kind": site.kind,
                "file": name,
                "shape": list(record.tensor.shape),
            }
        )
    index_path.write_text(json.dumps({"entries": entries}, indent=1))
    return out_dir


def load_records(dump_dir: str | Path) -> List[AttentionRecord]:
    """Rehydrate records from a dump directory written by ``dump_records``."""
    dump_dir = Path(dump_dir)
    index_path = dump_dir / "index.json"
    if not index_path.exists():
        raise ConfigError(f"no tensor index at {index_path}")
    records = []
    for entry in json.loads(index_path.read_text())["entries"]:
        tensor = np.load(dump_dir / entry["file"])
        site = AttentionSite(step=entry["step"], layer=entry["layer"], kind=entry["kind"])
        if entry["kind"] == "cross":
            records.append(AttentionRecord(site=site, cross_map=tensor))
        else:
            records.append(AttentionRecord(site=site, self_query=tensor))
    return records
