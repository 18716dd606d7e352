import json

import numpy as np
import pytest

from layoutctl.errors import ConfigError
from layoutctl.taps import (
    EMPTY_PLAN,
    CaptureSink,
    TapPlan,
    dump_records,
    full_capture_plan,
    load_records,
    validate_plan,
)
from layoutctl.types import AttentionRecord, AttentionSite


class TestTapPlan:
    def test_empty_plan(self):
        assert EMPTY_PLAN.is_empty
        assert not TapPlan(capture_cross=frozenset({1})).is_empty

    def test_validate_unknown_layer(self, small_backend):
        with pytest.raises(ConfigError):
            validate_plan(TapPlan(capture_cross=frozenset({99})), small_backend)

    def test_validate_kind_mismatch(self, small_backend):
        # layer 0 is self-attention: cross capture there is an error
        with pytest.raises(ConfigError):
            validate_plan(TapPlan(capture_cross=frozenset({0})), small_backend)
        # layer 1 is cross-attention: self capture / injection are errors
        with pytest.raises(ConfigError):
            validate_plan(TapPlan(capture_self_q=frozenset({1})), small_backend)
        q = np.zeros((2, 64, 16), dtype=np.float32)
        with pytest.raises(ConfigError):
            validate_plan(TapPlan(inject_q={1: q}), small_backend)

    def test_validate_injection_shape(self, small_backend):
        good = np.zeros((2, 64, 16), dtype=np.float32)
        validate_plan(TapPlan(inject_q={0: good}), small_backend)
        for bad_shape in ((2, 64, 8), (1, 64, 16), (2, 16, 16)):
            with pytest.raises(ConfigError):
                validate_plan(
                    TapPlan(inject_q={0: np.zeros(bad_shape, dtype=np.float32)}),
                    small_backend,
                )

    def test_validate_rejects_nonfinite_injection(self, small_backend):
        q = np.zeros((2, 64, 16), dtype=np.float32)
        q[0, 0, 0] = np.nan
        with pytest.raises(ConfigError):
            validate_plan(TapPlan(inject_q={0: q}), small_backend)

    def test_full_capture_plan(self, small_backend):
        plan = full_capture_plan(small_backend)
        assert plan.capture_cross == frozenset(small_backend.cross_layers())
        assert plan.capture_self_q == frozenset(small_backend.self_layers())


class TestCaptureSink:
    def test_only_planned_layers_recorded(self, rng):
        plan = TapPlan(capture_cross=frozenset({1}), capture_self_q=frozenset({0}))
        sink = CaptureSink(step=3, plan=plan)
        q = rng.standard_normal((2, 16, 8)).astype(np.float32)
        probs = np.full((2, 16, 4), 0.25, dtype=np.float32)
        sink.offer_self_q(0, q)
        sink.offer_self_q(2, q)  # unplanned
        sink.offer_cross(1, probs)
        sink.offer_cross(3, probs)  # unplanned
        assert [(r.site.layer, r.site.kind) for r in sink.records] == [
            (0, "self"),
            (1, "cross"),
        ]
        assert all(r.site.step == 3 for r in sink.records)

    def test_records_are_copies(self, rng):
        plan = TapPlan(capture_self_q=frozenset({0}))
        sink = CaptureSink(step=0, plan=plan)
        q = rng.standard_normal((2, 16, 8)).astype(np.float32)
        sink.offer_self_q(0, q)
        q[:] = 0.0
        assert not np.array_equal(sink.records[0].self_query, q)


class TestDumpLoad:
    def make_records(self, rng, step=0):
        site_q = AttentionSite(step=step, layer=0, kind="self")
        site_c = AttentionSite(step=step, layer=1, kind="cross")
        q = rng.standard_normal((2, 16, 8)).astype(np.float32)
        m = rng.random((2, 16, 5)).astype(np.float32)
        m /= m.sum(axis=-1, keepdims=True)
        return [
            AttentionRecord(site=site_q, self_query=q),
            AttentionRecord(site=site_c, cross_map=m),
        ]

    def test_round_trip(self, tmp_path, rng):
        records = self.make_records(rng)
        dump_records(records, tmp_path)
        loaded = load_records(tmp_path)
        assert len(loaded) == 2
        for orig, back in zip(records, loaded):
            assert orig.site == back.site
            assert np.array_equal(orig.tensor, back.tensor)

    def test_manifest_contents(self, tmp_path, rng):
        dump_records(self.make_records(rng, step=0), tmp_path)
        dump_records(self.make_records(rng, step=1), tmp_path)
        manifest = json.loads((tmp_path / "index.json").read_text())
        assert len(manifest["entries"]) == 4
        entry = manifest["entries"][0]
        assert set(entry) >= {"step", "layer", "kind", "file", "shape"}
        for e in manifest["entries"]:
            assert (tmp_path / e["file"]).exists()
