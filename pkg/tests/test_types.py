import numpy as np
import pytest

from layoutctl.errors import ConfigError
from layoutctl.types import (
    AttentionRecord,
    AttentionSite,
    LayoutParams,
    MaskGrid,
    PromptSpec,
    RunConfig,
    grid_shape_for_layer,
    scaled_params_for_grid,
)


class TestPromptSpec:
    def test_object_token_bounds(self):
        PromptSpec(text="a cat", token_ids=(0, 5, 1), object_tokens=((1, "cat"),))
        with pytest.raises(ConfigError):
            PromptSpec(text="a cat", token_ids=(0, 5, 1), object_tokens=((3, "cat"),))
        with pytest.raises(ConfigError):
            PromptSpec(text="a cat", token_ids=(0, 5, 1), object_tokens=((-1, "cat"),))


class TestLayoutParams:
    def test_defaults_are_identity(self):
        p = LayoutParams(token_index=0)
        assert p.is_identity_transform
        assert p.eta == 0.2

    def test_eta_bounds(self):
        LayoutParams(token_index=0, eta=0.0)
        LayoutParams(token_index=0, eta=1.0)
        for bad in (-0.01, 1.01):
            with pytest.raises(ConfigError):
                LayoutParams(token_index=0, eta=bad)

    def test_scale_positive(self):
        with pytest.raises(ConfigError):
            LayoutParams(token_index=0, scale=0.0)
        with pytest.raises(ConfigError):
            LayoutParams(token_index=0, scale=-1.0)

    def test_drop_forbids_transform(self):
        LayoutParams(token_index=0, drop=True)
        for kwargs in ({"dx": 1.0}, {"dy": -2.0}, {"theta": 90.0}, {"scale": 2.0}):
            with pytest.raises(ConfigError):
                LayoutParams(token_index=0, drop=True, **kwargs)

    def test_full_turn_is_identity(self):
        assert LayoutParams(token_index=0, theta=360.0).is_identity_transform
        assert not LayoutParams(token_index=0, theta=90.0).is_identity_transform

    def test_roundtrip_through_dict(self):
        p = LayoutParams(token_index=3, dx=1.5, dy=-2.0, theta=90.0, scale=0.5, eta=0.3)
        q = LayoutParams(**{
            "token_index": p.token_index, "dx": p.dx, "dy": p.dy,
            "theta": p.theta, "scale": p.scale, "drop": p.drop, "eta": p.eta,
        })
        assert p == q


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.total_steps == 30
        assert cfg.t_star == 15
        assert cfg.guidance_scale == 7.5
        assert cfg.layer_window == (0, 15)

    def test_controlled_steps_semantics(self):
        # control is active for the first t_star steps, 0-based from the
        # noisiest step
        assert list(RunConfig(total_steps=30, t_star=0).controlled_steps()) == []
        assert list(RunConfig(total_steps=30, t_star=15).controlled_steps()) == list(range(15))
        assert list(RunConfig(total_steps=30, t_star=30).controlled_steps()) == list(range(30))

    def test_t_star_bounds(self):
        with pytest.raises(ConfigError):
            RunConfig(total_steps=10, t_star=11)
        with pytest.raises(ConfigError):
            RunConfig(total_steps=10, t_star=-1)

    def test_window_ordering(self):
        with pytest.raises(ConfigError):
            RunConfig(layer_window=(5, 2))


class TestAttentionTypes:
    def test_site_validation(self):
        AttentionSite(step=0, layer=0, kind="self")
        with pytest.raises(ConfigError):
            AttentionSite(step=-1, layer=0, kind="self")
        with pytest.raises(ConfigError):
            AttentionSite(step=0, layer=0, kind="banana")

    def test_record_payload_matches_kind(self):
        site_s = AttentionSite(step=0, layer=0, kind="self")
        site_c = AttentionSite(step=0, layer=1, kind="cross")
        q = np.zeros((2, 4, 8), dtype=np.float32)
        m = np.full((2, 4, 3), 1 / 3, dtype=np.float32)
        assert AttentionRecord(site=site_s, self_query=q).tensor is not None
        assert AttentionRecord(site=site_c, cross_map=m).tensor is not None
        with pytest.raises(ConfigError):
            AttentionRecord(site=site_s, cross_map=m)
        with pytest.raises(ConfigError):
            AttentionRecord(site=site_c, self_query=q)
        with pytest.raises(ConfigError):
            AttentionRecord(site=site_s)
        with pytest.raises(ConfigError):
            AttentionRecord(site=site_s, self_query=q, cross_map=m)

    def test_record_wants_3d(self):
        site = AttentionSite(step=0, layer=0, kind="self")
        with pytest.raises(ConfigError):
            AttentionRecord(site=site, self_query=np.zeros((4, 8), dtype=np.float32))


class TestMaskGrid:
    def test_binary_only(self):
        MaskGrid(0, np.array([[0, 1], [1, 0]], dtype=np.uint8), source_layer=0)
        with pytest.raises(ConfigError):
            MaskGrid(0, np.array([[0, 2]], dtype=np.uint8), source_layer=0)
        with pytest.raises(ConfigError):
            MaskGrid(0, np.array([[0.5]]), source_layer=0)

    def test_equality_by_content(self):
        a = MaskGrid(0, np.eye(3, dtype=np.uint8), source_layer=0)
        b = MaskGrid(0, np.eye(3, dtype=np.uint8), source_layer=0)
        c = MaskGrid(0, np.zeros((3, 3), dtype=np.uint8), source_layer=0)
        assert a == b
        assert a != c


class TestGridShape:
    def test_lookup(self, small_backend):
        assert grid_shape_for_layer(0, small_backend) == (8, 8)
        assert grid_shape_for_layer(3, small_backend.layer_resolutions) == (4, 4)

    def test_unknown_layer(self, small_backend):
        with pytest.raises(ConfigError):
            grid_shape_for_layer(99, small_backend)

    def test_sequence_length_factorization(self, small_backend):
        # layer 0 runs on 64 feature vectors laid out as an 8x8 grid
        h, w = grid_shape_for_layer(0, small_backend)
        assert h * w == 64 and (h, w) == (8, 8)


class TestScaledParams:
    def test_halving_resolution_halves_translation(self):
        p = LayoutParams(token_index=0, dx=4.0, dy=-2.0, theta=90.0, scale=2.0)
        q = scaled_params_for_grid(p, (16, 16), (8, 8))
        assert (q.dx, q.dy) == (2.0, -1.0)
        assert q.theta == p.theta and q.scale == p.scale and q.eta == p.eta

    def test_same_shape_is_noop(self):
        p = LayoutParams(token_index=0, dx=4.0)
        assert scaled_params_for_grid(p, (16, 16), (16, 16)) is p

    def test_anisotropic(self):
        p = LayoutParams(token_index=0, dx=4.0, dy=4.0)
        q = scaled_params_for_grid(p, (16, 8), (4, 4))
        assert (q.dx, q.dy) == (2.0, 1.0)
