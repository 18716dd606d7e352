import json

import numpy as np
import pytest

from layoutctl.errors import ConfigError
from layoutctl.masking import (
    create_mask,
    export_mask_png,
    normalized_token_map,
    resample_mask,
    resize_bilinear,
    resize_nearest,
    union_masks,
)
from layoutctl.types import AttentionRecord, AttentionSite, MaskGrid

from conftest import synthetic_cross_record


def bilinear_oracle(grid, to):
    """Scalar-loop bilinear resize, half-pixel centers, clamped edges.

    Columns interpolate before rows and the scale ratio is rounded once
    before the multiply, so the expression tree matches the vectorized
    implementation term for term and the comparison can stay bitwise.
    """
    sh, sw = grid.shape
    th, tw = to
    g = np.asarray(grid, dtype=np.float64)
    out = np.zeros(to, dtype=np.float64)
    for i in range(th):
        for j in range(tw):
            y = min(max((i + 0.5) * (sh / th) - 0.5, 0.0), sh - 1.0)
            x = min(max((j + 0.5) * (sw / tw) - 0.5, 0.0), sw - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, sh - 1), min(x0 + 1, sw - 1)
            fy, fx = y - y0, x - x0
            top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
            bot = g[y1, x0] * (1 - fx) + g[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def mask_oracle(records, token_index, eta, target_shape, resolutions):
    """Independent per-cell reimplementation of the mask law."""
    cross = sorted(
        (r for r in records if r.site.kind == "cross"), key=lambda r: r.site.layer
    )
    acc = np.zeros(target_shape, dtype=np.float64)
    for rec in cross:
        col = rec.cross_map[:, :, token_index].astype(np.float64).mean(axis=0)
        lo, hi = col.min(), col.max()
        col = (col - lo) / (hi - lo) if hi > lo else np.zeros_like(col)
        h, w = resolutions[rec.site.layer]
        acc += bilinear_oracle(col.reshape(h, w), target_shape)
    acc /= len(cross)
    return (acc >= eta).astype(np.uint8)


class TestResizeNearest:
    def test_checkerboard_downsample_all_zero(self):
        # 8x8 checkerboard (r+c) % 2 sampled at center-aligned indices
        # {1,3,5,7} lands on even parity everywhere
        grid = np.fromfunction(lambda r, c: (r + c) % 2, (8, 8)).astype(np.uint8)
        out = resize_nearest(grid, (4, 4))
        assert np.array_equal(out, np.zeros((4, 4), dtype=np.uint8))

    def test_hot_cell_upsample_block(self):
        grid = np.zeros((4, 4), dtype=np.uint8)
        grid[1, 2] = 1
        out = resize_nearest(grid, (8, 8))
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[2:4, 4:6] = 1
        assert np.array_equal(out, expected)

    def test_identity_at_same_size(self, rng):
        grid = (rng.random((5, 7)) > 0.5).astype(np.uint8)
        assert np.array_equal(resize_nearest(grid, (5, 7)), grid)


class TestResizeBilinear:
    def test_matches_scalar_oracle(self, rng):
        for _ in range(20):
            sh, sw = rng.integers(2, 9, size=2)
            th, tw = rng.integers(2, 9, size=2)
            grid = rng.random((sh, sw))
            got = resize_bilinear(grid, (int(th), int(tw)))
            want = bilinear_oracle(grid, (int(th), int(tw)))
            assert np.array_equal(got, want)

    def test_constant_grid_stays_constant(self):
        out = resize_bilinear(np.full((4, 4), 0.7), (9, 3))
        np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-12)

    def test_preserves_range(self, rng):
        grid = rng.random((6, 6))
        out = resize_bilinear(grid, (13, 5))
        assert out.min() >= grid.min() - 1e-12
        assert out.max() <= grid.max() + 1e-12


class TestNormalizedTokenMap:
    def test_head_mean_and_minmax(self, rng):
        rec = synthetic_cross_record(rng, layer=1, shape=(4, 4), n_tokens=5)
        got = normalized_token_map(rec, 2, (4, 4))
        col = rec.cross_map[:, :, 2].mean(axis=0)
        want = (col - col.min()) / (col.max() - col.min())
        assert np.array_equal(got, want.reshape(4, 4))
        assert got.min() == 0.0 and got.max() == 1.0

    def test_constant_column_maps_to_zeros(self):
        site = AttentionSite(step=0, layer=1, kind="cross")
        maps = np.full((2, 16, 3), 1 / 3, dtype=np.float64)
        rec = AttentionRecord(site=site, cross_map=maps)
        out = normalized_token_map(rec, 0, (4, 4))
        assert np.array_equal(out, np.zeros((4, 4)))

    def test_token_out_of_range(self, rng):
        rec = synthetic_cross_record(rng, layer=1, shape=(4, 4), n_tokens=5)
        with pytest.raises(IndexError):
            normalized_token_map(rec, 5, (4, 4))

    def test_shape_must_factor_length(self, rng):
        rec = synthetic_cross_record(rng, layer=1, shape=(4, 4), n_tokens=5)
        with pytest.raises(ConfigError):
            normalized_token_map(rec, 0, (3, 4))


class TestCreateMask:
    RESOLUTIONS = {1: (8, 8), 3: (4, 4), 5: (4, 4)}

    def records(self, rng, n_tokens=6):
        return [
            synthetic_cross_record(rng, layer, shape, n_tokens)
            for layer, shape in self.RESOLUTIONS.items()
        ]

    def test_matches_per_cell_oracle(self, rng):
        for _ in range(50):
            records = self.records(rng)
            eta = float(rng.uniform(0.05, 0.95))
            token = int(rng.integers(0, 6))
            got = create_mask(records, token, eta, 1, self.RESOLUTIONS)
            want = mask_oracle(records, token, eta, (8, 8), self.RESOLUTIONS)
            assert np.array_equal(got.grid, want)
            assert got.grid.dtype == np.uint8
            assert got.token_index == token

    def test_eta_zero_is_all_ones(self, rng):
        records = self.records(rng)
        mask = create_mask(records, 0, 0.0, 1, self.RESOLUTIONS)
        assert mask.grid.all()

    def test_eta_monotone(self, rng):
        # larger threshold never adds cells
        records = self.records(rng)
        prev = None
        for eta in (0.1, 0.3, 0.5, 0.7, 0.9):
            mask = create_mask(records, 1, eta, 1, self.RESOLUTIONS).grid
            if prev is not None:
                assert np.all(mask <= prev)
            prev = mask

    def test_capture_order_irrelevant(self, rng):
        records = self.records(rng)
        a = create_mask(records, 2, 0.4, 3, self.RESOLUTIONS)
        b = create_mask(records[::-1], 2, 0.4, 3, self.RESOLUTIONS)
        assert np.array_equal(a.grid, b.grid)

    def test_single_record_at_target_resolution(self, rng):
        rec = synthetic_cross_record(rng, 3, (4, 4), 5)
        got = create_mask([rec], 1, 0.5, 3, self.RESOLUTIONS)
        want = mask_oracle([rec], 1, 0.5, (4, 4), self.RESOLUTIONS)
        assert np.array_equal(got.grid, want)

    def test_rejects_empty_and_self_only(self, rng):
        with pytest.raises(ConfigError):
            create_mask([], 0, 0.5, 1, self.RESOLUTIONS)
        site = AttentionSite(step=0, layer=0, kind="self")
        rec = AttentionRecord(site=site, self_query=np.zeros((2, 4, 8), dtype=np.float32))
        with pytest.raises(ConfigError):
            create_mask([rec], 0, 0.5, 1, self.RESOLUTIONS)

    def test_eta_bounds(self, rng):
        records = self.records(rng)
        for bad in (-0.1, 1.1):
            with pytest.raises(ConfigError):
                create_mask(records, 0, bad, 1, self.RESOLUTIONS)


class TestResampleMask:
    def test_same_size_copy(self):
        m = MaskGrid(0, np.eye(4, dtype=np.uint8), source_layer=1)
        out = resample_mask(m, (4, 4))
        assert out == m
        assert out.grid is not m.grid

    def test_upsample_then_downsample_recovers(self, rng):
        grid = (rng.random((4, 4)) > 0.5).astype(np.uint8)
        m = MaskGrid(0, grid, source_layer=1)
        up = resample_mask(m, (8, 8))
        back = resample_mask(up, (4, 4))
        assert np.array_equal(back.grid, grid)

    def test_stays_binary(self, rng):
        grid = (rng.random((8, 8)) > 0.3).astype(np.uint8)
        out = resample_mask(MaskGrid(0, grid, source_layer=1), (5, 3))
        assert set(np.unique(out.grid)) <= {0, 1}


class TestUnionMasks:
    def test_or_semantics(self):
        a = MaskGrid(0, np.array([[1, 0], [0, 0]], dtype=np.uint8), source_layer=1)
        b = MaskGrid(1, np.array([[0, 0], [0, 1]], dtype=np.uint8), source_layer=1)
        u = union_masks([a, b])
        assert np.array_equal(u.grid, np.array([[1, 0], [0, 1]], dtype=np.uint8))
        assert u.token_index == -1  # mixed tokens

    def test_single_mask_keeps_token(self):
        a = MaskGrid(3, np.eye(2, dtype=np.uint8), source_layer=1)
        assert union_masks([a]).token_index == 3

    def test_union_with_self_is_identity(self, rng):
        grid = (rng.random((4, 4)) > 0.5).astype(np.uint8)
        a = MaskGrid(0, grid, source_layer=1)
        assert np.array_equal(union_masks([a, a]).grid, grid)

    def test_shape_mismatch(self):
        a = MaskGrid(0, np.zeros((2, 2), dtype=np.uint8), source_layer=1)
        b = MaskGrid(0, np.zeros((3, 3), dtype=np.uint8), source_layer=1)
        with pytest.raises(ConfigError):
            union_masks([a, b])


class TestExportMaskPng:
    def test_writes_png_and_sidecar(self, tmp_path):
        from PIL import Image

        grid = np.zeros((4, 4), dtype=np.uint8)
        grid[1:3, 1:3] = 1
        mask = MaskGrid(2, grid, source_layer=5)
        out = export_mask_png(
            mask, tmp_path / "m.png", eta=0.25, step=3, source_layers=[5, 1]
        )
        with Image.open(out) as im:
            arr = np.asarray(im)
        assert set(np.unique(arr)) == {0, 255}
        assert np.array_equal(arr == 255, grid.astype(bool))

        side = json.loads((tmp_path / "m.json").read_text())
        assert side["token_index"] == 2
        assert side["eta"] == 0.25
        assert side["step"] == 3
        assert side["source_layers"] == [1, 5]
