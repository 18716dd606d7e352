import json

import numpy as np
import pytest

from layoutctl.errors import ConfigError, TokenNotFoundError
from layoutctl.segmentation import (
    DEFAULT_TIMESTEP,
    resolve_token_queries,
    segment_image,
)


@pytest.fixture()
def image(small_backend):
    rng = np.random.default_rng(42)
    shape = small_backend.codec.image_shape
    return np.clip(rng.standard_normal(shape), -1.0, 1.0).astype(np.float32)


class TestResolveTokenQueries:
    def test_word_and_index_queries(self, small_backend):
        prompt, indices = resolve_token_queries(
            small_backend, "a red cube beside a ball", ["cube", 5, "2"]
        )
        assert indices == [3, 5, 2]
        assert prompt.object_tokens == ((3, "cube"), (5, "a"), (2, "red"))

    def test_unknown_word(self, small_backend):
        with pytest.raises(TokenNotFoundError):
            resolve_token_queries(small_backend, "a red cube", ["zebra"])

    def test_index_out_of_range(self, small_backend):
        with pytest.raises(ConfigError):
            resolve_token_queries(small_backend, "a red cube", [99])
        with pytest.raises(ConfigError):
            resolve_token_queries(small_backend, "a red cube", ["-1"])


class TestSegmentImage:
    def test_outputs_and_no_added_noise(self, small_backend, image):
        result = segment_image(small_backend, image, "a red cube", ["cube"])
        assert result.added_noise == 0.0
        assert result.timestep == DEFAULT_TIMESTEP
        assert sorted(result.masks) == [3]
        # latent-resolution mask at the finest cross layer
        assert result.masks[3].shape == (8, 8)
        # image-resolution mask matches codec image size
        assert result.image_masks[3].shape == small_backend.codec.image_shape[1:]
        assert set(np.unique(result.image_masks[3])) <= {0, 1}
        assert result.query_magnitude.shape == (8, 8)
        assert np.all(result.query_magnitude >= 0)

    def test_deterministic(self, small_backend, image):
        a = segment_image(small_backend, image, "a red cube", ["cube"])
        b = segment_image(small_backend, image, "a red cube", ["cube"])
        assert np.array_equal(a.masks[3].grid, b.masks[3].grid)
        assert np.array_equal(a.query_magnitude, b.query_magnitude)

    def test_eta_monotone(self, small_backend, image):
        low = segment_image(small_backend, image, "a red cube", ["cube"], eta=0.1)
        high = segment_image(small_backend, image, "a red cube", ["cube"], eta=0.6)
        lo, hi = low.masks[3].grid, high.masks[3].grid
        # raising the threshold can only shrink the mask
        assert np.all(hi <= lo)

    def test_eta_zero_covers_everything(self, small_backend, image):
        result = segment_image(small_backend, image, "a red cube", ["cube"], eta=0.0)
        assert result.masks[3].grid.all()
        assert result.token_stats[3]["coverage"] == 1.0

    def test_stats_sane(self, small_backend, image):
        result = segment_image(small_backend, image, "a red cube", ["cube"], eta=0.3)
        stats = result.token_stats[3]
        assert 0.0 <= stats["coverage"] <= 1.0
        grid = result.masks[3].grid
        if grid.any() and not grid.all():
            assert stats["query_norm_object"] > 0
            assert stats["query_norm_background"] > 0

    def test_multiple_tokens(self, small_backend, image):
        result = segment_image(
            small_backend, image, "a red cube beside a ball", ["cube", "ball"]
        )
        assert sorted(result.masks) == [3, 6]
        assert sorted(result.image_masks) == [3, 6]

    def test_mask_source_layer_restriction(self, small_backend, image):
        full = segment_image(small_backend, image, "a red cube", ["cube"], eta=0.4)
        only_first = segment_image(
            small_backend, image, "a red cube", ["cube"], eta=0.4,
            mask_source_layers=[1],
        )
        assert full.meta["mask_source_layers"] == [1, 3, 5, 7]
        assert only_first.meta["mask_source_layers"] == [1]
        with pytest.raises(ConfigError):
            segment_image(
                small_backend, image, "a red cube", ["cube"], mask_source_layers=[0]
            )

    def test_parameter_validation(self, small_backend, image):
        with pytest.raises(ConfigError):
            segment_image(small_backend, image, "a red cube", ["cube"], eta=1.5)
        with pytest.raises(ConfigError):
            segment_image(small_backend, image, "a red cube", ["cube"], timestep=1000)

    def test_to_dict_is_strict_json(self, small_backend, image):
        result = segment_image(small_backend, image, "a red cube", ["cube"], eta=0.0)
        # eta 0 -> all-object mask -> background stat is NaN -> must serialize
        # as null, not a bare NaN literal
        payload = json.dumps(result.to_dict(), allow_nan=False)
        back = json.loads(payload)
        assert back["tokens"]["3"]["query_norm_background"] is None
        assert back["added_noise"] == 0.0
        # ties on area resolve to the first self layer in index order
        assert back["query_layer"] == 0
