import numpy as np
import pytest

from layoutctl.backends.toy import build_toy_backend
from layoutctl.types import AttentionRecord, AttentionSite, PromptSpec


@pytest.fixture(scope="session")
def backend():
    """Default toy backend: 4 resolutions, 16 attention layers."""
    return build_toy_backend(seed=0)


@pytest.fixture(scope="session")
def small_backend():
    """Two-resolution toy backend, 8 layers, cheap enough for tight loops."""
    return build_toy_backend(seed=0, resolutions=[(8, 8), (4, 4)], d=32)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def make_prompt():
    def _make(backend, text, objects=()):
        ids, _ = backend.tokenize(text)
        return PromptSpec(text=text, token_ids=ids, object_tokens=tuple(objects))

    return _make


def synthetic_cross_record(rng, layer, shape, n_tokens, step=0):
    """A random but well-formed cross-attention record (rows sum to 1)."""
    h, w = shape
    raw = rng.random((2, h * w, n_tokens)) + 1e-3
    probs = raw / raw.sum(axis=-1, keepdims=True)
    site = AttentionSite(step=step, layer=layer, kind="cross")
    return AttentionRecord(site=site, cross_map=probs)


@pytest.fixture()
def prompt(backend):
    ids, _ = backend.tokenize("a red cube beside a blue ball")
    return PromptSpec(text="a red cube beside a blue ball", token_ids=ids)
