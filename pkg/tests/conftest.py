import numpy as np
import pytest
from hypothesis import settings

from rpnet.data import ShapeCorpusConfig, generate_corpus

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Twenty 32x32 images, enough for smoke training and CLI runs."""
    out = tmp_path_factory.mktemp("tiny")
    cfg = ShapeCorpusConfig(num_images=20, image_size=32, min_radius=5, max_radius=9, seed=5)
    return generate_corpus(cfg, out)


@pytest.fixture
def tiny_train():
    """Config overrides for a seconds-long training run."""
    return dict(unified_channels=8, channels=[4, 8, 8], epochs=1)
