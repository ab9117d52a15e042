import numpy as np
import pytest

from hitok import codebook, msrq, toycodec


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_schedule() -> msrq.ScaleSchedule:
    """ρ = (1, 2, 4, 8) over scales (1/4, 1/2, 1): 128-pixel images, 85 tokens."""
    return msrq.ScaleSchedule((1, 2, 4, 8), (0.25, 0.5, 1.0))


@pytest.fixture
def codec() -> toycodec.PatchCodec:
    return toycodec.PatchCodec()


@pytest.fixture
def l2_codebook(rng: np.random.Generator) -> codebook.Codebook:
    """32 random codes of dimension 32, plus the zero vector at index 0."""
    vectors = rng.normal(size=(32, 32))
    vectors[0] = 0.0
    return codebook.Codebook(vectors, codebook.Metric.L2)
