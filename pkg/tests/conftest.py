import numpy as np
import pytest

from nclkit import Modality, l2_normalize


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def unit_set(rng, n, d, modality=Modality.TEXT):
    """Random unit-norm embedding set."""
    return l2_normalize(rng.normal(size=(n, d)), modality)
