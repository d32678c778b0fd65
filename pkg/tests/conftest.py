import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_blob():
    """Gaussian blob factory on a 64x64 grid, intensities [0, 200]."""

    def make(cx, cy, size=64, sigma=6.0, amp=200.0):
        y, x = np.mgrid[0:size, 0:size]
        return amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma**2))

    return make
