import numpy as np
import pytest

from mxquant.formats import FormatConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_outlier_instance(seed=0, n=128, m=64, rows=128, factor=50.0):
    """Synthetic layer with extreme-outlier channels in 2 of the 4 blocks."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(rows, n))
    x[:, 40] *= factor  # inside block 1
    x[:, 100] *= factor  # inside block 3
    w = r.normal(size=(m, n)) / np.sqrt(n)
    return x, w


W4A4KV16 = FormatConfig.from_name("W4A4KV16")
W4A8KV16 = FormatConfig.from_name("W4A8KV16")
NO_QUANT = FormatConfig(None, None, None)
