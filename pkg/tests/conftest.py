import numpy as np
import pytest

from texqual.charts import CompositeChartSpec, DeadLeavesParams, gen_composite, gen_dead_leaves
from texqual.image import ImageF


@pytest.fixture(scope="session")
def dl_chart_512():
    """Medium dead-leaves chart shared across spectral/device tests."""
    return gen_dead_leaves(DeadLeavesParams(size=512, seed=7041))


@pytest.fixture(scope="session")
def dl_chart_1024():
    return gen_dead_leaves(DeadLeavesParams(size=1024, seed=7042))


@pytest.fixture(scope="session")
def composite_512():
    spec = CompositeChartSpec(size=512, seed=1311)
    chart, tiles = gen_composite(spec)
    return chart, tiles


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


@pytest.fixture()
def ramp_16(rng):
    return ImageF.from_array(rng.random((16, 16)))
