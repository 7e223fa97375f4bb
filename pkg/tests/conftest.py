import numpy as np
import pytest
from hypothesis import settings

from vstream import FeatureMap, Tier

settings.register_profile("vstream", database=None, max_examples=25,
                          deadline=None)
settings.load_profile("vstream")


def mk_low(index, values):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 1:
        values = values.reshape(1, 1, -1)
    return FeatureMap(frame_index=index, grid_h=values.shape[0],
                      grid_w=values.shape[1], dim=values.shape[2],
                      values=values, tier=Tier.LOW)


def mk_high(index, values):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 1:
        values = values.reshape(1, 1, -1)
    return FeatureMap(frame_index=index, grid_h=values.shape[0],
                      grid_w=values.shape[1], dim=values.shape[2],
                      values=values, tier=Tier.HIGH)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=1234))
