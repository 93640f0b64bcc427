import numpy as np
import pytest

from fuseseg.dataio import IGNORE, FrameBundle
from fuseseg.model import ModelConfig


def random_bundle(rng: np.random.Generator, height: int = 16, width: int = 16,
                  ignore_fraction: float = 0.1) -> FrameBundle:
    """Arbitrary in-range channels and labels, for contracts that do not
    depend on scene structure."""
    labels = rng.integers(0, 4, size=(height, width)).astype(np.uint8)
    labels[rng.uniform(size=(height, width)) < ignore_fraction] = IGNORE
    return FrameBundle(
        rgb=rng.uniform(0, 1, (height, width, 3)),
        thermal=rng.uniform(0, 1, (height, width)),
        lidar=rng.uniform(0, 1, (height, width)),
        labels=labels,
        valid={"rgb": True, "thermal": True, "lidar": True},
        timestamp=0,
    ).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(stages=2, channels=(4, 6), height=16, width=16)
