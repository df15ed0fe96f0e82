import numpy as np
import pytest

from afq.block import BlockParams, PlacementConfig
from afq.quant import QuantConfig


@pytest.fixture(scope="session")
def toy_block():
    """The fixed seed-42 toy block: d=64, 4 heads."""
    return BlockParams.random(np.random.default_rng(42), 64, 4)


@pytest.fixture(scope="session")
def small_block():
    return BlockParams.random(np.random.default_rng(42), 16, 2)


@pytest.fixture(scope="session")
def toy_calib():
    rng = np.random.default_rng(0)
    return [rng.standard_normal((128, 64)) for _ in range(8)]


@pytest.fixture(scope="session")
def small_calib():
    rng = np.random.default_rng(0)
    return [rng.standard_normal((24, 16)) for _ in range(3)]


@pytest.fixture(scope="session")
def w4_placement():
    return PlacementConfig(
        pre_qkv="full",
        pre_out_proj="per-head",
        pre_fc1="full",
        weight_quant=QuantConfig(bits=4, learnable_clip=True),
    )
