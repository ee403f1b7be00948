import numpy as np
import pytest

from slicegate.data import GenConfig, generate_dataset
from slicegate.model import ModelConfig

TINY = ModelConfig(slice_hw=16, patch=4, d_v=8, d_p=8, d_proj=8, heads=2,
                   encoder_depth=1, decoder_depth=1, temporal_depth=4,
                   class_names=("blob", "lens"), dtype="float64")

TOY = ModelConfig()

# Full 64x64 slice geometry with a thin model: fast enough for smoke
# training while exercising the real data pipeline.
SMALL64 = ModelConfig(slice_hw=64, patch=8, d_v=16, d_p=16, d_proj=8, heads=2,
                      encoder_depth=1, decoder_depth=1, temporal_depth=4)

SMOKE_GEN = GenConfig(z=24, train_volumes=3, val_volumes=2, test_volumes=2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def small64_config():
    return SMALL64


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke_data")
    generate_dataset(out, seed=77, domains=("train-domain", "shift-domain"),
                     config=SMOKE_GEN)
    return out / "manifest.json"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
