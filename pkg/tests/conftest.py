import numpy as np
import pytest

from densepcr.data import generate_dataset, load_manifest, load_split
from densepcr.model import ModelConfig


def small_config(**overrides) -> ModelConfig:
    """Reduced widths with the desk topology; fast enough for per-test training."""
    base = dict(image_size=16, encoder_channels=(4, 8), encoder_strides=(2, 2), latent_dim=32,
                decoder_hidden=(32, 32), base_n=16, global_mlp=(8, 16), local_mlp=(8, 16),
                aggregation_mlp=(16, 16), ball_radius=(0.3, 0.15), preset="small")
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(root, 3, base_n=16, views=2, image_size=16, seed=5)
    return load_manifest(root)


@pytest.fixture(scope="session")
def small_shapes(small_dataset):
    return load_split(small_dataset, "all")


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_ds")
    generate_dataset(root, 2, base_n=256, views=2, image_size=32, seed=0)
    return load_manifest(root)
