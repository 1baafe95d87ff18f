import numpy as np
import pytest

from pcxp.config import DataConfig, EvalConfig, Settings, model_preset, train_preset
from pcxp.geom import gen_dataset, load_dataset


@pytest.fixture
def desk_settings():
    return Settings(
        model=model_preset("desk"),
        train=train_preset("desk"),
        data=DataConfig(),
        eval=EvalConfig(),
        paths={},
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small dataset shared by tests that only need plausible samples."""
    root = tmp_path_factory.mktemp("tinyds")
    gen_dataset(str(root), seed=5, train_per_class=4, test_per_class=2)
    return load_dataset(str(root))


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-11)


@pytest.fixture
def f64_rng():
    return np.random.default_rng(12345)
