"""Shared fixtures: the tiny preset and a generated tiny world."""

from pathlib import Path

import numpy as np
import pytest

from geounify.config import preset_config
from geounify.dataset import Dataset
from geounify.fixtures import FixtureSpec, generate_fixtures
from geounify.model import GeoUnifyModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return preset_config("tiny", {"paths.data": str(root / "data"), "paths.out": str(root / "out")})


@pytest.fixture(scope="session")
def tiny_root(tiny_cfg) -> Path:
    root = Path(tiny_cfg.paths["data"])
    generate_fixtures(FixtureSpec.from_config(tiny_cfg), root)
    return root


@pytest.fixture(scope="session")
def tiny_ds(tiny_root) -> Dataset:
    return Dataset.load(tiny_root)


@pytest.fixture
def tiny_model(tiny_cfg) -> GeoUnifyModel:
    return GeoUnifyModel(tiny_cfg, np.random.default_rng(tiny_cfg.seed))
