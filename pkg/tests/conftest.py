import os
from pathlib import Path

import numpy as np
import pytest

from nct.models import ConditionModel, load_generator, save_generator
from nct.training import PretrainConfig, pretrain_generator


def _cache_dir() -> Path | None:
    cache = os.environ.get("NCT_TEST_CACHE")
    if cache:
        p = Path(cache)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return None


@pytest.fixture(scope="session")
def generator_ckpt_path(tmp_path_factory):
    """Checkpoint of the eight-Gaussians base generator (pretrained once)."""
    cache = _cache_dir()
    path = (cache or tmp_path_factory.mktemp("gen")) / "generator_seed0.ckpt"
    if not path.exists():
        gen, _ = pretrain_generator(PretrainConfig(seed=0))
        save_generator(path, gen, rng_seed=0)
    return path


@pytest.fixture(scope="session")
def pretrained_generator(generator_ckpt_path):
    """Eight-Gaussians base generator shared by the statistical tests."""
    gen, _ = load_generator(generator_ckpt_path)
    return gen


@pytest.fixture(scope="session")
def quadrant_condition():
    return ConditionModel("quadrant-label")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
