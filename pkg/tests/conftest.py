import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from cuefeed.config import default_config
from cuefeed.data import training_sample_from_scene
from cuefeed.detectors import HoiVocabulary
from cuefeed.scenes import DEFAULT_OBJECTS, DEFAULT_VERBS, scene_bank

# The container has one slow CPU core and torch's first op in a process
# pays a dispatch warm-up; wall-clock deadlines would only add flake.
settings.register_profile(
    "ci", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")

torch.manual_seed(0)


@pytest.fixture(scope="session")
def vocab() -> HoiVocabulary:
    return HoiVocabulary.from_products(DEFAULT_VERBS, DEFAULT_OBJECTS)


@pytest.fixture(scope="session")
def bank():
    return scene_bank(6, seed=303, size=48)


@pytest.fixture(scope="session")
def samples(bank, vocab):
    return [training_sample_from_scene(img, ann, vocab) for img, ann in bank]


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def tiny_train_config():
    """Desk-scale config: 6 scenes, 4-step phase, full 1000-step schedule."""
    config = default_config()
    config.batch_size = 2
    config.phases[0].steps = 4
    config.phases[0].source.count = 6
    config.phases[0].source.size = 48
    config.phases[0].source.seed = 11
    return config.validate()
