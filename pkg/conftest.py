"""
Shared fixtures for the test suite
"""
import numpy as np
import pytest
from scipy import ndimage

from config import SynthConfig, TrainConfig
from datasets import synth_generate, write_dataset


@pytest.fixture
def fixture_image():
    """Deterministic 64×64 textured image with values in [0.1, 0.65]"""
    rng = np.random.default_rng(1234)
    yy, xx = np.mgrid[0:64, 0:64] / 63.0
    base = 0.3 + 0.15 * xx + 0.08 * np.sin(2.0 * np.pi * 3.0 * yy)
    texture = ndimage.gaussian_filter(rng.normal(size=(64, 64)), sigma=1.0)
    texture = 0.08 * texture / np.abs(texture).max()
    return np.clip(base + texture, 0.1, 0.65).astype(np.float32)


@pytest.fixture
def small_synth_config():
    return SynthConfig(count=10, size=32, seed=0, test_fraction=0.2)


@pytest.fixture
def small_samples(small_synth_config):
    return synth_generate(small_synth_config)


@pytest.fixture
def synth_dataset(tmp_path, small_samples, small_synth_config):
    root = tmp_path / "data"
    write_dataset(small_samples, root, small_synth_config.test_fraction)
    return root


@pytest.fixture
def tiny_train_config():
    return TrainConfig(steps=3, batch_size=2, crop=32, eval_every=0, log_every=1, seed=0)
