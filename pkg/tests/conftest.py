import numpy as np
import pytest
from hypothesis import settings, HealthCheck

from cardiospike.data import SynthConfig, synth_corpus
from cardiospike.model import DetectorConfig, init_params

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture(scope="session")
def tiny_corpus():
    """A handful of short records, enough to learn on quickly."""
    cfg = SynthConfig(num_records=6, samples_per_record=240, seed=42)
    return synth_corpus(cfg)


@pytest.fixture(scope="session")
def small_config():
    return DetectorConfig(base_channels=4, hidden_channels=5, side_channels=6,
                          layers_per_block=2, num_stacks=2, segment_len=16, pad=2)


@pytest.fixture(scope="session")
def small_params(small_config):
    return init_params(small_config, seed=7)


@pytest.fixture(scope="session")
def default_params():
    return init_params(DetectorConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
