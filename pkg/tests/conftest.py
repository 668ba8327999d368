import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hypermoco.forward import MotionParams, make_shot_pattern
from hypermoco.sim import corpus_pattern, resolve_corpus_config, simulate_record

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def pattern():
    return make_shot_pattern(64, 6, 3, 8)


@pytest.fixture(scope="session")
def noiseless_cfg():
    return resolve_corpus_config({"noise_frac": 0.0})


@pytest.fixture(scope="session")
def noisy_cfg():
    return resolve_corpus_config({})


@pytest.fixture(scope="session")
def record(noiseless_cfg):
    return simulate_record(noiseless_cfg, corpus_pattern(noiseless_cfg), 1234, "fixture", onset=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_motion(gen, S=6, trans=5.0, rot=5.0):
    lim = np.array([trans, trans, rot])
    return MotionParams(gen.uniform(-lim, lim, size=(S, 3)))


def crandn(gen, *shape):
    return gen.standard_normal(shape) + 1j * gen.standard_normal(shape)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
