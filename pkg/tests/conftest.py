import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_bundle():
    from uwbdar.model import EncoderConfig, random_bundle

    return random_bundle(EncoderConfig(d=8, layers=1, heads=2), seed=3)


@pytest.fixture(scope="session")
def toy_bundle(request):
    """The d=64 toy-pretrained bundle; pre-training runs once per cache directory."""
    from uwbdar.dataio import load_bundle, save_bundle
    from uwbdar.model import EncoderConfig
    from uwbdar.training import toy_pretrain

    path = request.config.cache.mkdir("uwbdar") / "toy_bundle_d64.uwbb"
    if path.exists():
        return load_bundle(path)
    bundle, _, _ = toy_pretrain(EncoderConfig(d=64))
    save_bundle(bundle, path)
    return bundle


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
