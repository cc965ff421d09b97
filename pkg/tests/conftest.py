import sys

import numpy as np
import pytest

from simaug_lab.world import generate_dataset


def small_config(n_train=24, n_test=8):
    return {"train": {"n": n_train}, "test": {"n": n_test}}


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(small_config(), 5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_estimator(small_data):
    """Small double-precision model trained briefly on the small dataset."""
    from simaug_lab.estimator import TrajectoryForecaster

    est = TrajectoryForecaster(hidden_size=8, mlp_hidden=8, batch_size=8, n_steps=150, dtype="float64",
                               random_state=0)
    return est.fit(small_data["train"])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
