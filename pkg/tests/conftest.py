import json
import sys
import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_close(a, b, rel, abs_floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.all(np.abs(a - b) <= rel * np.maximum(np.abs(b), abs_floor / rel))


TINY = {
    "data.n": 400, "bias.pool": 3,
    "emulator.epochs": 3, "emulator.hidden": [16, 16], "emulator.n_freqs": 2, "emulator.batch_size": 100,
    "sample.n": 300, "sample.chunk_size": 150,
    "ebm.n": 300, "ebm.epochs": 3, "ebm.hidden": [16, 16], "ebm.n_freqs": 2, "ebm.batch_size": 100,
    "metrics.n_reference": 1000, "metrics.n_holdout": 200, "metrics.nll_batch": 100,
    "reweight.bins": 20, "ode.atol": 1e-4, "ode.rtol": 1e-4,
}


@pytest.fixture
def tiny_config():
    from boltznce.config import load_config

    return load_config("two_well", [f"{k}={json.dumps(v)}" for k, v in TINY.items()])


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.report_lines():
        terminalreporter.write_line(line)
