import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtrans.engine import Tape, backward
from mtrans.model import MTransConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TOY = MTransConfig(H=32, W=32, C=4, P=8, n_enc=2, heads=2)
TINY = MTransConfig(H=16, W=16, C=4, P=8, n_enc=1, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f over every entry of x (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def tape_grads(build, arrays: dict):
    """Gradients of build(tensors) -> scalar Tensor for every named input."""
    tape = Tape()
    ts = tape.bind(arrays)
    return backward(tape, build(ts))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
