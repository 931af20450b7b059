import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from masked_ntk.model import Dataset, NetworkState

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_instance(seed, n, d, m, w_scale=1.0):
    """Unit-norm inputs, N(0, w_scale^2) weights, random signs, targets in [-1, 1]."""
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    W = r.standard_normal((m, d)) * w_scale
    a = np.where(r.random(m) < 0.5, -1.0, 1.0)
    y = r.uniform(-1.0, 1.0, n)
    return NetworkState(W, a), Dataset(X, y)


@pytest.fixture
def instance():
    return make_instance


def within_se(value, mean, se, n_se=4.0):
    value, mean, se = (np.asarray(t, dtype=np.float64) for t in (value, mean, se))
    return bool(np.all(np.abs(value - mean) <= n_se * se))


INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and echo it at once."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
