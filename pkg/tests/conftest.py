import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rotquant.tensor import make_rng

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance results, filled by test_acceptance and echoed in the summary
ACCEPTANCE_LINES = {}


@pytest.fixture
def rng():
    return make_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def random_vector(rng, n, scale=1.0):
    return rng.standard_normal(n) * scale


def assert_orthogonal(q, tol=1e-8):
    q = np.asarray(q)
    assert np.abs(q.T @ q - np.eye(q.shape[1])).max() <= tol
