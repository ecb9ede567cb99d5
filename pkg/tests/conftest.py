import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from meddet_kit import numcore as nc

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _finite_and_precision():
    """Screen every op for NaN/Inf and restore the float width after each test."""
    old = nc.CHECK_FINITE
    nc.CHECK_FINITE = True
    bits = 64 if nc.get_dtype() == np.float64 else 32
    try:
        yield
    finally:
        nc.CHECK_FINITE = old
        nc.set_precision(bits)


@pytest.fixture
def f64():
    with nc.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
