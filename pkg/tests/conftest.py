import numpy as np
import pytest

from pareval.models import AffineModel, init_random


@pytest.fixture
def half_model():
    """Scalar ``f(s) = 0.5 s`` with ``s_0 = 1``."""
    return AffineModel([[0.5]], [0.0], [1.0])


@pytest.fixture
def gru4():
    return init_random("gru", 0, D=4, T=32)


def loop_residual(trace, model):
    out = np.empty_like(trace)
    prev = model.initial_state
    for k in range(trace.shape[0]):
        out[k] = trace[k] - model.step(k, prev)
        prev = trace[k]
    return out


ACCEPTANCE = {}


def record(number, ok, detail):
    """Store one acceptance outcome and fail the calling test if it did not hold."""
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
