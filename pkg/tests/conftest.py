import sys

import numpy as np
import pytest

from domainadaptor.nn import Model, small_convnet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_buffers(model: Model, rng) -> Model:
    """Give a fresh model plausible running statistics."""
    for name, buf in model.buffers.items():
        if name.endswith("running_mean"):
            model.buffers[name] = rng.normal(0, 0.3, buf.shape).astype(model.dtype)
        else:
            model.buffers[name] = rng.uniform(0.5, 2.0, buf.shape).astype(model.dtype)
    return model


@pytest.fixture
def model64(rng):
    return randomize_buffers(Model(small_convnet(num_classes=3), seed=7, dtype=np.float64), rng)


@pytest.fixture
def model32(rng):
    return randomize_buffers(Model(small_convnet(), seed=3), rng)


@pytest.fixture
def images32(rng):
    return rng.uniform(0, 1, (8, 3, 12, 12)).astype(np.float32)


_CRITERIA = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    _CRITERIA[n] = line
    print(line, file=sys.__stderr__, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
