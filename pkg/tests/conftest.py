import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_probs(rng, shape, low=0.01):
    """Softmax-free random class vectors with every entry >= ``low``."""
    raw = rng.uniform(0.0, 1.0, size=shape) + low * shape[0]
    p = raw / raw.sum(axis=0, keepdims=True)
    return np.clip(p, low, 1 - low)


def random_one_hot(rng, shape):
    labels = rng.integers(0, shape[0], size=shape[1:])
    return (np.arange(shape[0]).reshape(-1, *([1] * (len(shape) - 1))) == labels[None]).astype(np.float64)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
