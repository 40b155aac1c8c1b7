import numpy as np
import pytest

from fedretrieval.model import ModelConfig, init_params


def random_batch(rng, vocab, size, window=10):
    """Contexts with a random number of left pads and labels drawn from 1..vocab-1."""
    contexts = rng.integers(1, vocab, size=(size, window))
    for i, pads in enumerate(rng.integers(0, window, size=size)):
        contexts[i, :pads] = 0
    labels = rng.integers(1, vocab, size=size)
    return contexts, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_table():
    return init_params(ModelConfig(vocab=50, dim=8), seed=7)


CRITERIA = {}


def record_criterion(number, ok, detail):
    """Remember an acceptance verdict so the terminal summary can list it."""
    CRITERIA[number] = ("PASS" if ok else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        verdict, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict} {detail}")
