import numpy as np
import pytest

from caafp.data import synth_population
from caafp.nn import ArchitectureSpec


@pytest.fixture
def tiny_arch():
    return ArchitectureSpec(input_len=16, channels=2, num_classes=3, filters=(4, 3), kernel=3,
                            hidden=5, conv_dropout=(0.3, 0.3), hidden_dropout=0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_population():
    # 3 latent groups x 2 clients, short windows: fast enough for multi-round runs
    return synth_population(3, 2, 36, 16, 2, 3, seed=0, noise=0.1)


_criteria: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; it is printed now and again in the run summary."""
    def record(number, passed, detail, status=None):
        line = f"[{status or ('PASS' if passed else 'FAIL')}] criterion {number}: {detail}"
        _criteria.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
