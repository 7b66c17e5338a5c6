import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_psd(rng, n, rank=3):
    """Gram matrices ``G G^H`` of random complex ``3 x rank`` factors."""
    g = rng.standard_normal((n, 3, rank)) + 1j * rng.standard_normal((n, 3, rank))
    return g @ np.conj(np.swapaxes(g, -1, -2))


def min_eig(c):
    return np.linalg.eigvalsh(c)[..., 0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
