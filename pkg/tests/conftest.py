import numpy as np
import pytest

from prn.geometry import random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_batch(rng, n_f=6, n_p=8, deform=0.5):
    """Rotated noisy copies of one random shape, each with a random offset."""
    base = rng.standard_normal((3, n_p))
    return np.stack(
        [
            random_rotation(rng) @ (base + deform * rng.standard_normal((3, n_p)))
            + rng.standard_normal((3, 1))
            for _ in range(n_f)
        ]
    )


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
