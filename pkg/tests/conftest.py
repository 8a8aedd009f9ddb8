import os

os.environ.setdefault("CVDISTILL_CHECK_PHYSICAL", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import strategies as st  # noqa: E402

from cvdistill.gaussian import GaussianState, beamsplitter_op, phase_shift_op  # noqa: E402

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


def random_symplectic(n_modes, rng):
    """Random passive network sandwiched between single-mode squeezers."""
    S = np.eye(2 * n_modes)
    for _ in range(3):
        for k in range(n_modes):
            S = phase_shift_op(n_modes, k, rng.uniform(0, 2 * np.pi)).matrix @ S
            r = rng.uniform(-0.8, 0.8)
            sq = np.eye(2 * n_modes)
            sq[2 * k, 2 * k] = np.exp(-r)
            sq[2 * k + 1, 2 * k + 1] = np.exp(r)
            S = sq @ S
        for i in range(n_modes):
            for j in range(i + 1, n_modes):
                S = beamsplitter_op(n_modes, i, j, rng.uniform(0, 1)).matrix @ S
    return S


def random_state(n_modes, rng, displaced=True):
    nu = 0.25 * (1.0 + rng.exponential(0.5, n_modes))
    S = random_symplectic(n_modes, rng)
    cov = S @ np.diag(np.repeat(nu, 2)) @ S.T
    mean = rng.normal(0, 0.5, 2 * n_modes) if displaced else np.zeros(2 * n_modes)
    return GaussianState(mean, 0.5 * (cov + cov.T))


@st.composite
def physical_states(draw, min_modes=1, max_modes=4):
    n = draw(st.integers(min_modes, max_modes))
    seed = draw(st.integers(0, 2**32 - 1))
    return random_state(n, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
