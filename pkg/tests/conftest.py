import numpy as np
import pytest

from pilotwave.spectral import BOX, BasisSpec, SpectralState

# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {name}: {detail}")


@pytest.fixture(scope="session")
def box16():
    """2D box (side pi) with the 16 modes n_x, n_y <= 4 at seeded random phases."""
    basis = BasisSpec(BOX, 2)
    modes = [(i, j) for i in range(1, 5) for j in range(1, 5)]
    return SpectralState.random_phases(basis, modes, seed=7)


@pytest.fixture(scope="session")
def two_mode():
    """1D box, (phi_1 + phi_2)/sqrt(2)."""
    return SpectralState.from_terms(BasisSpec(BOX, 1), [((1,), 2**-0.5), ((2,), 2**-0.5)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
