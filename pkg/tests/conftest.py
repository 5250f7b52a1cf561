import numpy as np
import pytest
import scipy.sparse as sp

from romdiff.model import load_model


def random_m_matrix(n, rng, density=0.2):
    """Sparse strictly row-diagonally-dominant M-matrix."""
    off = sp.random(n, n, density=density, random_state=rng, format="csr")
    off.setdiag(0.0)
    off.eliminate_zeros()
    diag = np.asarray(off.sum(axis=1)).ravel() + rng.uniform(0.5, 1.5, n)
    return sp.csr_matrix(sp.diags(diag) - off)


def random_production(n, rng, density=0.3):
    """Non-negative matrix with a strictly positive diagonal (irreducible-enough B)."""
    B = sp.random(n, n, density=density, random_state=rng, format="csr")
    return sp.csr_matrix(B + sp.diags(rng.uniform(0.1, 1.0, n)))


@pytest.fixture(scope="session")
def takeda_small():
    return load_model("takeda-like", cells=(4, 4, 4))


@pytest.fixture(scope="session")
def takeda():
    return load_model("takeda-like")


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
