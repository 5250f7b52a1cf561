import logging

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import random_m_matrix, random_production
from romdiff.eigen import (HF_SETTINGS, EigSolveSettings, power_iteration, sign_fix, solve_adjoint,
                           solve_both, solve_direct)
from romdiff.errors import BreakdownZeroIterate, ConfigError
from romdiff.model import OperatorPair

TIGHT = EigSolveSettings(1e-11, 1e-13, 5000)


def pair(A, B):
    return OperatorPair([[sp.csr_matrix(A)]], [[sp.csr_matrix(B)]])


def dense_oracle(A, B):
    """Dominant eigenpair of A^{-1} B from a dense eigen-decomposition."""
    w, v = sla.eig(np.linalg.solve(np.asarray(A), np.asarray(B)))
    i = int(np.argmax(np.abs(w)))
    u = np.real(v[:, i])
    return float(np.real(w[i])), sign_fix(u / np.linalg.norm(u))


def test_scalar():
    sol = solve_direct(pair([[2.0]], [[3.0]]))
    assert sol.k == 1.5
    assert sol.u.tolist() == [1.0]
    assert sol.converged and sol.iterations == 2


def test_diagonal():
    sol = solve_direct(pair(np.eye(3), np.diag([3.0, 1.0, 0.5])))
    assert sol.k == pytest.approx(3.0, rel=1e-8)
    np.testing.assert_allclose(sol.u, [1.0, 0.0, 0.0], atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_random_against_dense(seed):
    rng = np.random.default_rng(seed)
    A, B = random_m_matrix(30, rng), random_production(30, rng)
    k_ref, u_ref = dense_oracle(A.toarray(), B.toarray())
    sol = solve_direct(pair(A, B), TIGHT)
    assert abs(sol.k - k_ref) / k_ref <= 1e-10
    assert np.linalg.norm(sol.u - u_ref) <= 1e-8
    adj = solve_adjoint(pair(A, B), TIGHT)
    assert abs(adj.k - k_ref) / k_ref <= 1e-10


def test_symmetric_direct_equals_adjoint():
    rng = np.random.default_rng(7)
    A = random_m_matrix(25, rng)
    A = (A + A.T) / 2 + sp.eye(25)
    B = sp.diags(rng.uniform(0.5, 1.0, 25))
    d, a = solve_both(pair(A, B), TIGHT)
    assert np.linalg.norm(d.u - a.u) <= 1e-9
    assert d.k == pytest.approx(a.k, rel=1e-12)


def test_slab_against_dense():
    # 1D vacuum slab, one group, 40 cells
    n, h, D, sa, nsf = 40, 0.5, 1.0, 0.05, 0.07
    c = D / h
    main = np.full(n, 2 * c + sa * h)
    edge = D / (h / 2 + 2 * D)
    main[0] += edge - c
    main[-1] += edge - c
    A = sp.diags([main, -c * np.ones(n - 1), -c * np.ones(n - 1)], [0, 1, -1])
    B = sp.eye(n) * nsf * h
    k_ref, u_ref = dense_oracle(A.toarray(), B.toarray())
    sol = solve_direct(pair(A, B), TIGHT)
    assert sol.k == pytest.approx(k_ref, rel=1e-10)
    np.testing.assert_allclose(sol.u, u_ref, atol=1e-8)
    # fundamental mode is positive and symmetric
    assert np.all(sol.u > 0)
    np.testing.assert_allclose(sol.u, sol.u[::-1], atol=1e-8)


def test_takeda_direct_and_adjoint_agree(takeda):
    d, a = solve_both(takeda.operators())
    assert d.converged and a.converged
    assert abs(d.k - a.k) / d.k <= 1e-7
    assert np.all(d.u > 0) and np.all(a.u > 0)


@given(alpha=st.floats(1e-3, 1e3), beta=st.floats(1e-3, 1e3))
@settings(max_examples=20, deadline=None)
def test_scale_invariance(alpha, beta):
    rng = np.random.default_rng(3)
    A, B = random_m_matrix(12, rng), random_production(12, rng)
    base = solve_direct(pair(A, B), TIGHT)
    sol = solve_direct(pair(alpha * A, beta * B), TIGHT)
    assert sol.k == pytest.approx(base.k * beta / alpha, rel=1e-9)
    np.testing.assert_allclose(sol.u, base.u, atol=1e-8)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_sign_fix_idempotent(values):
    v = np.array(values)
    once = sign_fix(v)
    np.testing.assert_array_equal(sign_fix(once), once)
    np.testing.assert_array_equal(sign_fix(-v) if np.any(v) else once, once)


def test_breakdown_on_zero_production():
    with pytest.raises(BreakdownZeroIterate):
        solve_direct(pair(np.eye(2), np.zeros((2, 2))))


def test_not_converged_flag(caplog):
    # two equal-modulus eigenvalues of opposite sign never settle
    A = np.eye(2)
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    with caplog.at_level(logging.WARNING, logger="romdiff.eigen"):
        sol = power_iteration(lambda u: B @ u, lambda b: A @ b, 2, EigSolveSettings(1e-7, 1e-8, 7),
                              u0=np.array([1.0, 0.0]))
    assert not sol.converged
    assert sol.iterations == 7
    assert "stopped" in caplog.text


@pytest.mark.parametrize("kw", [{"tol_u": 0.0}, {"tol_k": -1.0}, {"max_outer": 0}])
def test_settings_validation(kw):
    with pytest.raises(ConfigError):
        EigSolveSettings(**{**HF_SETTINGS.__dict__, **kw})
