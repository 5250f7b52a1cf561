"""Linear-algebra kernels: sparse LU, Gram-Schmidt orthonormalization, thin SVD.

Sparse matrices are plain :mod:`scipy.sparse` CSR matrices and dense
matrices are 2-D :class:`numpy.ndarray`. The helpers here add the checks
and conventions the rest of the package relies on (pivot checks, column
dropping, sign-fixed singular vectors).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import warnings

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceFailure, EmptyBasis, SingularMatrix

PIVOT_FLOOR = 1e-300


def check_csr(m) -> None:
    """Raise ``ValueError`` if ``m`` violates the canonical CSR invariants."""
    if not sp.isspmatrix_csr(m) and not isinstance(m, sp.csr_array):
        raise ValueError("expected a CSR matrix")
    indptr, indices = m.indptr, m.indices
    if indptr[0] != 0 or indptr[-1] != len(m.data) or np.any(np.diff(indptr) < 0):
        raise ValueError("row offsets are not a valid partition of the stored values")
    for r in range(m.shape[0]):
        row = indices[indptr[r]:indptr[r + 1]]
        if np.any(np.diff(row) <= 0):
            raise ValueError(f"column indices of row {r} are not strictly increasing")


def canonical_csr(m) -> sp.csr_matrix:
    """Return ``m`` as CSR with summed duplicates and sorted column indices."""
    out = sp.csr_matrix(m, dtype=np.float64)
    out.sum_duplicates()
    out.sort_indices()
    return out


@dataclass(frozen=True)
class LuFactors:
    """LU factors of a square matrix, reusable across right-hand sides.

    Wraps either a SuperLU object (sparse input) or the packed LAPACK
    ``getrf`` output (dense input).
    """

    shape: tuple
    _sparse: object = None
    _dense: tuple | None = None

    def solve(self, b, transpose: bool = False) -> np.ndarray:
        """Solve ``m x = b`` (or ``m^T x = b`` when ``transpose``)."""
        b = np.asarray(b, dtype=np.float64)
        if self._sparse is not None:
            return self._sparse.solve(b, trans="T" if transpose else "N")
        return la.lu_solve(self._dense, b, trans=1 if transpose else 0, check_finite=False)


def lu_factorize(m) -> LuFactors:
    """Factorize a square sparse or dense matrix with partial pivoting.

    Sparse input goes through SuperLU with a minimum-degree ordering on
    ``A^T + A`` in symmetric mode (pivot threshold 1, i.e. plain partial
    pivoting). Diffusion operators are structurally symmetric, and this
    keeps fill far below the column-AMD default on 3-D grids.

    Raises
    ------
    SingularMatrix
        If a pivot magnitude falls below ``1e-300``. ``pivot`` on the
        exception holds the offending index when the backend exposes it.
    """
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got shape {m.shape}")
    if sp.issparse(m):
        try:
            lu = spla.splu(sp.csc_matrix(m, dtype=np.float64), permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=1.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SingularMatrix(f"sparse LU failed: {exc}") from exc
        diag = np.abs(lu.U.diagonal())
        bad = np.flatnonzero(diag < PIVOT_FLOOR)
        if bad.size:
            raise SingularMatrix(f"zero pivot at index {bad[0]}", pivot=int(bad[0]))
        return LuFactors(shape=m.shape, _sparse=lu)

    dense = np.asarray(m, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(dense, check_finite=False)
    bad = np.flatnonzero(np.abs(np.diag(lu)) < PIVOT_FLOOR)
    if bad.size:
        raise SingularMatrix(f"zero pivot at index {bad[0]}", pivot=int(bad[0]))
    return LuFactors(shape=dense.shape, _dense=(lu, piv))


def orthonormalize(columns, drop_tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt with one reorthogonalization pass.

    A candidate column is dropped when the norm left after projecting out
    the previously accepted columns is at most ``drop_tol`` times its
    original norm. Surviving columns keep their input order.

    Parameters
    ----------
    columns : (N, m) array_like
        Candidate vectors as columns.
    drop_tol : float
        Relative drop threshold, must be positive.

    Returns
    -------
    (N, r) ndarray
        Orthonormal columns, ``r <= m``.
    """
    if drop_tol <= 0:
        raise ValueError("drop_tol must be positive")
    X = np.asarray(columns, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    accepted = []
    for j in range(X.shape[1]):
        v = X[:, j].copy()
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            continue
        for _ in range(2):
            for q in accepted:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm <= drop_tol * norm0:
            continue
        accepted.append(v / norm)
    if not accepted:
        raise EmptyBasis("all candidate columns were dropped")
    return np.column_stack(accepted)


class SvdResult(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    Z: np.ndarray


def svd(S) -> SvdResult:
    """Thin SVD ``S = U diag(sigma) Z^T`` via LAPACK divide-and-conquer.

    Singular pairs are sign-fixed so that the largest-magnitude entry of
    each left vector is positive, which makes the output reproducible.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or 0 in S.shape:
        raise ValueError(f"svd needs a non-empty 2-D matrix, got shape {S.shape}")
    try:
        U, sigma, Zt = np.linalg.svd(S, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc
    Z = Zt.T.copy()
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    Z *= signs
    return SvdResult(U, sigma, Z)
