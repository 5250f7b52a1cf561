"""Dominant eigenpair of ``A u = (1/k) B u`` by power iteration on ``A^{-1} B``."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BreakdownZeroIterate, ConfigError
from .linalg import LuFactors, lu_factorize
from .model import OperatorPair

log = logging.getLogger(__name__)

BREAKDOWN_FLOOR = 1e-300


@dataclass(frozen=True)
class EigSolveSettings:
    tol_u: float = 1e-7
    tol_k: float = 1e-8
    max_outer: int = 500

    def __post_init__(self):
        if not (self.tol_u > 0 and self.tol_k > 0):
            raise ConfigError("eigen-solver tolerances must be positive")
        if self.max_outer < 1:
            raise ConfigError("max_outer must be at least 1")


HF_SETTINGS = EigSolveSettings(1e-7, 1e-8, 500)
REDUCED_SETTINGS = EigSolveSettings(1e-8, 1e-9, 500)


@dataclass(frozen=True)
class EigSolution:
    u: np.ndarray
    k: float
    iterations: int
    converged: bool
    delta_u: float
    delta_k: float


def sign_fix(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that its largest-magnitude entry is positive."""
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def power_iteration(
    apply_B: Callable[[np.ndarray], np.ndarray],
    solve_A: Callable[[np.ndarray], np.ndarray],
    size: int,
    settings: EigSolveSettings = HF_SETTINGS,
    u0: np.ndarray | None = None,
) -> EigSolution:
    """Power iteration with the eigenvalue estimate ``k = ||A^{-1} B u||_2``.

    Iterates are kept at unit 2-norm and sign-fixed. Convergence requires both
    ``||u_new - u_old||_2 <= tol_u`` and ``|k_new - k_old| / |k_new| <= tol_k``.
    A run that hits ``max_outer`` returns its last iterate with
    ``converged=False``.
    """
    u = np.ones(size) if u0 is None else np.array(u0, dtype=np.float64)
    u = sign_fix(u / np.linalg.norm(u))
    k = np.nan
    du = dk = np.inf
    for it in range(1, settings.max_outer + 1):
        y = solve_A(apply_B(u))
        k_new = np.linalg.norm(y)
        if not k_new >= BREAKDOWN_FLOOR:
            raise BreakdownZeroIterate(f"iterate vanished at outer iteration {it}")
        u_new = sign_fix(y / k_new)
        du = np.linalg.norm(u_new - u)
        dk = abs(k_new - k) / k_new if np.isfinite(k) else np.inf
        u, k = u_new, k_new
        if du <= settings.tol_u and dk <= settings.tol_k:
            return EigSolution(u, float(k), it, True, float(du), float(dk))
    log.warning("power iteration stopped after %d iterations (du=%.3e, dk=%.3e)",
                settings.max_outer, du, dk)
    return EigSolution(u, float(k), settings.max_outer, False, float(du), float(dk))


def solve_direct(ops: OperatorPair, settings: EigSolveSettings = HF_SETTINGS,
                 lu: LuFactors | None = None) -> EigSolution:
    """High-fidelity direct problem; pass ``lu`` to reuse a factorization of A."""
    lu = lu_factorize(ops.A) if lu is None else lu
    return power_iteration(ops.B.__matmul__, lu.solve, ops.size, settings)


def solve_adjoint(ops: OperatorPair, settings: EigSolveSettings = HF_SETTINGS,
                  lu: LuFactors | None = None) -> EigSolution:
    """High-fidelity adjoint problem ``A^T u* = (1/k) B^T u*``.

    Uses transposed solves with the factorization of A, so one LU serves
    both problems.
    """
    lu = lu_factorize(ops.A) if lu is None else lu
    Bt = ops.B.T.tocsr()
    return power_iteration(Bt.__matmul__, lambda b: lu.solve(b, transpose=True), ops.size, settings)


def solve_both(ops: OperatorPair, settings: EigSolveSettings = HF_SETTINGS):
    """Direct and adjoint solutions sharing one factorization of A."""
    lu = lu_factorize(ops.A)
    return solve_direct(ops, settings, lu), solve_adjoint(ops, settings, lu)
