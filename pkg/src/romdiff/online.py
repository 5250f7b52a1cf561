"""Online stage: reduced assembly and solve, errors, estimators and prefactors."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .eigen import (HF_SETTINGS, REDUCED_SETTINGS, EigSolution, EigSolveSettings, power_iteration,
                    sign_fix, solve_both)
from .errors import (AllDenominatorsDegenerate, DegenerateDenominator, DimensionMismatch,
                     EmptyPrefSet, RankMismatch, SingularMatrix, SingularReducedOperator)
from .linalg import lu_factorize
from .model import OperatorPair
from .offline import ReducedBasis

log = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-14


@dataclass(frozen=True)
class ReducedOperators:
    A_n: np.ndarray
    B_n: np.ndarray
    t_assemble: float = 0.0

    @property
    def dim(self) -> int:
        return self.A_n.shape[0]


@dataclass(frozen=True)
class ReducedSolution:
    """Reduced eigenpairs and their lifts.

    ``c`` and ``c_star`` are scaled and signed consistently with the lifted
    unit vectors ``u`` and ``u_star`` (``u == V @ c``).
    """

    c: np.ndarray
    c_star: np.ndarray
    k: float
    k_adjoint: float
    u: np.ndarray
    u_star: np.ndarray
    converged: bool
    iterations: int
    t_solve: float = 0.0


@dataclass(frozen=True)
class ErrorReport:
    e_u: float
    e_ustar: float
    e_k: float
    norm_R: float
    norm_Rstar: float
    eta_k: float
    delta_u: float = np.nan
    delta_ustar: float = np.nan
    delta_k: float = np.nan


@dataclass(frozen=True)
class Prefactors:
    C_u: float
    C_ustar: float
    C_k: float
    n: int
    label: str = "pref"
    size: int = 0

    def to_dict(self) -> dict:
        return {"C_u": self.C_u, "C_ustar": self.C_ustar, "C_k": self.C_k, "dim": self.n,
                "label": self.label, "size": self.size}


def assemble_reduced(basis: ReducedBasis, ops: OperatorPair) -> ReducedOperators:
    """Galerkin projection ``V^T A V``, ``V^T B V`` accumulated group block by group block.

    Only the sparse blocks are touched, so the full operators are never
    formed; empty coupling blocks are skipped.
    """
    if basis.groups != ops.groups or basis.n_cells != ops.n_cells:
        raise DimensionMismatch(
            f"basis is for {basis.groups} groups x {basis.n_cells} cells, operators for "
            f"{ops.groups} x {ops.n_cells}")
    t0 = time.perf_counter()
    Vg = basis.group_blocks()
    n = basis.dim
    A_n = np.zeros((n, n))
    B_n = np.zeros((n, n))
    for g in range(ops.groups):
        for gp in range(ops.groups):
            A_blk, B_blk = ops.A_blocks[g][gp], ops.B_blocks[g][gp]
            if A_blk.nnz:
                A_n += Vg[g].T @ (A_blk @ Vg[gp])
            if B_blk.nnz:
                B_n += Vg[g].T @ (B_blk @ Vg[gp])
    return ReducedOperators(A_n, B_n, time.perf_counter() - t0)


def _lift(V, c):
    u = V @ c
    norm = np.linalg.norm(u)
    u, c = u / norm, c / norm
    i = int(np.argmax(np.abs(u)))
    if u[i] < 0:
        u, c = -u, -c
    return u, c


def solve_reduced(red: ReducedOperators, basis: ReducedBasis,
                  settings: EigSolveSettings = REDUCED_SETTINGS) -> ReducedSolution:
    """Power iteration on the dense reduced direct and adjoint problems."""
    if red.dim != basis.dim:
        raise DimensionMismatch(f"reduced operators have rank {red.dim}, basis {basis.dim}")
    t0 = time.perf_counter()
    try:
        lu = lu_factorize(red.A_n)
    except SingularMatrix as exc:
        raise SingularReducedOperator(f"reduced disappearance matrix is singular: {exc}",
                                      pivot=exc.pivot) from exc
    n = red.dim
    B_n, Bt_n = red.B_n, red.B_n.T.copy()
    direct = power_iteration(B_n.__matmul__, lu.solve, n, settings)
    adjoint = power_iteration(Bt_n.__matmul__, lambda b: lu.solve(b, transpose=True), n, settings)
    t_solve = time.perf_counter() - t0
    u, c = _lift(basis.V, direct.u)
    us, cs = _lift(basis.V, adjoint.u)
    return ReducedSolution(c, cs, direct.k, adjoint.k, u, us, direct.converged and adjoint.converged,
                           max(direct.iterations, adjoint.iterations), t_solve)


def online_query(basis: ReducedBasis, ops: OperatorPair,
                 settings: EigSolveSettings = REDUCED_SETTINGS) -> tuple:
    red = assemble_reduced(basis, ops)
    return red, solve_reduced(red, basis, settings)


def residuals(ops: OperatorPair, sol: ReducedSolution) -> tuple:
    """``||(B - k_n A) u_n||_2`` and ``||(B^T - k_n A^T) u*_n||_2``."""
    R = ops.B @ sol.u - sol.k * (ops.A @ sol.u)
    R_star = ops.B.T @ sol.u_star - sol.k * (ops.A.T @ sol.u_star)
    return float(np.linalg.norm(R)), float(np.linalg.norm(R_star))


def eta_k(red: ReducedOperators, sol: ReducedSolution, resids: tuple) -> float:
    """Eigenvalue estimator ``||R|| ||R*|| / |<c*, A_n c>|``.

    Raises
    ------
    DegenerateDenominator
        If the bilinear form is negligible relative to ``max |A_n|``.
    """
    denom = abs(float(sol.c_star @ (red.A_n @ sol.c)))
    if denom < DENOMINATOR_FLOOR * np.abs(red.A_n).max():
        raise DegenerateDenominator(f"<c*, A_n c> = {denom:.3e} is degenerate")
    return resids[0] * resids[1] / denom


def compare_to_hf(hf_direct: EigSolution, hf_adjoint: EigSolution, sol: ReducedSolution,
                  resids: tuple = (np.nan, np.nan), eta: float = np.nan) -> ErrorReport:
    """Eigenvector and eigenvalue errors against a high-fidelity reference."""
    u = sign_fix(hf_direct.u / np.linalg.norm(hf_direct.u))
    us = sign_fix(hf_adjoint.u / np.linalg.norm(hf_adjoint.u))
    return ErrorReport(
        e_u=float(np.linalg.norm(u - sol.u)),
        e_ustar=float(np.linalg.norm(us - sol.u_star)),
        e_k=abs(hf_direct.k - sol.k),
        norm_R=resids[0], norm_Rstar=resids[1], eta_k=eta,
    )


def estimate(ops: OperatorPair, red: ReducedOperators, sol: ReducedSolution) -> tuple:
    """Residual norms and eta_k; eta_k is NaN when its denominator degenerates."""
    resids = residuals(ops, sol)
    try:
        eta = eta_k(red, sol, resids)
    except DegenerateDenominator as exc:
        log.warning("%s", exc)
        eta = np.nan
    return resids, eta


def prefactors_from_reports(reports, n: int, label: str = "pref") -> Prefactors:
    """Maximum error/estimator ratios; near-zero estimators are skipped."""
    reports = list(reports)
    if not reports:
        raise EmptyPrefSet("prefactor calibration needs at least one parameter")

    def worst(errors, estimators, name):
        ratios = [e / d for e, d in zip(errors, estimators) if np.isfinite(d) and d >= DENOMINATOR_FLOOR]
        skipped = len(errors) - len(ratios)
        if skipped:
            log.warning("prefactor %s: skipped %d point(s) with degenerate estimator", name, skipped)
        if not ratios:
            raise AllDenominatorsDegenerate(f"every estimator for {name} is degenerate")
        return float(max(ratios))

    return Prefactors(
        C_u=worst([r.e_u for r in reports], [r.norm_R for r in reports], "C_u"),
        C_ustar=worst([r.e_ustar for r in reports], [r.norm_Rstar for r in reports], "C_ustar"),
        C_k=worst([r.e_k for r in reports], [r.eta_k for r in reports], "C_k"),
        n=n, label=label, size=len(reports),
    )


def calibrate_prefactors(basis: ReducedBasis, model, pref_points,
                         hf_settings: EigSolveSettings = HF_SETTINGS,
                         settings: EigSolveSettings = REDUCED_SETTINGS,
                         hf_solutions=None) -> Prefactors:
    """Prefactors of ``basis`` over a calibration set.

    ``hf_solutions`` may hold precomputed ``(direct, adjoint)`` pairs aligned
    with ``pref_points``; otherwise they are solved here.
    """
    pts = np.atleast_2d(np.asarray(getattr(pref_points, "points", pref_points), dtype=np.float64))
    if pts.size == 0:
        raise EmptyPrefSet("prefactor set is empty")
    reports = []
    for i, mu in enumerate(pts):
        ops = model.operators(mu)
        hf = hf_solutions[i] if hf_solutions is not None else solve_both(ops, hf_settings)
        red, sol = online_query(basis, ops, settings)
        resids, eta = estimate(ops, red, sol)
        reports.append(compare_to_hf(hf[0], hf[1], sol, resids, eta))
    return prefactors_from_reports(reports, basis.dim, getattr(pref_points, "label", "pref"))


def certified_estimates(prefactors: Prefactors, resids: tuple, eta: float, n: int) -> tuple:
    """``(C_u ||R||, C_u* ||R*||, C_k eta_k)`` for a basis of dimension ``n``."""
    if prefactors.n != n:
        raise RankMismatch(f"prefactors were calibrated for dimension {prefactors.n}, basis has {n}")
    return prefactors.C_u * resids[0], prefactors.C_ustar * resids[1], prefactors.C_k * eta


def with_estimates(report: ErrorReport, prefactors: Prefactors, n: int) -> ErrorReport:
    du, dus, dk = certified_estimates(prefactors, (report.norm_R, report.norm_Rstar), report.eta_k, n)
    return ErrorReport(report.e_u, report.e_ustar, report.e_k, report.norm_R, report.norm_Rstar,
                       report.eta_k, du, dus, dk)
