"""Offline stage: snapshots, POD truncation, reduced basis, and the on-disk store."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rmdf
from .eigen import HF_SETTINGS, EigSolveSettings, solve_both
from .errors import (ChecksumMismatch, ConfigError, EmptyBasis, EmptyTrainSet, FormatVersionMismatch,
                     MissingFile, NumericalError, RankExceedsSnapshots, RomdiffError, StoreError)
from .linalg import orthonormalize, svd

log = logging.getLogger(__name__)

STORE_FORMAT = "romdiff-store"
STORE_VERSION = 1


class ConfigHashWarning(UserWarning):
    """The store was produced from a different model configuration."""


@dataclass
class Snapshot:
    mu: np.ndarray
    k: float
    k_adjoint: float
    u: np.ndarray | None
    u_star: np.ndarray | None
    converged: bool
    iterations: int = 0
    iterations_adjoint: int = 0
    error: str | None = None

    @property
    def usable(self) -> bool:
        return self.converged and self.u is not None and self.u_star is not None


def solve_snapshot(model, mu, settings: EigSolveSettings = HF_SETTINGS) -> Snapshot:
    ops = model.operators(mu)
    direct, adjoint = solve_both(ops, settings)
    return Snapshot(np.asarray(mu, dtype=np.float64), direct.k, adjoint.k, direct.u, adjoint.u,
                    direct.converged and adjoint.converged, direct.iterations, adjoint.iterations)


def generate_snapshots(model, points, settings: EigSolveSettings = HF_SETTINGS,
                       workers: int = 1) -> list:
    """High-fidelity direct and adjoint solves at every parameter point.

    A failing point is recorded (``error`` set, vectors ``None``) rather than
    aborting the batch; only a batch where every point fails raises.
    Results come back in input order regardless of ``workers``.
    """
    points = np.atleast_2d(np.asarray(getattr(points, "points", points), dtype=np.float64))
    if len(points) == 0:
        raise EmptyTrainSet("no training parameters given")

    def run(mu):
        try:
            return solve_snapshot(model, mu, settings)
        except RomdiffError as exc:
            log.warning("snapshot at mu=%s failed: %s", mu.tolist(), exc)
            return Snapshot(mu, np.nan, np.nan, None, None, False, error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            snaps = list(pool.map(run, points))
    else:
        snaps = [run(mu) for mu in points]
    if all(s.error is not None for s in snaps):
        raise NumericalError(f"all {len(snaps)} snapshot solves failed; first: {snaps[0].error}")
    for i, s in enumerate(snaps):
        if s.error is None and not s.converged:
            log.warning("snapshot %d did not converge and is excluded from the basis", i)
    return snaps


def snapshot_matrices(snapshots) -> tuple:
    """Stack usable snapshots into (S, S*) with one column per parameter."""
    good = [s for s in snapshots if s.usable]
    if not good:
        raise EmptyTrainSet("no converged snapshots available")
    return np.column_stack([s.u for s in good]), np.column_stack([s.u_star for s in good])


@dataclass(frozen=True)
class Truncation:
    """POD truncation rule.

    With only ``tol``, keep the smallest ``m`` with ``sigma_{m+1}/sigma_1 <= tol``.
    With only ``rank``, keep exactly ``rank`` modes. With both, ``rank`` caps
    the tolerance-based count.
    """

    tol: float | None = 1e-6
    rank: int | None = None

    def __post_init__(self):
        if self.tol is None and self.rank is None:
            raise ConfigError("truncation needs a tolerance, a rank, or both")
        if self.tol is not None and not 0 < self.tol < 1:
            raise ConfigError("truncation tolerance must lie in (0, 1)")
        if self.rank is not None and self.rank < 1:
            raise ConfigError("truncation rank must be positive")


def _retained(sigma: np.ndarray, crit: Truncation, n_snapshots: int) -> int:
    if crit.tol is None:
        if crit.rank > n_snapshots:
            raise RankExceedsSnapshots(f"rank {crit.rank} exceeds {n_snapshots} snapshots")
        return crit.rank
    ratios = sigma / sigma[0]
    small = np.flatnonzero(ratios[1:] <= crit.tol)
    n = int(small[0]) + 1 if small.size else len(sigma)
    return n if crit.rank is None else min(n, crit.rank)


def pod_truncate(S, crit: Truncation = Truncation()) -> tuple:
    """Leading left singular vectors of the snapshot matrix ``S``.

    Returns
    -------
    modes : (N, n) ndarray
    sigma : (n,) ndarray
        Retained singular values.
    full : SvdResult
        The complete thin SVD, kept for diagnostics.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    result = svd(S)
    if not result.sigma.size or result.sigma[0] == 0.0:
        raise EmptyBasis("snapshot matrix is zero; no modes to keep")
    n = _retained(result.sigma, crit, S.shape[1])
    return result.U[:, :n], result.sigma[:n], result


@dataclass
class ReducedBasis:
    V: np.ndarray
    groups: int
    n_1: int
    n_2: int
    sigma: np.ndarray
    sigma_star: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.V.shape[1]

    @property
    def n_cells(self) -> int:
        return self.V.shape[0] // self.groups

    def group_blocks(self) -> list:
        """Row blocks of ``V`` per energy group."""
        N = self.n_cells
        return [self.V[g * N:(g + 1) * N] for g in range(self.groups)]

    def prefix(self, n: int) -> "ReducedBasis":
        """Basis spanned by the leading ``n`` columns (orthonormal by construction)."""
        if n > self.dim:
            warnings.warn(f"requested rank {n} exceeds basis dimension {self.dim}; using {self.dim}")
            n = self.dim
        return ReducedBasis(self.V[:, :n], self.groups, self.n_1, self.n_2, self.sigma,
                            self.sigma_star, dict(self.provenance, prefix=n))


def build_reduced_basis(S, S_star, groups: int, crit: Truncation = Truncation(),
                        drop_tol: float = 1e-10, provenance: dict | None = None) -> ReducedBasis:
    """POD of direct and adjoint snapshots, then orthonormalized union.

    Direct modes come first, so any column dropped as linearly dependent
    belongs to the adjoint side.
    """
    V_right, _, full = pod_truncate(S, crit)
    V_left, _, full_star = pod_truncate(S_star, crit)
    V = orthonormalize(np.hstack([V_right, V_left]), drop_tol)
    if V.shape[0] % groups:
        raise ConfigError(f"vector length {V.shape[0]} is not a multiple of {groups} groups")
    return ReducedBasis(V, groups, V_right.shape[1], V_left.shape[1], full.sigma,
                        full_star.sigma, dict(provenance or {}))


# Store =======================================================================
def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_manifest(path: Path, manifest: dict) -> None:
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _read_manifest(path: Path) -> dict:
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingFile(f"{mpath} not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"{mpath}: unreadable manifest ({exc})") from None
    if manifest.get("format") != STORE_FORMAT or manifest.get("version") != STORE_VERSION:
        raise FormatVersionMismatch(
            f"store format {manifest.get('format')!r} v{manifest.get('version')}, "
            f"expected {STORE_FORMAT!r} v{STORE_VERSION}")
    return manifest


def _load_checked(path: Path, name: str, checksums: dict) -> np.ndarray:
    fpath = path / name
    if not fpath.exists():
        raise MissingFile(f"store file {name} is missing")
    data = fpath.read_bytes()
    if _sha256(data) != checksums.get(name):
        raise ChecksumMismatch(f"checksum mismatch for {name}")
    return rmdf.from_bytes(data)


def save_store(path, snapshots, groups: int, config_hash: str = "", provenance: dict | None = None,
               basis: ReducedBasis | None = None, overwrite: bool = False) -> None:
    """Write snapshots (and optionally a basis) to a store directory."""
    path = Path(path)
    if (path / "manifest.json").exists() and not overwrite:
        raise StoreError(f"store {path} already exists (use overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    checksums = {}
    entries = []
    for i, s in enumerate(snapshots):
        entry = {"mu": s.mu.tolist(), "k": s.k, "k_adjoint": s.k_adjoint, "converged": s.converged,
                 "iterations": [s.iterations, s.iterations_adjoint], "error": s.error, "files": {}}
        if s.u is not None:
            for key, vec in (("u", s.u), ("ustar", s.u_star)):
                name = f"{key}_{i:04d}.rmdf"
                checksums[name] = _sha256(rmdf.write(path / name, vec))
                entry["files"][key] = name
        entries.append(entry)
    n_dofs = next((len(s.u) for s in snapshots if s.u is not None), 0)
    manifest = {
        "format": STORE_FORMAT, "version": STORE_VERSION, "groups": groups,
        "n_cells": n_dofs // groups, "dim": len(snapshots[0].mu) if snapshots else 0,
        "config_hash": config_hash, "provenance": provenance or {},
        "snapshots": entries, "checksums": checksums, "basis": None,
    }
    _write_manifest(path, manifest)
    if basis is not None:
        save_basis(path, basis)


def save_basis(path, basis: ReducedBasis) -> None:
    """Add or replace the basis in an existing store."""
    path = Path(path)
    manifest = _read_manifest(path)
    for name, arr in (("basis_V.rmdf", basis.V), ("sigma.rmdf", basis.sigma),
                      ("sigma_star.rmdf", basis.sigma_star)):
        manifest["checksums"][name] = _sha256(rmdf.write(path / name, arr))
    manifest["basis"] = {"n": basis.dim, "n_1": basis.n_1, "n_2": basis.n_2,
                         "provenance": basis.provenance}
    _write_manifest(path, manifest)


def load_store(path, config_hash: str | None = None, require_basis: bool = False) -> tuple:
    """Read a store back.

    Returns ``(snapshots, basis, manifest)`` with ``basis`` None if absent.
    A differing ``config_hash`` only warns (:class:`ConfigHashWarning`).
    """
    path = Path(path)
    manifest = _read_manifest(path)
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        warnings.warn(f"store {path} was built from a different model configuration",
                      ConfigHashWarning, stacklevel=2)
    checksums = manifest["checksums"]
    snaps = []
    for entry in manifest["snapshots"]:
        files = entry["files"]
        u = _load_checked(path, files["u"], checksums)[:, 0] if "u" in files else None
        if u is not None and "ustar" not in files:
            raise MissingFile(f"adjoint vector missing for snapshot with direct file {files['u']}")
        us = _load_checked(path, files["ustar"], checksums)[:, 0] if "ustar" in files else None
        snaps.append(Snapshot(np.asarray(entry["mu"], dtype=np.float64), entry["k"], entry["k_adjoint"],
                              u, us, entry["converged"], *entry["iterations"], error=entry["error"]))
    basis = None
    meta = manifest.get("basis")
    if meta is not None:
        V = _load_checked(path, "basis_V.rmdf", checksums)
        sigma = _load_checked(path, "sigma.rmdf", checksums)[:, 0]
        sigma_star = _load_checked(path, "sigma_star.rmdf", checksums)[:, 0]
        basis = ReducedBasis(V, manifest["groups"], meta["n_1"], meta["n_2"], sigma, sigma_star,
                             meta.get("provenance", {}))
    elif require_basis:
        raise MissingFile(f"store {path} has no basis; run the build step first")
    return snaps, basis, manifest
