"""Command-line pipeline: samples -> snapshots -> build -> solve / calibrate / validate.

Every stage reads a run configuration (JSON) and writes its artifacts into
the output directory, so the expensive offline stages are cached between
online runs.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .eigen import HF_SETTINGS, REDUCED_SETTINGS, EigSolveSettings, solve_both
from .errors import (ConfigError, DisjointnessError, EmptyTrainSet, NumericalError, RankMismatch,
                     StoreError)
from .model import Model, load_model
from .offline import (Truncation, build_reduced_basis, generate_snapshots,
                      load_store, save_basis, save_store, snapshot_matrices)
from .online import (Prefactors, compare_to_hf, estimate, online_query, prefactors_from_reports,
                     with_estimates)
from .sampling import (SampleSet, check_disjoint, draw_disjoint, fixed_coordinate_sample,
                       lhs_sample, load_sets, overlaps, save_sets)

log = logging.getLogger("romdiff")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
TIMING_COLUMNS = ("t_assemble_s", "t_solve_s", "t_hf_s")
REPORT_COLUMNS = ("k_hf", "k_rb", "e_k", "e_u", "e_ustar", "norm_R", "norm_Rstar", "eta_k",
                  "delta_u", "delta_ustar", "delta_k") + TIMING_COLUMNS

_SETTINGS = {
    "type": "object", "additionalProperties": False,
    "properties": {"tol_u": {"type": "number", "exclusiveMinimum": 0},
                   "tol_k": {"type": "number", "exclusiveMinimum": 0},
                   "max_outer": {"type": "integer", "minimum": 1}},
}
_SET = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "bounds": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                              "minItems": 2, "maxItems": 2}},
        "pinned": {"type": "array", "prefixItems": [{"type": "integer"}, {"type": "number"}],
                   "minItems": 2, "maxItems": 2},
        "points": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    },
    "oneOf": [{"required": ["n", "seed"]}, {"required": ["points"]}],
}
RUN_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["model", "samples"],
    "properties": {
        "model": {"type": "string"},
        "cells": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "store": {"type": "string"},
        "samples": {"type": "object", "additionalProperties": False, "required": ["train"],
                    "properties": {"train": _SET, "test": _SET, "pref": _SET}},
        "truncation": {"type": "object", "additionalProperties": False,
                       "properties": {"tol": {"type": ["number", "null"]},
                                      "rank_cap": {"type": ["integer", "null"], "minimum": 1}}},
        "drop_tol": {"type": "number", "exclusiveMinimum": 0},
        "solver": {"type": "object", "additionalProperties": False,
                   "properties": {"hf": _SETTINGS, "reduced": _SETTINGS}},
        "sweep": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "workers": {"type": "integer", "minimum": 1},
    },
}


class RunConfig:
    """Parsed run configuration plus command-line overrides."""

    def __init__(self, doc: dict, base_dir: Path, out: Path, workers: int | None = None,
                 seed: int | None = None, overwrite: bool = False):
        try:
            jsonschema.validate(doc, RUN_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"run config invalid at {where}: {exc.message}") from None
        self.doc = doc
        self.base_dir = base_dir
        self.out = out
        self.overwrite = overwrite
        self.seed = seed
        env_workers = os.environ.get("ROMDIFF_WORKERS")
        self.workers = workers or (int(env_workers) if env_workers else doc.get("workers", 1))
        self.store = out / doc.get("store", "store")
        if self.store.resolve() == out.resolve():
            raise ConfigError("store path must differ from the output directory")
        trunc = doc.get("truncation", {})
        self.truncation = Truncation(tol=trunc.get("tol", 1e-6), rank=trunc.get("rank_cap"))
        self.drop_tol = doc.get("drop_tol", 1e-10)
        solver = doc.get("solver", {})
        self.hf = EigSolveSettings(**{**HF_SETTINGS.__dict__, **solver.get("hf", {})})
        self.reduced = EigSolveSettings(**{**REDUCED_SETTINGS.__dict__, **solver.get("reduced", {})})
        self.sweep = doc.get("sweep", [2, 5, 10])
        self._model = None

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        out = Path(args.out) if args.out else path.parent / "run"
        return cls(doc, path.parent, out, args.workers, args.seed, args.overwrite)

    @property
    def model(self) -> Model:
        if self._model is None:
            src = self.doc["model"]
            candidate = self.base_dir / src
            self._model = load_model(candidate if candidate.is_file() else src, cells=self.doc.get("cells"))
        return self._model

    def provenance(self) -> dict:
        return {"model": self.doc["model"], "cells": list(self.model.geometry.cells),
                "hf_settings": self.hf.__dict__, "truncation": self.truncation.__dict__,
                "drop_tol": self.drop_tol}

    @property
    def samples_path(self) -> Path:
        return self.out / "samples.json"

    def load_samples(self) -> dict:
        if not self.samples_path.exists():
            raise StoreError(f"{self.samples_path} not found; run the samples step first")
        return load_sets(self.samples_path)


# Sample generation ===========================================================
def _draw_set(label: str, spec: dict, bounds: np.ndarray, seed_override, others) -> SampleSet:
    if "points" in spec:
        pts = np.asarray(spec["points"], dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != len(bounds):
            raise ConfigError(f"samples/{label}/points must have {len(bounds)} coordinates each")
        s = SampleSet(label, pts, bounds, 0)
        for o in others:
            if overlaps(s, o):
                raise DisjointnessError(f"explicit {label} points coincide with the {o.label} set")
        return s
    b = np.asarray(spec.get("bounds", bounds), dtype=np.float64)
    seed = spec["seed"] if seed_override is None else seed_override
    if "pinned" in spec:
        draw = lambda s: fixed_coordinate_sample(b, spec["n"], s, spec["pinned"], label)
    else:
        draw = lambda s: lhs_sample(b, spec["n"], s, label)
    return draw_disjoint(draw, seed, others)


def cmd_samples(cfg: RunConfig) -> int:
    if cfg.samples_path.exists() and not cfg.overwrite:
        raise StoreError(f"{cfg.samples_path} exists (use --overwrite)")
    bounds = cfg.model.parameter_map.bounds
    sets = []
    for i, label in enumerate(("train", "test", "pref")):
        spec = cfg.doc["samples"].get(label)
        if spec is None:
            continue
        seed = None if cfg.seed is None else cfg.seed + i
        s = _draw_set(label, spec, bounds, seed, sets)
        sets.append(s)
        print(f"{label}: {len(s)} points (seed {s.seed})")
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_sets(cfg.samples_path, sets)
    return EXIT_OK


# Offline =====================================================================
def cmd_snapshots(cfg: RunConfig) -> int:
    if (cfg.store / "manifest.json").exists() and not cfg.overwrite:
        raise StoreError(f"store {cfg.store} already exists (use --overwrite)")
    sets = cfg.load_samples()
    train = sets.get("train")
    if train is None or len(train) == 0:
        raise EmptyTrainSet("training sample set is empty")
    snaps = generate_snapshots(cfg.model, train, cfg.hf, cfg.workers)
    ok = [s for s in snaps if s.usable]
    prov = dict(cfg.provenance(), train_seed=train.seed, label=train.label)
    save_store(cfg.store, snaps, cfg.model.groups, cfg.model.config_hash, prov, overwrite=True)
    iters = np.mean([s.iterations for s in ok]) if ok else float("nan")
    print(f"converged {len(ok)}/{len(snaps)} snapshots; mean outer iterations {iters:.1f}")
    return EXIT_OK


def _load_store(cfg: RunConfig, require_basis=False):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = load_store(cfg.store, cfg.model.config_hash, require_basis=require_basis)
    for w in caught:
        log.warning("%s", w.message)
    return result


def cmd_build(cfg: RunConfig) -> int:
    snaps, _, manifest = _load_store(cfg)
    S, S_star = snapshot_matrices(snaps)
    basis = build_reduced_basis(S, S_star, cfg.model.groups, cfg.truncation, cfg.drop_tol,
                                provenance={"truncation": cfg.truncation.__dict__, "drop_tol": cfg.drop_tol,
                                            "snapshots": S.shape[1]})
    save_basis(cfg.store, basis)
    path = cfg.out / "singular_values.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "sigma_direct", "sigma_adjoint"])
        for i in range(max(len(basis.sigma), len(basis.sigma_star))):
            a = repr(float(basis.sigma[i])) if i < len(basis.sigma) else ""
            b = repr(float(basis.sigma_star[i])) if i < len(basis.sigma_star) else ""
            w.writerow([i + 1, a, b])
    print(f"basis dimension n={basis.dim} (n_1={basis.n_1} direct, n_2={basis.n_2} adjoint)")
    return EXIT_OK


# Online ======================================================================
def _parse_mu(text: str, dim: int) -> np.ndarray:
    path = Path(text)
    if path.is_file():
        mu = np.asarray(json.loads(path.read_text()), dtype=np.float64).ravel()
    else:
        try:
            mu = np.array([float(x) for x in text.split(",")])
        except ValueError:
            raise ConfigError(f"cannot parse parameter {text!r}") from None
    if mu.size != dim:
        raise ConfigError(f"parameter has {mu.size} entries, model expects {dim}")
    return mu


def _load_prefactors(cfg: RunConfig) -> dict:
    path = cfg.out / "prefactors.json"
    if not path.exists():
        return {}
    doc = json.loads(path.read_text())
    return {int(n): Prefactors(d["C_u"], d["C_ustar"], d["C_k"], d["dim"], d.get("label", "pref"),
                               d.get("size", 0)) for n, d in doc.items()}


def _row(mu, n, hf, t_hf, red, sol, report) -> dict:
    row = {f"mu{i + 1}": float(x) for i, x in enumerate(mu)}
    row.update(n=n, k_hf=hf[0].k, k_rb=sol.k, e_k=report.e_k, e_u=report.e_u, e_ustar=report.e_ustar,
               norm_R=report.norm_R, norm_Rstar=report.norm_Rstar, eta_k=report.eta_k,
               delta_u=report.delta_u, delta_ustar=report.delta_ustar, delta_k=report.delta_k,
               t_assemble_s=red.t_assemble, t_solve_s=sol.t_solve, t_hf_s=t_hf)
    return row


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _hf_solve(model, mu, settings):
    ops = model.operators(mu)
    t0 = time.perf_counter()
    hf = solve_both(ops, settings)
    return ops, hf, time.perf_counter() - t0


def _hf_batch(cfg: RunConfig, points) -> list:
    """HF references for ``points`` in input order, spread over the configured workers."""
    model, settings = cfg.model, cfg.hf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                return list(pool.map(lambda mu: _hf_solve(model, mu, settings), points))
        return [_hf_solve(model, mu, settings) for mu in points]


def cmd_solve(cfg: RunConfig, mu_text: str, n: int | None, hf_flag: bool) -> int:
    model = cfg.model
    mu = _parse_mu(mu_text, model.parameter_map.dim)
    if not model.parameter_map.contains(mu):
        log.warning("extrapolation: parameter %s lies outside the training box", mu.tolist())
    _, basis, _ = _load_store(cfg, require_basis=True)
    if n is not None:
        basis = basis.prefix(n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ops = model.operators(mu)
    red, sol = online_query(basis, ops, cfg.reduced)
    print(f"n={basis.dim} k_rb={sol.k!r} converged={sol.converged} "
          f"t_assemble_s={red.t_assemble:.6f} t_solve_s={sol.t_solve:.6f}")
    if hf_flag:
        t0 = time.perf_counter()
        hf = solve_both(ops, cfg.hf)
        t_hf = time.perf_counter() - t0
        resids, eta = estimate(ops, red, sol)
        report = compare_to_hf(*hf, sol, resids, eta)
        pref = {p.n: p for p in _load_prefactors(cfg).values()}.get(basis.dim)
        if pref is not None:
            report = with_estimates(report, pref, basis.dim)
        row = _row(mu, basis.dim, hf, t_hf, red, sol, report)
        print(",".join(row))
        print(",".join(_fmt(v) for v in row.values()))
    return EXIT_OK


def _sweep_bases(cfg: RunConfig, snaps) -> list:
    """One basis per sweep value: per-side POD rank n, orthonormalized union."""
    S, S_star = snapshot_matrices(snaps)
    out = []
    for n in cfg.sweep:
        if n > S.shape[1]:
            log.warning("sweep rank %d exceeds %d snapshots; clamped", n, S.shape[1])
            n = S.shape[1]
        basis = build_reduced_basis(S, S_star, cfg.model.groups, Truncation(tol=None, rank=n), cfg.drop_tol)
        out.append((n, basis))
    return out


def cmd_calibrate(cfg: RunConfig) -> int:
    sets = cfg.load_samples()
    pref = sets.get("pref")
    if pref is None or len(pref) == 0:
        raise ConfigError("no pref sample set; add samples/pref to the run config")
    check_disjoint([s for s in (sets.get("train"), pref) if s is not None])
    snaps, _, _ = _load_store(cfg)
    train_pts = SampleSet("train", np.array([s.mu for s in snaps]), pref.bounds, 0)
    if overlaps(train_pts, pref):
        raise DisjointnessError("prefactor set intersects the training set")
    hf = _hf_batch(cfg, pref.points)
    doc = {}
    for n, basis in _sweep_bases(cfg, snaps):
        reports = []
        for ops, sol_hf, _ in hf:
            red, sol = online_query(basis, ops, cfg.reduced)
            resids, eta = estimate(ops, red, sol)
            reports.append(compare_to_hf(*sol_hf, sol, resids, eta))
        p = prefactors_from_reports(reports, basis.dim, pref.label)
        doc[str(n)] = p.to_dict()
        print(f"n={n} dim={basis.dim} C_u={p.C_u:.3e} C_ustar={p.C_ustar:.3e} C_k={p.C_k:.3e}")
    (cfg.out / "prefactors.json").write_text(json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    sets = cfg.load_samples()
    test = sets.get("test")
    if test is None or len(test) == 0:
        raise ConfigError("no test sample set; add samples/test to the run config")
    model = cfg.model
    outside = [i for i, mu in enumerate(test.points) if not model.parameter_map.contains(mu)]
    for i in outside:
        log.warning("extrapolation: test point %d lies outside the training box", i)
    snaps, _, _ = _load_store(cfg)
    prefactors = _load_prefactors(cfg)
    bases = _sweep_bases(cfg, snaps)
    hf = _hf_batch(cfg, test.points)

    columns = [f"mu{i + 1}" for i in range(test.dim)] + ["n"] + list(REPORT_COLUMNS)
    rows = []
    path = cfg.out / "errors.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        try:
            for n, basis in bases:
                pref = prefactors.get(n)
                if pref is not None and pref.n != basis.dim:
                    raise RankMismatch(f"prefactors for n={n} were calibrated at dimension {pref.n}, "
                                       f"basis has {basis.dim}")
                for mu, (ops, sol_hf, t_hf) in zip(test.points, hf):
                    red, sol = online_query(basis, ops, cfg.reduced)
                    resids, eta = estimate(ops, red, sol)
                    report = compare_to_hf(*sol_hf, sol, resids, eta)
                    if pref is not None:
                        report = with_estimates(report, pref, basis.dim)
                    row = _row(mu, n, sol_hf, t_hf, red, sol, report)
                    rows.append(row)
                    writer.writerow([_fmt(row[c]) for c in columns])
                fh.flush()
        except KeyboardInterrupt:
            fh.flush()
            raise
    summary = {"test_points": len(test), "extrapolated_points": len(outside), "by_n": {}}
    for n, basis in bases:
        sel = [r for r in rows if r["n"] == n]
        stats = {"dim": basis.dim}
        for c in REPORT_COLUMNS:
            vals = np.array([r[c] for r in sel], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            stats[c] = {"mean": float(finite.mean()) if finite.size else None,
                        "max": float(finite.max()) if finite.size else None}
        summary["by_n"][str(n)] = stats
    (cfg.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


# Entry point =================================================================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="romdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration JSON")
    common.add_argument("--out", help="output directory (default: <config dir>/run)")
    common.add_argument("--workers", type=int, help="parallel solves (fallback: $ROMDIFF_WORKERS)")
    common.add_argument("--overwrite", action="store_true", help="replace existing artifacts")
    common.add_argument("--seed", type=int, help="override sample seeds (train=s, test=s+1, pref=s+2)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("samples", parents=[common], help="draw train/test/pref parameter sets")
    sub.add_parser("snapshots", parents=[common], help="high-fidelity solves over the training set")
    sub.add_parser("build", parents=[common], help="POD and reduced basis")
    p = sub.add_parser("solve", parents=[common], help="one reduced query")
    p.add_argument("--mu", required=True, help="comma-separated parameter or JSON file")
    p.add_argument("--n", type=int, help="use the leading n basis columns")
    p.add_argument("--hf", action="store_true", help="also solve high-fidelity and report errors")
    sub.add_parser("validate", parents=[common], help="errors and estimators over the test set")
    sub.add_parser("calibrate", parents=[common], help="prefactors over the pref set")
    return parser


def _configure_logging(verbose: bool) -> None:
    root = logging.getLogger("romdiff")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(getattr(h, "_romdiff", False) for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        h._romdiff = True
        root.addHandler(h)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg = RunConfig.from_args(args)
        if args.command == "samples":
            return cmd_samples(cfg)
        if args.command == "snapshots":
            return cmd_snapshots(cfg)
        if args.command == "build":
            return cmd_build(cfg)
        if args.command == "solve":
            return cmd_solve(cfg, args.mu, args.n, args.hf)
        if args.command == "validate":
            return cmd_validate(cfg)
        return cmd_calibrate(cfg)
    except ConfigError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
