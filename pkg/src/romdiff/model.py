"""Multigroup diffusion model: geometry, materials, parameter maps, assembly.

The operators follow a cell-centred finite-volume discretization of

    -div(D^g grad phi^g) + Sigma_t^g phi^g - sum_g' Sigma_s^{g'->g} phi^g'
        = (1/k) chi^g sum_g' nuSigma_f^g' phi^g'

on a uniform Cartesian box. Unknowns are ordered group-major, and within a
group by cell index ``i + nx * (j + ny * k)``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionMismatch, InvalidBounds, InvalidMaterial
from .linalg import canonical_csr

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")
BOUNDARY_KINDS = ("vacuum", "reflective")


# Materials ===================================================================
@dataclass(frozen=True)
class MaterialCrossSections:
    """Per-group coefficients of one region.

    ``scatter[g_from, g_to]`` is the order-0 scattering cross-section from
    group ``g_from`` into ``g_to``. The total cross-section is derived as
    absorption plus total out-scatter so that scaling absorption keeps the
    balance consistent.
    """

    D: np.ndarray
    sigma_a: np.ndarray
    scatter: np.ndarray
    chi: np.ndarray
    nu_sigma_f: np.ndarray

    @property
    def groups(self) -> int:
        return len(self.D)

    @property
    def sigma_t(self) -> np.ndarray:
        return self.sigma_a + self.scatter.sum(axis=1)

    @property
    def removal(self) -> np.ndarray:
        """``Sigma_t^g - Sigma_s^{g->g}``, the diagonal reaction term."""
        return self.sigma_t - np.diag(self.scatter)

    def validate(self, name: str = "material") -> None:
        G = self.groups
        for attr in ("sigma_a", "chi", "nu_sigma_f"):
            if getattr(self, attr).shape != (G,):
                raise InvalidMaterial(f"{name}: {attr} must have {G} entries")
        if self.scatter.shape != (G, G):
            raise InvalidMaterial(f"{name}: scatter must be {G}x{G}")
        arrays = (self.D, self.sigma_a, self.scatter, self.chi, self.nu_sigma_f)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise InvalidMaterial(f"{name}: non-finite coefficient")
        if np.any(self.D <= 0):
            raise InvalidMaterial(f"{name}: diffusion coefficients must be positive")
        if np.any(self.sigma_a < 0) or np.any(self.scatter < 0):
            raise InvalidMaterial(f"{name}: cross-sections must be non-negative")
        if np.any(self.sigma_t < self.scatter.sum(axis=1)):
            raise InvalidMaterial(f"{name}: total cross-section below out-scatter")
        if np.any(self.nu_sigma_f < 0) or np.any(self.chi < 0):
            raise InvalidMaterial(f"{name}: fission data must be non-negative")
        chi_sum = self.chi.sum()
        fissile = np.any(self.nu_sigma_f > 0)
        if fissile and abs(chi_sum - 1.0) > 1e-12:
            raise InvalidMaterial(f"{name}: fission spectrum sums to {chi_sum}, expected 1")
        if not fissile and chi_sum not in (0.0,) and abs(chi_sum - 1.0) > 1e-12:
            raise InvalidMaterial(f"{name}: fission spectrum must sum to 0 or 1")

    @classmethod
    def from_dict(cls, d: dict, groups: int, name: str = "material") -> "MaterialCrossSections":
        m = cls(
            D=np.asarray(d["D"], dtype=np.float64),
            sigma_a=np.asarray(d["sigma_a"], dtype=np.float64),
            scatter=np.asarray(d.get("scatter", np.zeros((groups, groups))), dtype=np.float64),
            chi=np.asarray(d.get("chi", np.zeros(groups)), dtype=np.float64),
            nu_sigma_f=np.asarray(d.get("nu_sigma_f", np.zeros(groups)), dtype=np.float64),
        )
        if m.D.shape != (groups,):
            raise InvalidMaterial(f"{name}: D must have {groups} entries")
        m.validate(name)
        return m

    def replace(self, **changes) -> "MaterialCrossSections":
        fields = dict(D=self.D, sigma_a=self.sigma_a, scatter=self.scatter,
                      chi=self.chi, nu_sigma_f=self.nu_sigma_f)
        fields.update(changes)
        return MaterialCrossSections(**fields)


# Geometry ====================================================================
@dataclass(frozen=True)
class Geometry:
    """Uniform Cartesian grid with a region id per cell and per-face boundaries.

    ``regions`` has shape ``(nx, ny, nz)`` and holds 0-based indices into
    ``region_names``.
    """

    cells: tuple
    widths: tuple
    regions: np.ndarray
    region_names: tuple
    boundary: dict

    def __post_init__(self):
        if len(self.cells) != 3 or min(self.cells) < 1:
            raise ConfigError(f"cell counts must be three positive integers, got {self.cells}")
        if len(self.widths) != 3 or min(self.widths) <= 0:
            raise ConfigError(f"cell widths must be positive, got {self.widths}")
        if self.regions.shape != tuple(self.cells):
            raise ConfigError("region array shape does not match the cell counts")
        if self.regions.min() < 0 or self.regions.max() >= len(self.region_names):
            raise ConfigError("region id out of range")
        for face in FACES:
            if self.boundary.get(face) not in BOUNDARY_KINDS:
                raise ConfigError(f"boundary condition for face {face!r} must be one of {BOUNDARY_KINDS}")

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.cells
        return nx * ny * nz

    @property
    def volume(self) -> float:
        dx, dy, dz = self.widths
        return dx * dy * dz

    @property
    def extent(self) -> tuple:
        return tuple(n * h for n, h in zip(self.cells, self.widths))

    def region_ids(self) -> np.ndarray:
        """Flattened region index per cell in unknown ordering."""
        return self.regions.ravel(order="F")

    @classmethod
    def from_boxes(cls, cells, widths, region_names, fill, boxes, boundary) -> "Geometry":
        """Rasterize axis-aligned boxes (later boxes win) by cell centre."""
        names = tuple(region_names)
        lookup = {name: i for i, name in enumerate(names)}
        for name in [fill] + [b["region"] for b in boxes]:
            if name not in lookup:
                raise ConfigError(f"region {name!r} has no material entry")
        centres = [(np.arange(n) + 0.5) * h for n, h in zip(cells, widths)]
        X, Y, Z = np.meshgrid(*centres, indexing="ij")
        regions = np.full(tuple(cells), lookup[fill], dtype=np.int64)
        for box in boxes:
            inside = np.ones(regions.shape, dtype=bool)
            for coord, axis in zip((X, Y, Z), "xyz"):
                lo, hi = box.get(axis, [-np.inf, np.inf])
                inside &= (coord >= lo) & (coord <= hi)
            regions[inside] = lookup[box["region"]]
        return cls(tuple(int(c) for c in cells), tuple(float(w) for w in widths),
                   regions, names, dict(boundary))


# Parameter maps ==============================================================
@dataclass(frozen=True)
class ScalingRule:
    """Scale one coefficient of some regions by a function of one parameter.

    ``op`` is ``"multiply"`` (x * mu), ``"divide"`` (x / mu) or ``"affine"``
    (x * (1 + spread * (2t - 1)) with t the position of mu in its bounds).
    """

    param: int
    field: str
    op: str
    groups: tuple | None = None
    from_group: int | None = None
    to_group: int | None = None
    regions: tuple | None = None
    spread: float = 0.0

    def factor(self, value: float, lo: float, hi: float) -> float:
        if self.op == "multiply":
            return value
        if self.op == "divide":
            return 1.0 / value
        t = (value - lo) / (hi - lo)
        return 1.0 + self.spread * (2.0 * t - 1.0)


@dataclass(frozen=True)
class ParameterMap:
    kind: str
    bounds: np.ndarray
    rules: tuple
    reference: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def contains(self, mu, rtol: float = 0.0) -> bool:
        mu = np.asarray(mu, dtype=np.float64)
        span = self.bounds[:, 1] - self.bounds[:, 0]
        return bool(np.all(mu >= self.bounds[:, 0] - rtol * span)
                    and np.all(mu <= self.bounds[:, 1] + rtol * span))


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 2:
        raise InvalidBounds("bounds must be a list of [lo, hi] pairs")
    if np.any(b[:, 0] >= b[:, 1]):
        raise InvalidBounds(f"every lower bound must be below its upper bound, got {b.tolist()}")
    return b


def takeda5_map(bounds=None) -> ParameterMap:
    """Five-parameter map scaling group diffusion, absorption, downscatter and fission."""
    bounds = _check_bounds(bounds if bounds is not None else [[0.8, 1.2]] * 5)
    if len(bounds) != 5:
        raise DimensionMismatch("takeda5 map needs 5 bounds")
    rules = (
        ScalingRule(0, "D", "divide", groups=(0,)),
        ScalingRule(0, "sigma_a", "multiply", groups=(0,)),
        ScalingRule(1, "D", "divide", groups=(1,)),
        ScalingRule(1, "sigma_a", "multiply", groups=(1,)),
        ScalingRule(2, "scatter", "multiply", from_group=0, to_group=1),
        ScalingRule(3, "nu_sigma_f", "multiply", groups=(0,)),
        ScalingRule(4, "nu_sigma_f", "multiply", groups=(1,)),
    )
    return ParameterMap("takeda5", bounds, rules, np.ones(5))


def region_scaling_map(regions, bounds, spread: float = 0.1,
                       fission_spread: float | None = None) -> ParameterMap:
    """One parameter per region, mapped affinely onto absorption and fission.

    Across the parameter range the absorption multiplier rises from
    ``1 - spread`` to ``1 + spread`` while the fission multiplier falls over
    the same interval, a crude stand-in for burnup.
    """
    bounds = _check_bounds(bounds)
    if len(bounds) != len(regions):
        raise DimensionMismatch("region scaling map needs one bound per region")
    rules = []
    for i, name in enumerate(regions):
        rules.append(ScalingRule(i, "sigma_a", "affine", regions=(name,), spread=spread))
        rules.append(ScalingRule(i, "nu_sigma_f", "affine", regions=(name,),
                                 spread=-spread if fission_spread is None else fission_spread))
    return ParameterMap("region_scaling9", bounds, tuple(rules), bounds.mean(axis=1))


def evaluate_parameters(pmap: ParameterMap, mu, materials: dict) -> dict:
    """Return a new ``{region: MaterialCrossSections}`` scaled at ``mu``.

    Points outside the parameter box only trigger a warning, since online
    queries may extrapolate.
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    if mu.size != pmap.dim:
        raise DimensionMismatch(f"parameter has {mu.size} entries, map expects {pmap.dim}")
    if not pmap.contains(mu):
        warnings.warn(f"extrapolation: parameter {mu.tolist()} outside the map bounds",
                      stacklevel=2)
    fields = {name: {f: getattr(m, f).copy() for f in ("D", "sigma_a", "scatter", "chi", "nu_sigma_f")}
              for name, m in materials.items()}
    for rule in pmap.rules:
        lo, hi = pmap.bounds[rule.param]
        factor = rule.factor(mu[rule.param], lo, hi)
        if factor == 1.0:
            continue
        targets = rule.regions if rule.regions is not None else tuple(materials)
        for name in targets:
            arr = fields[name][rule.field]
            if rule.field == "scatter":
                arr[rule.from_group, rule.to_group] *= factor
            elif rule.groups is None:
                arr *= factor
            else:
                arr[list(rule.groups)] *= factor
    out = {}
    for name, f in fields.items():
        m = MaterialCrossSections(**f)
        m.validate(name)
        out[name] = m
    return out


# Operators ===================================================================
@dataclass(frozen=True)
class OperatorPair:
    """Disappearance (A) and production (B) operators in G x G block form."""

    A_blocks: list
    B_blocks: list

    @property
    def groups(self) -> int:
        return len(self.A_blocks)

    @property
    def n_cells(self) -> int:
        return self.A_blocks[0][0].shape[0]

    @property
    def size(self) -> int:
        return self.groups * self.n_cells

    @cached_property
    def A(self) -> sp.csr_matrix:
        return canonical_csr(sp.bmat(self.A_blocks, format="csr"))

    @cached_property
    def B(self) -> sp.csr_matrix:
        return canonical_csr(sp.bmat(self.B_blocks, format="csr"))


def _leakage(geom: Geometry, D: np.ndarray):
    """Return (diag, rows, cols, vals) of the diffusion operator for one group.

    ``D`` has shape ``(nx, ny, nz)``.
    """
    nx, ny, nz = geom.cells
    idx = np.arange(geom.n_cells).reshape((nx, ny, nz), order="F")
    diag = np.zeros(geom.n_cells)
    rows, cols, vals = [], [], []
    volume = geom.volume
    for axis in range(3):
        h = geom.widths[axis]
        area = volume / h
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        D1, D2 = D[tuple(lo)], D[tuple(hi)]
        c = (2.0 * D1 * D2 / (D1 + D2) / h * area).ravel(order="F")
        i1 = idx[tuple(lo)].ravel(order="F")
        i2 = idx[tuple(hi)].ravel(order="F")
        np.add.at(diag, i1, c)
        np.add.at(diag, i2, c)
        rows += [i1, i2]
        cols += [i2, i1]
        vals += [-c, -c]
        for side, face in ((0, FACES[2 * axis]), (-1, FACES[2 * axis + 1])):
            if geom.boundary[face] != "vacuum":
                continue
            sl = [slice(None)] * 3
            sl[axis] = side
            Db = D[tuple(sl)].ravel(order="F")
            ib = idx[tuple(sl)].ravel(order="F")
            np.add.at(diag, ib, Db / (0.5 * h + 2.0 * Db) * area)
    return diag, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble_operators(geom: Geometry, materials: dict) -> OperatorPair:
    """Assemble the block operators for per-region ``materials``.

    ``materials`` maps every name in ``geom.region_names`` to its
    :class:`MaterialCrossSections`.
    """
    try:
        mats = [materials[name] for name in geom.region_names]
    except KeyError as exc:
        raise InvalidMaterial(f"no material for region {exc.args[0]!r}") from None
    for name, m in zip(geom.region_names, mats):
        m.validate(name)
    G = mats[0].groups
    if any(m.groups != G for m in mats):
        raise InvalidMaterial("all materials must share the same number of groups")

    n = geom.n_cells
    vol = geom.volume
    rid = geom.region_ids()

    def per_cell(getter):
        return np.array([getter(m) for m in mats])[rid]

    A_blocks = [[None] * G for _ in range(G)]
    B_blocks = [[None] * G for _ in range(G)]
    for g in range(G):
        D = per_cell(lambda m: m.D[g]).reshape(geom.cells, order="F")
        diag, r, c, v = _leakage(geom, D)
        diag = diag + per_cell(lambda m: m.removal[g]) * vol
        rows = np.concatenate([np.arange(n), r])
        cols = np.concatenate([np.arange(n), c])
        vals = np.concatenate([diag, v])
        A_blocks[g][g] = canonical_csr(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))
        for gp in range(G):
            if gp != g:
                coupling = -per_cell(lambda m: m.scatter[gp, g]) * vol
                A_blocks[g][gp] = _diag_csr(coupling)
            B_blocks[g][gp] = _diag_csr(per_cell(lambda m: m.chi[g] * m.nu_sigma_f[gp]) * vol)
    return OperatorPair(A_blocks, B_blocks)


def _diag_csr(values: np.ndarray) -> sp.csr_matrix:
    """Diagonal CSR matrix without stored zeros."""
    n = len(values)
    keep = np.flatnonzero(values != 0.0)
    return canonical_csr(sp.coo_matrix((values[keep], (keep, keep)), shape=(n, n)))


def transpose_operators(ops: OperatorPair) -> OperatorPair:
    G = ops.groups
    A = [[canonical_csr(ops.A_blocks[gp][g].T) for gp in range(G)] for g in range(G)]
    B = [[canonical_csr(ops.B_blocks[gp][g].T) for gp in range(G)] for g in range(G)]
    return OperatorPair(A, B)


# Configuration ===============================================================
_GROUP_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_RULE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["param", "field", "op"],
    "properties": {
        "param": {"type": "integer", "minimum": 0},
        "field": {"enum": ["D", "sigma_a", "scatter", "chi", "nu_sigma_f"]},
        "op": {"enum": ["multiply", "divide", "affine"]},
        "groups": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "from_group": {"type": "integer", "minimum": 1},
        "to_group": {"type": "integer", "minimum": 1},
        "regions": {"type": "array", "items": {"type": "string"}},
        "spread": {"type": "number"},
    },
}
MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["groups", "geometry", "materials", "parameter_map"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "groups": {"type": "integer", "minimum": 1},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["cells", "widths_cm", "region_grid", "boundary"],
            "properties": {
                "cells": {"type": "array", "items": {"type": "integer", "minimum": 1},
                          "minItems": 3, "maxItems": 3},
                "widths_cm": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                              "minItems": 3, "maxItems": 3},
                "region_grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["fill"],
                    "properties": {
                        "fill": {"type": "string"},
                        "boxes": {"type": "array", "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["region"],
                            "properties": {
                                "region": {"type": "string"},
                                "x": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                "y": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                "z": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                            },
                        }},
                    },
                },
                "boundary": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": list(FACES),
                    "properties": {f: {"enum": list(BOUNDARY_KINDS)} for f in FACES},
                },
            },
        },
        "materials": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["D", "sigma_a"],
                "properties": {
                    "D": _GROUP_VEC,
                    "sigma_a": _GROUP_VEC,
                    "scatter": {"type": "array", "items": _GROUP_VEC},
                    "chi": _GROUP_VEC,
                    "nu_sigma_f": _GROUP_VEC,
                },
            },
        },
        "parameter_map": {
            "type": "object",
            "additionalProperties": False,
            "required": ["type"],
            "properties": {
                "type": {"enum": ["takeda5", "region_scaling9", "custom"]},
                "bounds": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                      "minItems": 2, "maxItems": 2}},
                "regions": {"type": "array", "items": {"type": "string"}},
                "spread": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "reference": {"type": "array", "items": {"type": "number"}},
                "rules": {"type": "array", "items": _RULE},
            },
        },
    },
}

BUNDLED = {"takeda-like": "takeda_like.json", "minicore-like": "minicore_like.json"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Model:
    """A validated model configuration: geometry, nominal materials and parameter map."""

    name: str
    groups: int
    geometry: Geometry
    materials: dict
    parameter_map: ParameterMap
    config: dict = field(repr=False)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.config).encode()).hexdigest()

    @property
    def size(self) -> int:
        return self.groups * self.geometry.n_cells

    def materials_at(self, mu) -> dict:
        return evaluate_parameters(self.parameter_map, mu, self.materials)

    def operators(self, mu=None) -> OperatorPair:
        mats = self.materials if mu is None else self.materials_at(mu)
        return assemble_operators(self.geometry, mats)


def _build_map(spec: dict, groups: int) -> ParameterMap:
    kind = spec["type"]
    if kind == "takeda5":
        if groups != 2:
            raise ConfigError("the takeda5 parameter map requires 2 groups")
        return takeda5_map(spec.get("bounds"))
    if "bounds" not in spec:
        raise ConfigError(f"parameter_map of type {kind!r} is missing required key 'bounds'")
    if kind == "region_scaling9":
        if "regions" not in spec:
            raise ConfigError("parameter_map of type 'region_scaling9' is missing required key 'regions'")
        return region_scaling_map(spec["regions"], spec["bounds"], spec.get("spread", 0.1))
    bounds = _check_bounds(spec["bounds"])
    rules = []
    for r in spec.get("rules", []):
        if r["param"] >= len(bounds):
            raise DimensionMismatch(f"rule refers to parameter {r['param']} beyond dimension {len(bounds)}")
        rules.append(ScalingRule(
            param=r["param"], field=r["field"], op=r["op"],
            groups=tuple(g - 1 for g in r["groups"]) if "groups" in r else None,
            from_group=r["from_group"] - 1 if "from_group" in r else None,
            to_group=r["to_group"] - 1 if "to_group" in r else None,
            regions=tuple(r["regions"]) if "regions" in r else None,
            spread=r.get("spread", 0.0),
        ))
    reference = np.asarray(spec.get("reference", bounds.mean(axis=1)), dtype=np.float64)
    if reference.shape != (len(bounds),):
        raise DimensionMismatch("reference point dimension differs from the bounds")
    return ParameterMap("custom", bounds, tuple(rules), reference)


def model_from_dict(config: dict, cells=None) -> Model:
    """Validate a configuration dictionary and build a :class:`Model`.

    ``cells`` overrides the grid resolution while keeping the box extent.
    """
    config = copy.deepcopy(config)
    try:
        jsonschema.validate(config, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"model config invalid at {where}: {exc.message}") from None
    G = config["groups"]
    geo = config["geometry"]
    if cells is not None:
        extent = [n * h for n, h in zip(geo["cells"], geo["widths_cm"])]
        geo["cells"] = [int(c) for c in cells]
        geo["widths_cm"] = [e / c for e, c in zip(extent, geo["cells"])]
    materials = {name: MaterialCrossSections.from_dict(d, G, name)
                 for name, d in config["materials"].items()}
    grid = geo["region_grid"]
    geometry = Geometry.from_boxes(geo["cells"], geo["widths_cm"], list(materials),
                                   grid["fill"], grid.get("boxes", []), geo["boundary"])
    pmap = _build_map(config["parameter_map"], G)
    for rule in pmap.rules:
        for name in rule.regions or ():
            if name not in materials:
                raise ConfigError(f"parameter map refers to unknown region {name!r}")
    return Model(config.get("name", "model"), G, geometry, materials, pmap, config)


def load_config(source) -> dict:
    """Read a model configuration by bundled name or file path."""
    if isinstance(source, dict):
        return copy.deepcopy(source)
    source = str(source)
    if source in BUNDLED:
        text = resources.files("romdiff.configs").joinpath(BUNDLED[source]).read_text()
    else:
        text = Path(source).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_model(source, cells=None) -> Model:
    return model_from_dict(load_config(source), cells=cells)
