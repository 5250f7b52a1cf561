"""Latin hypercube designs for training, test and prefactor parameter sets.

All randomness comes from numpy's counter-based Philox bit generator, so a
``(bounds, n, seed)`` triple reproduces the same points on any platform.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError, DisjointnessError, InvalidBounds

LABELS = ("train", "test", "pref")


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class SampleSet:
    label: str
    points: np.ndarray
    bounds: np.ndarray
    seed: int
    pinned: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_dict(self) -> dict:
        d = {"label": self.label, "seed": int(self.seed),
             "bounds": self.bounds.tolist(), "points": self.points.tolist()}
        if self.pinned is not None:
            d["pinned"] = [int(self.pinned[0]), float(self.pinned[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSet":
        for key in ("label", "seed", "bounds", "points"):
            if key not in d:
                raise ConfigError(f"sample set is missing required key {key!r}")
        bounds = np.asarray(d["bounds"], dtype=np.float64).reshape(-1, 2)
        points = np.asarray(d["points"], dtype=np.float64).reshape(-1, len(bounds))
        pinned = tuple(d["pinned"]) if d.get("pinned") is not None else None
        return cls(d["label"], points, bounds, int(d["seed"]), pinned)


def _validate_bounds(bounds, skip=()) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 2 or len(b) == 0:
        raise InvalidBounds("bounds must be a non-empty list of [lo, hi] pairs")
    for i, (lo, hi) in enumerate(b):
        if i not in skip and not lo < hi:
            raise InvalidBounds(f"coordinate {i}: lower bound {lo} is not below upper bound {hi}")
    return b


def _lhs_unit(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return qmc.LatinHypercube(d, rng=rng).random(n)


def lhs_sample(bounds, n: int, seed: int, label: str = "train") -> SampleSet:
    """Latin hypercube sample of ``n`` points in a box.

    Each coordinate has exactly one point in each of its ``n`` equal-width
    strata; stratum assignments are permuted independently per coordinate
    and the position inside a stratum is uniform.
    """
    if n < 1:
        raise ConfigError("number of samples must be at least 1")
    b = _validate_bounds(bounds)
    unit = _lhs_unit(n, len(b), rng_from_seed(seed))
    points = b[:, 0] + unit * (b[:, 1] - b[:, 0])
    return SampleSet(label, points, b, int(seed))


def fixed_coordinate_sample(bounds, n: int, seed: int, pinned, label: str = "test") -> SampleSet:
    """LHS over all coordinates but ``pinned = (index, value)``, which is held fixed.

    The pinned value need not lie inside the corresponding bound.
    """
    index, value = int(pinned[0]), float(pinned[1])
    b = _validate_bounds(bounds, skip=(index,))
    if not 0 <= index < len(b):
        raise ConfigError(f"pinned index {index} outside parameter dimension {len(b)}")
    free = [i for i in range(len(b)) if i != index]
    points = np.empty((n, len(b)))
    points[:, index] = value
    if free:
        sub = lhs_sample(b[free], n, seed, label)
        points[:, free] = sub.points
    return SampleSet(label, points, b, int(seed), (index, value))


def overlaps(a: SampleSet, b: SampleSet) -> bool:
    """True if any point appears exactly in both sets."""
    seen = {p.tobytes() for p in np.ascontiguousarray(a.points)}
    return any(p.tobytes() in seen for p in np.ascontiguousarray(b.points))


def draw_disjoint(draw, seed: int, others, max_tries: int = 100) -> SampleSet:
    """Call ``draw(seed)`` with increasing seeds until no point repeats one in ``others``."""
    for attempt in range(max_tries):
        s = draw(seed + attempt)
        if not any(overlaps(s, o) for o in others):
            return s
    raise DisjointnessError(f"could not draw a disjoint sample set in {max_tries} attempts")


def check_disjoint(sets) -> None:
    sets = list(sets)
    for i, a in enumerate(sets):
        for b in sets[i + 1:]:
            if overlaps(a, b):
                raise DisjointnessError(f"sample sets {a.label!r} and {b.label!r} share points")


def save_sets(path, sets) -> None:
    doc = {s.label: s.to_dict() for s in sets}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_sets(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return {label: SampleSet.from_dict(d) for label, d in doc.items()}
