"""2D object rearrangement: three shapes, pairwise relations, and two new
relation families ("diagonal" and the three-on-a-circle arrangement).

A scene is a length-21 vector, seven features per object slot in the fixed
order circle, triangle, square::

    [x, y, r, theta, onehot_circle, onehot_triangle, onehot_square]

with centres in [0, 5]^2, radius in [0.3, 1] and angle in [0, 2 pi].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import BudgetExhausted, ShapeError
from ..numerics import Rng

log = logging.getLogger(__name__)

OBJECTS = ("circle", "triangle", "square")
FEATURES = 7
WIDTH = FEATURES * len(OBJECTS)
ARENA = 5.0
R_MIN, R_MAX = 0.3, 1.0
CIRCLE_RADIUS = 1.67
CIRCLE_TOL = 0.3
STRICT_TOL = 1e-9
DEFAULT_BUDGET = 100_000

RELATIONS = ("right of", "above", "diagonal to")

TRAINING_LABELS = tuple(
    f"{a} {rel} {b}" for rel in ("right of", "above") for a in OBJECTS for b in OBJECTS if a != b
)
COMPOSITION_TASKS = (
    "triangle right of square and circle above square",
    "square right of triangle and circle above triangle",
    "circle right of square and triangle above square",
    "square right of circle and triangle above circle",
    "circle right of triangle and triangle right of square",
)
NEW_CONCEPT_TASKS = (
    "circle",
    "square diagonal to triangle",
    "triangle diagonal to square",
    "circle diagonal to triangle",
    "triangle diagonal to circle",
)
DIAGONAL_TASKS = NEW_CONCEPT_TASKS[1:]
NEW_TRAINING_BASE = "square diagonal to triangle"
NEW_TRAINING_PARTNERS = (
    "circle right of square",
    "circle above square",
    "circle above triangle",
    "circle right of triangle",
    "triangle above circle",
)
NEW_TRAINING_TASKS = tuple(f"{NEW_TRAINING_BASE} and {p}" for p in NEW_TRAINING_PARTNERS)
ALIASES = {"line": COMPOSITION_TASKS[4]}
TRAINING_DATASET_SIZE = 11_004  # 917 per training label
DEMOS_PER_TASK = 5


@dataclass(frozen=True)
class Atom:
    """One relation: ``(kind, a, b)``; the circle arrangement has no operands."""

    kind: str
    a: str = ""
    b: str = ""

    def label(self) -> str:
        return "circle" if self.kind == "circle" else f"{self.a} {self.kind} {self.b}"


def canonical(label: str) -> str:
    return ALIASES.get(label, label)


def parse_label(label: str) -> tuple[Atom, ...]:
    """Split a (possibly composite) label into atoms; raises on unknown text."""
    label = canonical(label)
    atoms = []
    for part in label.split(" and "):
        part = part.strip()
        if part == "circle":
            atoms.append(Atom("circle"))
            continue
        for rel in RELATIONS:
            sep = f" {rel} "
            if sep in part:
                a, b = part.split(sep, 1)
                if a in OBJECTS and b in OBJECTS and a != b:
                    atoms.append(Atom(rel, a, b))
                    break
        else:
            raise KeyError(f"unknown rearrangement label {label!r}")
    return tuple(atoms)


def all_task_labels() -> tuple[str, ...]:
    return TRAINING_LABELS + COMPOSITION_TASKS + NEW_CONCEPT_TASKS + NEW_TRAINING_TASKS


# --------------------------------------------------------------------------
# scene access
# --------------------------------------------------------------------------


def _idx(obj: str) -> int:
    return OBJECTS.index(obj) * FEATURES


def _xy_r(scenes: np.ndarray, obj: str):
    o = _idx(obj)
    return scenes[:, o], scenes[:, o + 1], scenes[:, o + 2]


def make_scene(objects: dict[str, tuple[float, float, float, float]]) -> np.ndarray:
    """Build a scene from ``{name: (x, y, r, theta)}`` for all three objects."""
    s = np.zeros(WIDTH)
    for k, name in enumerate(OBJECTS):
        x, y, r, th = objects[name]
        o = _idx(name)
        s[o:o + 4] = (x, y, r, th)
        s[o + 4 + k] = 1.0
    return s


def _batch(scenes) -> tuple[np.ndarray, bool]:
    s = np.asarray(scenes, dtype=np.float64)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if s.shape[1] != WIDTH:
        raise ShapeError(f"scene width must be {WIDTH}, got {s.shape[1]}")
    return s, single


def check_onehots(scenes: np.ndarray) -> None:
    for k, name in enumerate(OBJECTS):
        seg = scenes[:, _idx(name) + 4:_idx(name) + 7]
        expected = np.zeros(3)
        expected[k] = 1.0
        if not np.all(seg == expected):
            raise ShapeError(f"malformed one-hot for {name}")


# --------------------------------------------------------------------------
# predicates
# --------------------------------------------------------------------------


def _right(s, a, b, margin):
    xa, ya, ra = _xy_r(s, a)
    xb, yb, rb = _xy_r(s, b)
    m = ra if margin == "strict" else 2.0 * np.maximum(ra, rb)
    return (xa > xb) & (np.abs(ya - yb) <= m)


def _above(s, a, b, margin):
    xa, ya, ra = _xy_r(s, a)
    xb, yb, rb = _xy_r(s, b)
    m = ra if margin == "strict" else 2.0 * np.maximum(ra, rb)
    return (ya > yb) & (np.abs(xa - xb) <= m)


def _diagonal(s, a, b, margin):
    xa, ya, ra = _xy_r(s, a)
    xb, yb, rb = _xy_r(s, b)
    if margin == "strict":
        on_line = (np.abs(xa - ya) <= STRICT_TOL) & (np.abs(xb - yb) <= STRICT_TOL)
        return on_line & _right(s, a, b, "strict") & _above(s, a, b, "strict")
    m = 2.0 * np.maximum(ra, rb)
    return (xa > xb) & (ya > yb) & (np.abs(ya - xa) <= m) & (np.abs(yb - xb) <= m)


def circumradius(scenes) -> np.ndarray:
    """Radius of the circle through the three centres (inf when collinear)."""
    s, _ = _batch(scenes)
    p = [np.stack(_xy_r(s, o)[:2], axis=1) for o in OBJECTS]
    a = np.linalg.norm(p[1] - p[2], axis=1)
    b = np.linalg.norm(p[0] - p[2], axis=1)
    c = np.linalg.norm(p[0] - p[1], axis=1)
    u, v = p[1] - p[0], p[2] - p[0]
    area2 = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(area2 > 1e-12, a * b * c / (2.0 * area2), np.inf)
    return r


def _circle(s, margin):
    r = circumradius(s)
    if margin == "strict":
        p = [np.stack(_xy_r(s, o)[:2], axis=1) for o in OBJECTS]
        d = np.stack([np.linalg.norm(p[i] - p[j], axis=1) for i, j in ((0, 1), (1, 2), (0, 2))], axis=1)
        equal = (d.max(axis=1) - d.min(axis=1)) <= 1e-7
        return equal & (np.abs(r - CIRCLE_RADIUS) <= 1e-7)
    return np.abs(r - CIRCLE_RADIUS) < CIRCLE_TOL


def _atom_holds(s: np.ndarray, atom: Atom, margin: str) -> np.ndarray:
    if atom.kind == "right of":
        return _right(s, atom.a, atom.b, margin)
    if atom.kind == "above":
        return _above(s, atom.a, atom.b, margin)
    if atom.kind == "diagonal to":
        return _diagonal(s, atom.a, atom.b, margin)
    return _circle(s, margin)


def holds(scenes, label: str, margin: str = "relaxed"):
    """Conjunction of the label's atoms under ``"strict"`` or ``"relaxed"`` margins."""
    s, single = _batch(scenes)
    ok = np.ones(s.shape[0], dtype=bool)
    for atom in parse_label(label):
        ok &= _atom_holds(s, atom, margin)
    return bool(ok[0]) if single else ok


def eval_rearrangement(scenes, label: str):
    """Relaxed (evaluation-time) predicate; scenes must carry valid one-hots."""
    s, single = _batch(scenes)
    check_onehots(s)
    out = holds(s, label, "relaxed")
    return bool(out[0]) if single else out


def non_overlapping(scenes) -> np.ndarray:
    s, _ = _batch(scenes)
    ok = np.ones(s.shape[0], dtype=bool)
    for i, a in enumerate(OBJECTS):
        for b in OBJECTS[i + 1:]:
            xa, ya, ra = _xy_r(s, a)
            xb, yb, rb = _xy_r(s, b)
            ok &= np.hypot(xa - xb, ya - yb) > ra + rb
    return ok


def in_bounds(scenes) -> np.ndarray:
    s, _ = _batch(scenes)
    ok = np.ones(s.shape[0], dtype=bool)
    for o in OBJECTS:
        x, y, _ = _xy_r(s, o)
        ok &= (x >= 0) & (x <= ARENA) & (y >= 0) & (y <= ARENA)
    return ok


def _allowed_training_atoms(atoms: tuple[Atom, ...]) -> set[tuple[str, str, str]]:
    allowed = set()
    for at in atoms:
        if at.kind in ("right of", "above"):
            allowed.add((at.kind, at.a, at.b))
        elif at.kind == "diagonal to":
            allowed.add(("right of", at.a, at.b))
            allowed.add(("above", at.a, at.b))
    return allowed


def incidental_relations(scenes, label: str) -> np.ndarray:
    """True where some strict training relation not implied by ``label`` holds."""
    s, _ = _batch(scenes)
    allowed = _allowed_training_atoms(parse_label(label))
    bad = np.zeros(s.shape[0], dtype=bool)
    for a in OBJECTS:
        for b in OBJECTS:
            if a == b:
                continue
            for kind, fn in (("right of", _right), ("above", _above)):
                if (kind, a, b) not in allowed:
                    bad |= fn(s, a, b, "strict")
    return bad


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _candidates(atoms: tuple[Atom, ...], n: int, rng: Rng) -> np.ndarray:
    s = np.zeros((n, WIDTH))
    for k, name in enumerate(OBJECTS):
        o = _idx(name)
        s[:, o] = rng.uniform(0.0, ARENA, n)
        s[:, o + 1] = rng.uniform(0.0, ARENA, n)
        s[:, o + 2] = rng.uniform(R_MIN, R_MAX, n)
        s[:, o + 3] = rng.uniform(0.0, 2.0 * math.pi, n)
        s[:, o + 4 + k] = 1.0
    for at in atoms:
        if at.kind == "diagonal to":
            oa, ob = _idx(at.a), _idx(at.b)
            ub = rng.uniform(0.0, ARENA, n)
            ua = ub + rng.uniform(0.0, 1.0, n) * s[:, oa + 2]
            s[:, oa] = s[:, oa + 1] = ua
            s[:, ob] = s[:, ob + 1] = ub
        elif at.kind == "circle":
            cx = rng.uniform(0.0, ARENA, n)
            cy = rng.uniform(0.0, ARENA, n)
            phase = rng.uniform(0.0, 2.0 * math.pi, n)
            orient = np.where(rng.bernoulli(0.5, n), 1.0, -1.0)
            for k, name in enumerate(OBJECTS):
                ang = phase + orient * 2.0 * math.pi * k / 3.0
                s[:, _idx(name)] = cx + CIRCLE_RADIUS * np.cos(ang)
                s[:, _idx(name) + 1] = cy + CIRCLE_RADIUS * np.sin(ang)
    return s


def gen_rearrangement(label: str, count: int, rng: Rng, *, exclusive: bool = False,
                      budget_per_scene: int = DEFAULT_BUDGET, chunk: int = 4096) -> np.ndarray:
    """Rejection-sample ``count`` scenes satisfying ``label``'s strict predicate.

    Every scene is non-overlapping and in bounds.  With ``exclusive`` (used for
    new-task demonstrations) scenes containing strict training relations that
    the label does not call for are rejected too.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    atoms = parse_label(label)
    canon = canonical(label)
    budget = budget_per_scene * count
    got: list[np.ndarray] = []
    n_got = attempts = 0
    while n_got < count:
        if attempts >= budget:
            raise BudgetExhausted(f"rejection sampling for {canon!r}", attempts, n_got)
        m = min(chunk, budget - attempts)
        cand = _candidates(atoms, m, rng)
        attempts += m
        ok = holds(cand, canon, "strict") & non_overlapping(cand) & in_bounds(cand)
        if exclusive:
            ok &= ~incidental_relations(cand, canon)
        acc = cand[ok]
        got.append(acc)
        n_got += acc.shape[0]
    out = np.concatenate(got)[:count]
    log.debug("generated %d scenes for %r, acceptance %.4f", count, canon, n_got / attempts)
    return out


def random_valid_scenes(count: int, rng: Rng) -> np.ndarray:
    """Uniform non-overlapping scenes (the base-rate reference distribution)."""
    got, n = [], 0
    while n < count:
        cand = _candidates((), 4096, rng)
        cand = cand[non_overlapping(cand)]
        got.append(cand)
        n += cand.shape[0]
    return np.concatenate(got)[:count]


def base_rate(label: str, rng: Rng, n: int = 20_000) -> float:
    """Acceptance of the relaxed predicate on uniformly random valid scenes."""
    return float(np.mean(holds(random_valid_scenes(n, rng), label, "relaxed")))


def training_set(rng: Rng, per_label: int = TRAINING_DATASET_SIZE // len(TRAINING_LABELS)) -> dict[str, np.ndarray]:
    return {lab: gen_rearrangement(lab, per_label, rng.child("train", lab)) for lab in TRAINING_LABELS}


# --------------------------------------------------------------------------
# normalisation
# --------------------------------------------------------------------------

_SHIFT = np.tile([2.5, 2.5, 0.5 * (R_MIN + R_MAX), math.pi, 0.5, 0.5, 0.5], len(OBJECTS))
_SCALE = np.tile([2.5, 2.5, 0.5 * (R_MAX - R_MIN), math.pi, 0.5, 0.5, 0.5], len(OBJECTS))


def encode(scenes) -> np.ndarray:
    """Affine map of every feature onto roughly [-1, 1]."""
    return (np.asarray(scenes, dtype=np.float64) - _SHIFT) / _SCALE


def decode(x) -> np.ndarray:
    """Inverse of :func:`encode`; one-hot segments are reset to their slot's type."""
    s = np.atleast_2d(np.asarray(x, dtype=np.float64)) * _SCALE + _SHIFT
    for k, name in enumerate(OBJECTS):
        o = _idx(name)
        s[:, o + 4:o + 7] = 0.0
        s[:, o + 4 + k] = 1.0
    return s[0] if np.ndim(x) == 1 else s
