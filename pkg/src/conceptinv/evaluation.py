"""Accuracy aggregation, ablation / component / guidance-weight tables, PCA export
and the CSV + JSON report writers.

Nothing here mutates models or datasets; every function takes what it scores
and returns plain rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .concepts import InversionResult
from .diffusion import CompositionSpec, DiffusionSchedule, sample
from .numerics import MlpDenoiser, Rng
from .storage import atomic_write, canonical_json


@dataclass
class Summary:
    """Mean and standard error across task types, plus the per-task accuracies."""

    per_task: dict[str, float]
    n: int                               # samples per task
    mean: float = field(init=False)
    sem: float | None = field(init=False)

    def __post_init__(self):
        self.mean, self.sem = mean_sem(list(self.per_task.values()))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sem": self.sem, "n": self.n, "per_task": dict(self.per_task)}


def mean_sem(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and sample-std / sqrt(m); the SEM is undefined (None) for a single value."""
    if not values:
        raise ValueError("nothing to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]), None
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def accuracy(labels: Iterable[str], generate: Callable[[str, int, Rng], object],
             predicate: Callable[[str, object], np.ndarray], n: int, rng: Rng) -> Summary:
    """Generate ``n`` samples per label and score them with the domain predicate."""
    if n < 1:
        raise ValueError("need at least one sample per task")
    per = {}
    for lab in labels:
        samples = generate(lab, n, rng.child("accuracy", lab))
        hits = np.asarray(predicate(lab, samples), dtype=bool)
        if hits.shape != (n,):
            raise ValueError(f"predicate for {lab!r} returned shape {hits.shape}, expected ({n},)")
        per[lab] = float(hits.mean())
    return Summary(per, n)


def ablation_components(evaluate: Callable[[str, int], Summary], settings: Sequence[str],
                        ks: Sequence[int] = (1, 2)) -> list[dict]:
    """One row per (setting, K) from ``evaluate(setting, K)``."""
    rows = []
    for setting in settings:
        for k in ks:
            s = evaluate(setting, k)
            rows.append({"setting": setting, "k": k, "mean": s.mean, "sem": s.sem,
                         "tasks": len(s.per_task), "n": s.n})
    return rows


def component_analysis(model: MlpDenoiser, schedule: DiffusionSchedule, result: InversionResult,
                       null: np.ndarray, constituents: Sequence[str],
                       predicate: Callable[[str, np.ndarray], np.ndarray], decode: Callable,
                       n: int, rng: Rng, s0=None, temperature: float = 0.5) -> list[dict]:
    """Score samples generated from each learned component alone against each constituent."""
    spec = result.spec(null, temperature)
    rows = []
    for k in range(result.k):
        x = decode(sample(model, schedule, spec.only(k), s0, rng.child("component", k), n=n))
        row = {"component": k, "weight": result.weights[k]}
        for c in constituents:
            row[c] = float(np.mean(predicate(c, x)))
        rows.append(row)
    return rows


def specialised_component(rows: Sequence[Mapping], constituents: Sequence[str],
                          hi: float = 0.5, lo: float = 0.3) -> bool:
    """Some component scores >= ``hi`` on exactly one constituent and < ``lo`` on the others."""
    for row in rows:
        scores = [row[c] for c in constituents]
        strong = [s >= hi for s in scores]
        if sum(strong) == 1 and all(s < lo for s, st in zip(scores, strong) if not st):
            return True
    return False


def omega_sweep(evaluate: Callable[[str | float], Summary],
                grid: Sequence[str | float] = (1.2, 1.4, 1.6, 1.8, "learned")) -> list[dict]:
    rows = []
    for w in grid:
        s = evaluate(w)
        rows.append({"omega": w if isinstance(w, str) else float(w), "mean": s.mean, "sem": s.sem,
                     "tasks": len(s.per_task), "n": s.n})
    return rows


def pca_2d(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top-2 eigenvectors of their covariance; returns (coords, axes)."""
    X = np.asarray(vectors, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(1, X.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    axes = vecs[:, np.argsort(vals)[::-1][:2]]
    # fix each axis's sign so the export does not depend on the eigensolver
    for j in range(axes.shape[1]):
        i = np.argmax(np.abs(axes[:, j]))
        if axes[i, j] < 0:
            axes[:, j] = -axes[:, j]
    return Xc @ axes, axes


def pca_export(vocab_names: Sequence[str], vocab_vectors: np.ndarray,
               learned: Mapping[str, np.ndarray]) -> list[dict]:
    """2-D PCA of training concepts and learned components, with each point's nearest training concept."""
    names = list(vocab_names) + list(learned)
    V = np.asarray(vocab_vectors, dtype=np.float64)
    X = np.vstack([V] + [np.atleast_2d(v) for v in learned.values()]) if learned else V
    coords, _ = pca_2d(X)
    rows = []
    for i, name in enumerate(names):
        d = np.linalg.norm(V - X[i], axis=1)
        if i < len(vocab_names):
            d[i] = np.inf
        j = int(np.argmin(d))
        rows.append({"name": name, "kind": "training" if i < len(vocab_names) else "learned",
                     "pc1": float(coords[i, 0]), "pc2": float(coords[i, 1]),
                     "nearest": vocab_names[j], "distance": float(d[j])})
    return rows


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def csv_text(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    if columns is None:
        columns = []
        for row in rows:
            columns += [c for c in row if c not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> None:
    atomic_write(path, csv_text(rows, columns))


def write_json(path, obj) -> None:
    atomic_write(Path(path), json.dumps(json.loads(canonical_json(obj)), indent=2, sort_keys=True) + "\n")
