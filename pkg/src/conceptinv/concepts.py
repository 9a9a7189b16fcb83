"""Concept vocabulary and concept inversion against a frozen denoiser.

Inversion fits K concept vectors and their guidance weights so that the
composed noise estimate ``eps_null + sum_k w_k (eps_k - eps_null)`` explains a
handful of demonstrations, with the denoiser parameters held fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import CompositionSpec, DiffusionSchedule, forward_noise
from .errors import ArtifactError, NumericalError
from .numerics import AdamW, MlpDenoiser, Rng, forward_cached, mlp_forward, param_digest, stream_id, vjp_cached

log = logging.getLogger(__name__)

CONCEPT_DIM = 16
NULL_LABEL = ""
DIVERGENCE_LOSS = 1e6
OMEGA_LOW, OMEGA_HIGH = 1e-3, 1e2
FIXED_OMEGAS = (1.2, 1.4, 1.6, 1.8)


class ConceptVocabulary:
    """Deterministic label -> vector table; each vector is a seeded U([0,1]^n) draw.

    The empty label is reserved for the null concept.
    """

    def __init__(self, labels: Sequence[str], seed: int, dim: int = CONCEPT_DIM):
        labels = tuple(labels)
        if len(set(labels)) != len(labels):
            raise ValueError("vocabulary labels must be unique")
        if NULL_LABEL in labels:
            raise ValueError("the empty label is reserved for the null concept")
        self.labels = labels
        self.seed = int(seed)
        self.dim = int(dim)
        self._table = {lab: self._draw(lab) for lab in (NULL_LABEL, *labels)}

    def _draw(self, label: str) -> np.ndarray:
        v = Rng(self.seed, stream_id("concept", label)).uniform(0.0, 1.0, self.dim)
        v.flags.writeable = False
        return v

    @property
    def null(self) -> np.ndarray:
        return self._table[NULL_LABEL]

    def __contains__(self, label: str) -> bool:
        return label in self._table

    def __getitem__(self, label: str) -> np.ndarray:
        return embed(self, label)

    def matrix(self) -> np.ndarray:
        return np.stack([self._table[lab] for lab in self.labels])

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "seed": self.seed, "dim": self.dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptVocabulary":
        return cls(d["labels"], d["seed"], d.get("dim", CONCEPT_DIM))


def embed(vocab: ConceptVocabulary, label: str) -> np.ndarray:
    try:
        return vocab._table[label]
    except KeyError:
        raise KeyError(f"unknown concept label {label!r}") from None


def freeze_guard(model: MlpDenoiser) -> str:
    """Digest of every parameter byte; compared before and after inversion."""
    return param_digest(model.params)


@dataclass
class InversionOptions:
    k: int = 2
    steps: int = 2000
    lr: float = 1e-2
    draws_per_demo: int = 16
    omega: str | float = "learned"     # "learned" or a fixed guidance weight
    weight_decay: float = 0.01
    omega_l2: float = 0.0              # optional pull of learned weights toward 1

    def fixed_omega(self) -> float | None:
        return None if self.omega == "learned" else float(self.omega)


@dataclass
class InversionResult:
    components: list[np.ndarray]
    weights: list[float]
    loss_trace: list[float]
    config: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float("nan")

    @property
    def weight_flags(self) -> list[str]:
        """Components whose weight collapsed below 1e-3 or exceeded 1e2 (by magnitude)."""
        out = []
        for i, w in enumerate(self.weights):
            if abs(w) < OMEGA_LOW:
                out.append(f"component {i}: weight collapsed ({w:.3g})")
            elif abs(w) > OMEGA_HIGH:
                out.append(f"component {i}: weight diverged ({w:.3g})")
        return out

    def spec(self, null: np.ndarray, temperature: float = 0.5, omega: float | None = None) -> CompositionSpec:
        weights = self.weights if omega is None else [omega] * self.k
        return CompositionSpec.of(self.components, weights, null, temperature)

    def to_json(self) -> dict:
        return {
            "components": [c.tolist() for c in self.components],
            "weights": list(self.weights),
            "loss_trace": list(self.loss_trace),
            "config": self.config,
            "flags": self.weight_flags,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InversionResult":
        try:
            return cls([np.asarray(c, dtype=np.float64) for c in d["components"]],
                       [float(w) for w in d["weights"]], [float(v) for v in d["loss_trace"]],
                       dict(d.get("config", {})))
        except KeyError as err:
            raise ArtifactError(f"inversion record is missing {err}") from None


def _noise_draws(schedule: DiffusionSchedule, demos: np.ndarray, s0, draws: int, rng: Rng):
    reps = np.repeat(np.arange(demos.shape[0]), draws)
    x0 = demos[reps]
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    x_t, eps = forward_noise(schedule, x0, t, rng)
    return x_t, eps, t, None if s0 is None else s0[reps]


def composed_loss(model: MlpDenoiser, schedule: DiffusionSchedule, null: np.ndarray,
                  components: Sequence[np.ndarray], weights: Sequence[float], demos: np.ndarray,
                  s0, rng: Rng, draws_per_demo: int = 16) -> float:
    """Compositional noise-prediction loss on fresh ``(t, eps)`` draws from ``rng``."""
    x_t, eps, t, s0r = _noise_draws(schedule, demos, s0, draws_per_demo, rng)
    e0 = mlp_forward(model, x_t, null, s0r, t)
    pred = e0
    for c, w in zip(components, weights):
        pred = pred + w * (mlp_forward(model, x_t, c, s0r, t) - e0)
    return float(np.mean((eps - pred) ** 2))


def invert(model: MlpDenoiser, schedule: DiffusionSchedule, null: np.ndarray, demos: np.ndarray,
           s0: np.ndarray | None, opts: InversionOptions, rng: Rng) -> InversionResult:
    """Learn ``opts.k`` concept components (and weights) that reconstruct ``demos``.

    ``demos`` holds normalised demonstrations (N, dx); ``s0`` their initial
    states (N, ds) or None.  Components start from U([0,1]^n) and weights from
    1 (or the fixed weight).  Each step draws ``draws_per_demo`` (t, eps) pairs
    per demonstration and applies one AdamW update.
    """
    if opts.k < 1:
        raise ValueError("need at least one concept component")
    demos = np.atleast_2d(np.asarray(demos, dtype=np.float64))
    if demos.shape[0] == 0:
        raise ValueError("no demonstrations")
    before = freeze_guard(model)
    n = null.shape[0]
    fixed = opts.fixed_omega()
    init = rng.child("init")
    params = {f"c{k}": init.uniform(0.0, 1.0, n) for k in range(opts.k)}
    if fixed is None:
        params["omega"] = np.ones(opts.k)
    omega = np.full(opts.k, 1.0 if fixed is None else fixed)
    # decay acts on the components only; the guidance weights stay unregularised
    opt = AdamW(opts.lr, weight_decay=opts.weight_decay, no_decay=("omega",))
    trace: list[float] = []
    step_rng = rng.child("steps")
    for step in range(opts.steps):
        if fixed is None:
            omega = params["omega"]
        x_t, eps, t, s0r = _noise_draws(schedule, demos, s0, opts.draws_per_demo, step_rng)
        e0 = mlp_forward(model, x_t, null, s0r, t)
        caches = [forward_cached(model, x_t, params[f"c{k}"], s0r, t) for k in range(opts.k)]
        eks = [c.output for c in caches]
        pred = e0
        for k in range(opts.k):
            pred = pred + omega[k] * (eks[k] - e0)
        diff = pred - eps
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalError("concept inversion diverged", step=step, loss=loss, trace_tail=trace[-5:])
        trace.append(loss)
        g_pred = 2.0 * diff / diff.size
        grads = {}
        for k in range(opts.k):
            res = vjp_cached(model, caches[k], omega[k] * g_pred, wrt=("concept",))
            grads[f"c{k}"] = res.inputs["concept"]
        if fixed is None:
            g_om = np.array([np.sum(g_pred * (eks[k] - e0)) for k in range(opts.k)])
            if opts.omega_l2:
                g_om = g_om + 2.0 * opts.omega_l2 * (omega - 1.0)
            grads["omega"] = g_om
        params = opt.step(params, grads)
        if (step + 1) % 500 == 0:
            log.debug("invert step %d loss %.5f", step + 1, float(np.mean(trace[-100:])))
    if freeze_guard(model) != before:
        raise RuntimeError("denoiser parameters changed during inversion")
    weights = [float(w) for w in (params["omega"] if fixed is None else omega)]
    cfg = asdict(opts)
    cfg.update(seed=rng.seed, stream=rng.stream, model_digest=before)
    result = InversionResult([np.array(params[f"c{k}"]) for k in range(opts.k)], weights, trace, cfg)
    for flag in result.weight_flags:
        log.warning("inversion: %s", flag)
    return result
