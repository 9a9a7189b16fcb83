"""DDPM machinery: schedules, forward noising, the conditioning-dropout
training objective, guided / compositional noise prediction, and the
temperature-scaled ancestral sampler."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError, ShapeError
from .numerics import AdamW, MlpDenoiser, Rng, check_finite, mlp_forward, mlp_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with the derived DDPM tables.

    Tables are indexed by step ``t`` in ``1..T`` through :meth:`at`; the raw
    arrays are 0-based (entry ``t-1``).
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar_prev: np.ndarray = field(init=False, repr=False, compare=False)
    posterior_var: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("schedule needs at least one step")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        beta = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - beta)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        post = beta * (1.0 - prev) / (1.0 - alpha_bar)
        for name, arr in (("beta", beta), ("alpha_bar", alpha_bar), ("alpha_bar_prev", prev), ("posterior_var", post)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def default(cls) -> "DiffusionSchedule":
        return cls(T=100, beta_start=1e-4, beta_end=0.085)

    def check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ShapeError(f"diffusion step out of range 1..{self.T}: {t}")
        return t_arr

    def at(self, table: str, t):
        return getattr(self, table)[self.check_t(t) - 1]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": "linear"}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(T=int(d["T"]), beta_start=float(d["beta_start"]), beta_end=float(d["beta_end"]))


def _col(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim)) if np.ndim(v) else v


def forward_noise(schedule: DiffusionSchedule, x0, t, rng: Rng | None, eps=None):
    """Sample ``x_t ~ q(x_t | x_0)``; returns ``(x_t, eps)``.

    ``t`` is a scalar or a per-row array.  Pass ``eps`` to fix the noise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ab = schedule.at("alpha_bar", t)
    if eps is None:
        eps = rng.normal(x0.shape)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = _col(np.sqrt(ab), x0) * x0 + _col(np.sqrt(1.0 - ab), x0) * eps
    return x_t, eps


@dataclass
class TrainBatch:
    x0: np.ndarray                 # (B, dx) normalised states
    concepts: np.ndarray           # (B, n)
    s0: np.ndarray | None = None   # (B, ds)


@dataclass
class LossResult:
    loss: float
    grads: dict
    t: np.ndarray
    dropped: np.ndarray


def training_loss(model: MlpDenoiser, schedule: DiffusionSchedule, batch: TrainBatch,
                  null_concept: np.ndarray, p_drop: float, rng: Rng) -> LossResult:
    """Noise-prediction MSE with conditioning dropout, plus parameter gradients.

    Each row draws its own step ``t ~ U{1..T}``, noise, and a Bernoulli(p_drop)
    switch that swaps its concept for the null concept.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    B = batch.x0.shape[0]
    if B == 0:
        raise ValueError("empty training batch")
    t = rng.integers(1, schedule.T + 1, size=B)
    x_t, eps = forward_noise(schedule, batch.x0, t, rng)
    dropped = rng.bernoulli(p_drop, size=B)
    concepts = np.where(dropped[:, None], np.asarray(null_concept)[None, :], batch.concepts)
    try:
        res = mlp_grad(model, x_t, concepts, batch.s0, t, eps, wrt=("params",))
    except NumericalError as err:
        row = err.diagnostics.get("row", -1)
        raise NumericalError("non-finite training loss", row=row, t=int(t[row]) if row >= 0 else None) from err
    return LossResult(loss=res.loss, grads=res.params, t=t, dropped=dropped)


def train_denoiser(model: MlpDenoiser, schedule: DiffusionSchedule, x0: np.ndarray, concepts: np.ndarray,
                   s0: np.ndarray | None, null_concept: np.ndarray, *, steps: int, batch_size: int,
                   lr: float, p_drop: float, rng: Rng, weight_decay: float = 0.0,
                   warmup: int = 200, log_every: int = 500) -> tuple[MlpDenoiser, list[float]]:
    """Minibatch AdamW on :func:`training_loss` with warmup + cosine decay."""
    opt = AdamW(lr, weight_decay=weight_decay)
    n = x0.shape[0]
    params = dict(model.params)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        batch = TrainBatch(x0[idx], concepts[idx], None if s0 is None else s0[idx])
        cur = model.with_params(params) if step else model
        res = training_loss(cur, schedule, batch, null_concept, p_drop, rng)
        losses.append(res.loss)
        if step < warmup:
            step_lr = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        params = opt.step(params, res.grads, lr=step_lr)
        if log_every and (step + 1) % log_every == 0:
            log.info("train step %d/%d loss %.5f", step + 1, steps, float(np.mean(losses[-log_every:])))
    return model.with_params(params), losses


# --------------------------------------------------------------------------
# guidance and sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositionSpec:
    """Weighted concept terms around the null concept, plus sampling temperature."""

    terms: tuple[tuple[np.ndarray, float], ...]
    null: np.ndarray
    temperature: float = 0.5

    def __post_init__(self):
        if not self.terms:
            raise ValueError("composition needs at least one term")
        for _, w in self.terms:
            if not math.isfinite(w):
                raise ValueError("composition weights must be finite")
        if not 0.0 <= self.temperature < 1.0:
            raise ValueError(f"temperature must lie in [0, 1), got {self.temperature}")

    @classmethod
    def of(cls, concepts: Sequence, weights: Sequence[float], null, temperature: float = 0.5) -> "CompositionSpec":
        if len(concepts) != len(weights):
            raise ValueError("one weight per concept")
        terms = tuple((np.asarray(c, dtype=np.float64), float(w)) for c, w in zip(concepts, weights))
        return cls(terms, np.asarray(null, dtype=np.float64), float(temperature))

    def only(self, k: int) -> "CompositionSpec":
        return CompositionSpec((self.terms[k],), self.null, self.temperature)

    def plus(self, concept, weight: float) -> "CompositionSpec":
        return CompositionSpec(self.terms + ((np.asarray(concept, dtype=np.float64), float(weight)),),
                               self.null, self.temperature)


def guided_eps(model: MlpDenoiser, x_t, t, s0, spec: CompositionSpec) -> np.ndarray:
    """eps_null + sum_k w_k (eps_k - eps_null): one unconditional + K conditional calls."""
    e0 = mlp_forward(model, x_t, spec.null, s0, t)
    out = e0
    for concept, w in spec.terms:
        ek = mlp_forward(model, x_t, concept, s0, t)
        out = out + w * (ek - e0)
    return out


def sample(model: MlpDenoiser, schedule: DiffusionSchedule, spec: CompositionSpec, s0, rng: Rng,
           n: int | None = None) -> np.ndarray:
    """Ancestral DDPM sampling with temperature ``spec.temperature``.

    ``x_T ~ N(0, a I)`` and ``x_{t-1} ~ N(mu, a * posterior_var)`` with ``mu``
    the DDPM posterior mean built from the guided noise estimate.  Chain ``i``
    draws from its own stream ``rng.child("chain", i)``, so a chain's result
    does not depend on how many chains share the batch.

    Returns an ``(n, dx)`` array in the model's (normalised) state space.
    """
    if s0 is not None:
        s0 = np.asarray(s0, dtype=np.float64)
        if s0.ndim == 1:
            s0 = s0[None, :]
        n = s0.shape[0] if n is None else n
        if s0.shape[0] != n:
            raise ShapeError(f"{s0.shape[0]} initial states for {n} chains")
    if n is None or n < 1:
        raise ValueError("number of chains must be given and positive")
    dx = model.layout.x
    temp = spec.temperature
    chains = [rng.child("chain", i) for i in range(n)]
    noise_scale = math.sqrt(temp)
    x = np.stack([c.normal(dx) for c in chains]) * noise_scale
    for t in range(schedule.T, 0, -1):
        eps = guided_eps(model, x, t, s0, spec)
        beta = schedule.beta[t - 1]
        ab = schedule.alpha_bar[t - 1]
        mu = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if t > 1 and temp > 0.0:
            sd = math.sqrt(temp * schedule.posterior_var[t - 1])
            z = np.stack([c.normal(dx) for c in chains])
            x = mu + sd * z
        else:
            x = mu
        if not np.isfinite(x).all():
            raise NumericalError("non-finite state in reverse chain", step=t)
    check_finite(x, "sample")
    return x
