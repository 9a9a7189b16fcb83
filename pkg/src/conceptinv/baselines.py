"""Baselines: goal-conditioned behaviour cloning and a conditional VAE.

Both work in the same normalised state space as the diffusion model and learn
new tasks from demonstrations with their weights frozen: BC by optimising its
input condition, the VAE by optimising its latent code.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError
from .numerics import AdamW, Mlp, Rng, check_finite, param_digest

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
KL_COLLAPSE = 1e-3


def _cosine_lr(lr: float, step: int, steps: int, warmup: int) -> float:
    if step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, steps - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _optimise_input(loss_and_grad, init: np.ndarray, steps: int, lr: float, weight_decay: float):
    """AdamW on a single free input vector; returns (vector, loss trace)."""
    opt = AdamW(lr, weight_decay=weight_decay)
    params = {"v": np.array(init, dtype=np.float64)}
    trace = []
    for step in range(steps):
        loss, g = loss_and_grad(params["v"])
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalError("input optimisation diverged", step=step, loss=loss)
        trace.append(loss)
        params = opt.step(params, {"v": g})
    return np.array(params["v"]), trace


# --------------------------------------------------------------------------
# behaviour cloning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BcModel:
    """MLP ``[condition | s0 | state] -> next state`` (one hidden layer).

    With ``state = s0 = 0`` widths it maps a condition straight to a scene.
    For trajectories the output is a displacement scaled by ``out_scale``
    and added to the current state.
    """

    net: Mlp
    cond: int
    s0: int
    state: int
    out_scale: float = 1.0

    @classmethod
    def init(cls, cond: int, s0: int, state: int, out: int, hidden: int, rng: Rng,
             out_scale: float = 1.0) -> "BcModel":
        return cls(Mlp.init((cond + s0 + state, hidden, out), rng), cond, s0, state, out_scale)

    @property
    def residual(self) -> bool:
        return self.state > 0

    def with_params(self, params) -> "BcModel":
        return BcModel(self.net.with_params(params), self.cond, self.s0, self.state, self.out_scale)

    def digest(self) -> str:
        return param_digest(self.net.params)

    def _input(self, cond, s0, state) -> np.ndarray:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        batch = max(cond.shape[0], 1 if s0 is None else np.atleast_2d(s0).shape[0],
                    1 if state is None else np.atleast_2d(state).shape[0])
        parts = [np.broadcast_to(cond, (batch, self.cond))]
        if self.s0:
            parts.append(np.broadcast_to(np.atleast_2d(s0), (batch, self.s0)))
        if self.state:
            parts.append(np.broadcast_to(np.atleast_2d(state), (batch, self.state)))
        inp = np.concatenate(parts, axis=1)
        if inp.shape[1] != self.net.widths[0]:
            raise ShapeError(f"BC input width {inp.shape[1]} != {self.net.widths[0]}")
        return inp

    def predict(self, cond, s0=None, state=None) -> np.ndarray:
        out = self.net.forward(self._input(cond, s0, state))
        return state + self.out_scale * out if self.residual else out

    def loss_grad(self, cond, s0, state, target, wrt_params: bool = True):
        """MSE to ``target`` with parameter gradients and the condition gradient (per row)."""
        inp = self._input(cond, s0, state)
        out, acts = self.net.forward(inp, keep=True)
        pred = state + self.out_scale * out if self.residual else out
        diff = pred - target
        loss = float(np.mean(diff * diff))
        g_out = 2.0 * diff / diff.size * (self.out_scale if self.residual else 1.0)
        g_params, g_in = self.net.backward(acts, g_out, want_params=wrt_params)
        return loss, g_params, g_in[:, :self.cond]


def bc_train(model: BcModel, cond: np.ndarray, s0, state, target: np.ndarray, *, steps: int,
             batch_size: int, lr: float, rng: Rng, weight_decay: float = 0.0,
             warmup: int = 100) -> tuple[BcModel, list[float]]:
    """Teacher-forced regression of the next state (or the scene) on minibatches."""
    opt = AdamW(lr, weight_decay=weight_decay)
    n = target.shape[0]
    params = dict(model.net.params)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        cur = model.with_params(params)
        loss, grads, _ = cur.loss_grad(cond[idx], None if s0 is None else s0[idx],
                                       None if state is None else state[idx], target[idx])
        if not math.isfinite(loss):
            raise NumericalError("non-finite BC loss", step=step)
        losses.append(loss)
        params = opt.step(params, grads, lr=_cosine_lr(lr, step, steps, warmup))
    return model.with_params(params), losses


def bc_rollout(model: BcModel, cond, s0: np.ndarray, start: np.ndarray, horizon: int) -> np.ndarray:
    """Iterate the model from ``start`` for ``horizon - 1`` steps; returns (B, horizon, state)."""
    state = np.atleast_2d(np.asarray(start, dtype=np.float64))
    out = [state]
    for _ in range(horizon - 1):
        state = model.predict(cond, s0, state)
        check_finite(state, "BC rollout state")
        out.append(state)
    return np.stack(out, axis=1)


def bc_generate(model: BcModel, cond, n: int, noise: float, rng: Rng) -> np.ndarray:
    """Condition-only outputs with ``N(0, noise^2)`` perturbations of the condition, one per seed."""
    cond = np.asarray(cond, dtype=np.float64)
    rows = np.stack([cond + rng.child("seed", i).normal(cond.shape, noise) for i in range(n)])
    return model.predict(rows)


def bc_invert_condition(model: BcModel, s0, state, target: np.ndarray, *, steps: int, lr: float,
                        rng: Rng, weight_decay: float = 0.01, base=None):
    """Learn one condition vector explaining demo transitions (weights frozen).

    ``base`` (optional) is added to the learned condition, which is how a
    learned concept is composed with a known one.
    """
    before = model.digest()
    extra = 0.0 if base is None else np.asarray(base, dtype=np.float64)

    def loss_and_grad(c):
        loss, _, g_c = model.loss_grad(c + extra, s0, state, target, wrt_params=False)
        return loss, g_c.sum(axis=0)

    c, trace = _optimise_input(loss_and_grad, rng.uniform(0.0, 1.0, model.cond), steps, lr, weight_decay)
    if model.digest() != before:
        raise RuntimeError("BC parameters changed during condition inversion")
    return c, trace


def transitions(trajs: np.ndarray, s0: np.ndarray):
    """Consecutive (s0, state, next) pairs from (N, H, d) trajectories."""
    n, h, d = trajs.shape
    cur = trajs[:, :-1].reshape(-1, d)
    nxt = trajs[:, 1:].reshape(-1, d)
    s0r = np.repeat(s0, h - 1, axis=0)
    return s0r, cur, nxt


# --------------------------------------------------------------------------
# conditional VAE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CvaeModel:
    """Encoder ``x -> (mu, log var)`` and decoder ``[z | s0] -> x``.

    ``sigma`` is the decoder's output standard deviation (normalised units);
    the reconstruction term is the Gaussian negative log-likelihood.
    """

    enc: Mlp
    dec: Mlp
    latent: int
    s0: int
    sigma: float

    @classmethod
    def init(cls, x: int, s0: int, latent: int, hidden: int, sigma: float, rng: Rng) -> "CvaeModel":
        return cls(Mlp.init((x + s0, hidden, 2 * latent), rng.child("enc")),
                   Mlp.init((latent + s0, hidden, x), rng.child("dec")), latent, s0, sigma)

    def with_params(self, enc, dec) -> "CvaeModel":
        return CvaeModel(self.enc.with_params(enc), self.dec.with_params(dec), self.latent, self.s0, self.sigma)

    def digest(self) -> str:
        return param_digest({**{f"enc/{k}": v for k, v in self.enc.params.items()},
                             **{f"dec/{k}": v for k, v in self.dec.params.items()}})

    def _cat(self, a, s0) -> np.ndarray:
        a = np.atleast_2d(a)
        if not self.s0:
            return a
        return np.concatenate([a, np.broadcast_to(np.atleast_2d(s0), (a.shape[0], self.s0))], axis=1)

    def encode(self, x, s0=None) -> tuple[np.ndarray, np.ndarray]:
        out = self.enc.forward(self._cat(x, s0))
        return out[:, :self.latent], out[:, self.latent:]

    def decode(self, z, s0=None) -> np.ndarray:
        z = np.atleast_2d(z)
        if s0 is not None and self.s0:
            z = np.broadcast_to(z, (np.atleast_2d(s0).shape[0], self.latent))
        return self.dec.forward(self._cat(z, s0))


@dataclass
class CvaeLoss:
    loss: float
    recon_mse: float
    kl: float


def cvae_loss_grad(model: CvaeModel, x: np.ndarray, s0, rng: Rng, kl_weight: float = 1.0):
    """Negative ELBO per example (Gaussian decoder, unit prior) and its gradients."""
    B = x.shape[0]
    enc_in = model._cat(x, s0)
    enc_out, enc_acts = model.enc.forward(enc_in, keep=True)
    L = model.latent
    mu, lv = enc_out[:, :L], enc_out[:, L:]
    std = np.exp(0.5 * lv)
    e = rng.normal(mu.shape)
    z = mu + std * e
    dec_out, dec_acts = model.dec.forward(model._cat(z, s0), keep=True)
    diff = dec_out - x
    s2 = model.sigma ** 2
    recon = 0.5 * float(np.sum(diff * diff)) / s2 / B
    kl_rows = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=1)
    kl = float(np.mean(kl_rows))
    loss = recon + kl_weight * kl
    if not math.isfinite(loss):
        raise NumericalError("non-finite VAE loss")
    g_dec, g_din = model.dec.backward(dec_acts, diff / s2 / B)
    g_z = g_din[:, :L]
    g_mu = g_z + kl_weight * mu / B
    g_lv = g_z * e * 0.5 * std + kl_weight * 0.5 * (np.exp(lv) - 1.0) / B
    g_enc, _ = model.enc.backward(enc_acts, np.concatenate([g_mu, g_lv], axis=1))
    return CvaeLoss(loss, float(np.mean(diff * diff)), kl), g_enc, g_dec


def cvae_train(model: CvaeModel, x: np.ndarray, s0, *, steps: int, batch_size: int, lr: float,
               rng: Rng, kl_weight: float = 1.0, warmup: int = 100) -> tuple[CvaeModel, list[CvaeLoss]]:
    opt_e, opt_d = AdamW(lr, weight_decay=0.0), AdamW(lr, weight_decay=0.0)
    enc, dec = dict(model.enc.params), dict(model.dec.params)
    hist = []
    n = x.shape[0]
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        cur = model.with_params(enc, dec)
        res, g_enc, g_dec = cvae_loss_grad(cur, x[idx], None if s0 is None else s0[idx], rng, kl_weight)
        hist.append(res)
        step_lr = _cosine_lr(lr, step, steps, warmup)
        enc = opt_e.step(enc, g_enc, lr=step_lr)
        dec = opt_d.step(dec, g_dec, lr=step_lr)
    trained = model.with_params(enc, dec)
    if kl_collapsed(hist):
        log.warning("VAE posterior collapse: mean KL %.2e < %.0e", np.mean([h.kl for h in hist[-100:]]), KL_COLLAPSE)
    return trained, hist


def kl_collapsed(hist: list[CvaeLoss], window: int = 100) -> bool:
    return bool(hist) and float(np.mean([h.kl for h in hist[-window:]])) < KL_COLLAPSE


def cvae_generate(model: CvaeModel, z: np.ndarray, s0, n: int, noise: float, rng: Rng) -> np.ndarray:
    """Decode ``z + N(0, noise^2)``, one perturbation per output (``noise = 0`` is deterministic)."""
    z = np.asarray(z, dtype=np.float64)
    zs = np.stack([z + (rng.child("z", i).normal(z.shape, noise) if noise > 0 else 0.0) for i in range(n)])
    if s0 is not None:
        s0 = np.broadcast_to(np.atleast_2d(s0), (n, model.s0))
    return model.dec.forward(model._cat(zs, s0))


def cvae_invert_latent(model: CvaeModel, demos: np.ndarray, s0, *, steps: int, lr: float, rng: Rng,
                       weight_decay: float = 0.0):
    """One latent code minimising decoder reconstruction MSE on ``demos`` (decoder frozen)."""
    before = model.digest()
    demos = np.atleast_2d(demos)
    L = model.latent

    def loss_and_grad(z):
        zr = np.broadcast_to(z, (demos.shape[0], L))
        out, acts = model.dec.forward(model._cat(zr, s0), keep=True)
        diff = out - demos
        _, g_in = model.dec.backward(acts, 2.0 * diff / diff.size, want_params=False)
        return float(np.mean(diff * diff)), g_in[:, :L].sum(axis=0)

    z, trace = _optimise_input(loss_and_grad, rng.normal(L), steps, lr, weight_decay)
    if model.digest() != before:
        raise RuntimeError("VAE decoder changed during latent inversion")
    return z, trace
