"""Shared helpers: tiny models and a central finite-difference oracle."""

from __future__ import annotations

import numpy as np

from conceptinv.numerics import InputLayout, MlpDenoiser, Rng, mlp_grad

FD_STEP = 1e-6
REL_TOL = 1e-4
ABS_FLOOR = 1e-8


def tiny_denoiser(seed=0, x=5, concept=4, s0=0, time=8, hidden=(16, 16)) -> MlpDenoiser:
    """Small denoiser with every layer random, including the (normally down-scaled) output layer and biases."""
    model = MlpDenoiser.init(InputLayout(x, concept, s0, time), hidden, Rng(seed))
    r = Rng(seed).child("tiny")
    last = f"W{model.net.n_layers - 1}"
    params = dict(model.params)
    params[last] = r.normal(params[last].shape) / np.sqrt(params[last].shape[0])
    for name, v in model.params.items():
        if name.startswith("b"):
            params[name] = 0.1 * r.normal(v.shape)
    return model.with_params(params)


def rel_err(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), ABS_FLOOR)


def agree(analytic, numeric) -> bool:
    """Elementwise relative error below 1e-4, with a 1e-8 absolute floor."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all((np.abs(a - n) <= ABS_FLOOR) | (rel_err(a, n) < REL_TOL)))


def loss_of(model, x_t, concept, s0, t, target) -> float:
    return mlp_grad(model, x_t, concept, s0, t, target, wrt=()).loss


def fd_param(model, name, index, x_t, concept, s0, t, target, h=FD_STEP) -> float:
    def at(delta):
        params = {k: np.array(v) for k, v in model.params.items()}
        params[name][index] += delta
        return loss_of(model.with_params(params), x_t, concept, s0, t, target)
    return (at(h) - at(-h)) / (2 * h)


def fd_input(model, seg, index, args, h=FD_STEP) -> float:
    def at(delta):
        a = {k: (None if v is None else np.array(v)) for k, v in args.items()}
        a[seg][index] += delta
        return loss_of(model, a["x"], a["concept"], a["s0"], a["t"], a["target"])
    return (at(h) - at(-h)) / (2 * h)


def gradient_case(rng: Rng, case: int):
    """Random (model, batch) pair of varying depth, widths and segment layout."""
    r = rng.child("case", case)
    depth = int(r.integers(1, 4))
    hidden = tuple(int(w) for w in r.integers(3, 12, size=depth))
    x = int(r.integers(1, 7))
    concept = int(r.integers(1, 6))
    s0 = int(r.choice((0, 0, 3)))
    model = tiny_denoiser(seed=int(r.integers(0, 2**31)), x=x, concept=concept, s0=s0, time=4, hidden=hidden)
    B = int(r.integers(1, 6))
    args = {"x": r.normal((B, x)), "concept": r.uniform(0, 1, (B, concept)),
            "s0": r.normal((B, s0)) if s0 else None, "t": r.integers(1, 101, size=B), "target": r.normal((B, x))}
    return model, args, r


def toy_domain(steps=1500, seed=0):
    """Denoiser trained on two concepts whose samples sit near +0.8 or -0.8 in every coordinate."""
    from conceptinv.concepts import ConceptVocabulary
    from conceptinv.diffusion import DiffusionSchedule, train_denoiser

    vocab = ConceptVocabulary(("up", "down"), 7)
    r = Rng(seed, 1)
    n = 400
    x0 = np.concatenate([0.8 + 0.05 * r.normal((n, 4)), -0.8 + 0.05 * r.normal((n, 4))])
    c = np.concatenate([np.tile(vocab["up"], (n, 1)), np.tile(vocab["down"], (n, 1))])
    model = MlpDenoiser.init(InputLayout(4, vocab.dim, 0, 16), (64, 64), Rng(seed, 2))
    sched = DiffusionSchedule.default()
    model, _ = train_denoiser(model, sched, x0, c, None, vocab.null, steps=steps, batch_size=128, lr=3e-3,
                              p_drop=0.1, rng=Rng(seed, 3), warmup=50, log_every=0)
    return model, sched, vocab, x0
