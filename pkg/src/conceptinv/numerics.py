"""Dense float64 arithmetic, seeded random streams, and the MLP gradient engine.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (C order).  The
MLP here is used both as the diffusion denoiser and as the backbone of the
baselines; its backward pass is written out by hand so that gradients with
respect to parameters and to individual input segments are exact.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# tensors
# --------------------------------------------------------------------------


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a finite float64 array (copying only if needed)."""
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))
        raise NumericalError(f"non-finite values in {name}", first_index=tuple(int(i) for i in bad[0]))


def frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True, order="C")
    out.flags.writeable = False
    return out


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


def stream_id(*parts) -> int:
    """Stable 64-bit stream identifier from arbitrary printable parts.

    Uses BLAKE2b so the value does not depend on ``PYTHONHASHSEED``.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class Rng:
    """A (seed, stream) addressed PCG64 generator.

    PCG64 is the 128-bit LCG / XSL-RR output permutation generator from the
    PCG family (multiplier 0x2360ed051fc65da44385df649fccf645, O'Neill 2014).
    The 128-bit state is expanded from ``SeedSequence(seed, spawn_key=(stream,))``,
    so distinct streams under one seed are statistically independent and the
    sequence is identical on every platform.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, *parts) -> "Rng":
        """Independent generator addressed by this stream plus ``parts``."""
        return Rng(self.seed, stream_id(self.stream, *parts))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._gen.random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, options: Sequence, size=None):
        idx = self._gen.integers(0, len(options), size=size)
        if size is None:
            return options[int(idx)]
        return [options[int(i)] for i in np.ravel(idx)]


# --------------------------------------------------------------------------
# time embedding
# --------------------------------------------------------------------------


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step, interleaved ``[sin, cos, ...]``.

    ``t`` may be a scalar or a 1-D integer array; the result has shape
    ``(dim,)`` or ``(len(t), dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ShapeError(f"time embedding width must be positive and even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mlp:
    """Fully connected ReLU network; the last layer is linear.

    ``params`` maps ``W{i}`` (fan_in, fan_out) and ``b{i}`` (fan_out,) to
    read-only arrays.  Instances never change; optimisers build new ones.
    """

    widths: tuple[int, ...]
    params: Mapping[str, np.ndarray]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if self.params[f"W{i}"].shape != (a, b) or self.params[f"b{i}"].shape != (b,):
                raise ShapeError(f"layer {i} parameters do not match widths {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def init(cls, widths: Sequence[int], rng: Rng) -> "Mlp":
        """He-normal hidden weights, 1/fan_in output weights, zero biases."""
        widths = tuple(int(w) for w in widths)
        params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 2.0 if i < len(widths) - 2 else 1.0
            params[f"W{i}"] = frozen(rng.normal((a, b)) * math.sqrt(gain / a))
            params[f"b{i}"] = frozen(np.zeros(b))
        return cls(widths, params)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Mlp":
        return Mlp(self.widths, {k: frozen(v) for k, v in params.items()})

    def forward(self, x: np.ndarray, keep: bool = False):
        """Evaluate rows of ``x``.  With ``keep`` also return the backward cache."""
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected input (batch, {self.widths[0]}), got {x.shape}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = np.maximum(z, 0.0) if i < last else z
            if i < last:
                acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray, want_params: bool = True):
        """Vector-Jacobian product for a cached forward pass.

        Returns ``(param_grads or None, grad_input)``.
        """
        grads = {} if want_params else None
        g = grad_out
        for i in reversed(range(self.n_layers)):
            a_prev = acts[i]
            if want_params:
                grads[f"W{i}"] = a_prev.T @ g
                grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
            if i > 0:
                g = g * (a_prev > 0.0)
        return grads, g


def param_digest(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and little-endian bytes of every parameter."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# denoiser
# --------------------------------------------------------------------------

SEGMENTS = ("x", "concept", "s0", "time")


@dataclass(frozen=True)
class InputLayout:
    """Widths of the concatenated input ``x_t | concept | s0 | time``."""

    x: int
    concept: int
    s0: int = 0
    time: int = 32

    def width(self) -> int:
        return self.x + self.concept + self.s0 + self.time

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name in SEGMENTS:
            w = getattr(self, name)
            out[name] = slice(start, start + w)
            start += w
        return out

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in SEGMENTS}


OUTPUT_GAIN = 0.3


@dataclass(frozen=True)
class MlpDenoiser:
    """Noise predictor eps(x_t, concept, s0, t) over an :class:`Mlp`."""

    net: Mlp
    layout: InputLayout

    @classmethod
    def init(cls, layout: InputLayout, hidden: Sequence[int], rng: Rng) -> "MlpDenoiser":
        """Random hidden layers and a down-scaled random output layer.

        At full 1/fan_in scale the output of a fresh 512-wide denoiser feeds
        back on x_t strongly enough over the reverse chain to reach |x| ~ 1e3.
        Shrinking it by ``OUTPUT_GAIN`` keeps untrained samples within tens of
        units.  Going much smaller (or to zero) starves the hidden layers of
        gradient early on, and the net then settles on ignoring the concept.
        """
        widths = (layout.width(), *hidden, layout.x)
        net = Mlp.init(widths, rng)
        params = dict(net.params)
        last = f"W{net.n_layers - 1}"
        params[last] = OUTPUT_GAIN * params[last]
        return cls(net.with_params(params), layout)

    @property
    def params(self) -> Mapping[str, np.ndarray]:
        return self.net.params

    @property
    def widths(self) -> tuple[int, ...]:
        return self.net.widths

    def with_params(self, params) -> "MlpDenoiser":
        return MlpDenoiser(self.net.with_params(params), self.layout)

    def digest(self) -> str:
        return param_digest(self.params)


def _rows(arr, width: int, batch: int, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = np.broadcast_to(a, (batch, a.shape[0]))
    if a.shape != (batch, width):
        raise ShapeError(f"{name} segment: expected width {width} for batch {batch}, got {np.shape(arr)}")
    return a


def assemble_input(model: MlpDenoiser, x_t, concept, s0, t) -> np.ndarray:
    """Concatenate the input segments into one (batch, width) matrix."""
    lay = model.layout
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    batch = x.shape[0]
    if x.shape[1] != lay.x:
        raise ShapeError(f"x_t segment: expected width {lay.x}, got {x.shape[1]}")
    parts = [x, _rows(concept, lay.concept, batch, "concept")]
    if lay.s0:
        if s0 is None:
            raise ShapeError("model expects an initial-state segment but s0 is absent")
        parts.append(_rows(s0, lay.s0, batch, "s0"))
    elif s0 is not None and np.size(s0):
        raise ShapeError("model has no initial-state segment but s0 was given")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_arr = np.full(batch, int(t_arr))
    if t_arr.shape != (batch,):
        raise ShapeError(f"time index: expected scalar or ({batch},), got {t_arr.shape}")
    parts.append(time_embed(t_arr, lay.time))
    inp = np.concatenate(parts, axis=1)
    check_finite(inp, "denoiser input")
    return inp


def mlp_forward(model: MlpDenoiser, x_t, concept, s0, t) -> np.ndarray:
    """Predicted noise with the shape of ``x_t``."""
    inp = assemble_input(model, x_t, concept, s0, t)
    out = model.net.forward(inp)
    return out[0] if np.ndim(x_t) == 1 else out


@dataclass
class GradResult:
    loss: float
    params: dict | None
    inputs: dict = field(default_factory=dict)
    output: np.ndarray | None = None


def _fold(grad_rows: np.ndarray, like) -> np.ndarray:
    """Sum per-row gradients back onto a broadcast (1-D) argument."""
    return grad_rows.sum(axis=0) if np.ndim(like) == 1 else grad_rows


def _check_wrt(model: MlpDenoiser, wrt: tuple) -> None:
    for name in wrt:
        if name != "params" and name not in SEGMENTS:
            raise ShapeError(f"unknown gradient target {name!r}")
        if name == "s0" and model.layout.s0 == 0:
            raise ShapeError("gradient requested for absent s0 segment")


def _pull_back(model: MlpDenoiser, acts, grad_out, wrt: tuple, args: dict) -> GradResult:
    g_params, g_in = model.net.backward(acts, grad_out, want_params="params" in wrt)
    res = GradResult(loss=float("nan"), params=g_params)
    sl = model.layout.slices()
    for name in wrt:
        if name != "params":
            res.inputs[name] = _fold(g_in[:, sl[name]], args[name])
    return res


@dataclass
class ForwardCache:
    """Activations of one denoiser call, reusable for several pull-backs."""

    output: np.ndarray
    acts: list
    args: dict


def forward_cached(model: MlpDenoiser, x_t, concept, s0, t) -> ForwardCache:
    inp = assemble_input(model, x_t, concept, s0, t)
    out, acts = model.net.forward(inp, keep=True)
    return ForwardCache(out, acts, {"x": x_t, "concept": concept, "s0": s0, "time": t})


def vjp_cached(model: MlpDenoiser, cache: ForwardCache, grad_out: np.ndarray,
               wrt: Iterable[str] = ("params",)) -> GradResult:
    wrt = tuple(wrt)
    _check_wrt(model, wrt)
    res = _pull_back(model, cache.acts, np.atleast_2d(grad_out), wrt, cache.args)
    res.output = cache.output
    return res


def denoiser_vjp(model: MlpDenoiser, x_t, concept, s0, t, grad_out: np.ndarray,
                 wrt: Iterable[str] = ("params",)) -> GradResult:
    """Pull ``grad_out`` (d loss / d output) back to parameters and/or segments."""
    wrt = tuple(wrt)
    _check_wrt(model, wrt)
    inp = assemble_input(model, x_t, concept, s0, t)
    out, acts = model.net.forward(inp, keep=True)
    res = _pull_back(model, acts, np.atleast_2d(grad_out), wrt,
                     {"x": x_t, "concept": concept, "s0": s0, "time": t})
    res.output = out
    return res


def mlp_grad(model: MlpDenoiser, x_t, concept, s0, t, target,
             wrt: Iterable[str] = ("params",)) -> GradResult:
    """Mean squared error between predicted and target noise, with exact gradients.

    ``wrt`` selects ``"params"`` and/or input segments (``"x"``, ``"concept"``,
    ``"s0"``).  Segment gradients take the shape of the argument supplied, so a
    single concept vector broadcast over the batch gets a single gradient.
    """
    wrt = tuple(wrt)
    _check_wrt(model, wrt)
    inp = assemble_input(model, x_t, concept, s0, t)
    out, acts = model.net.forward(inp, keep=True)
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if target.shape != out.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {out.shape}")
    diff = out - target
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        per_row = np.mean(diff * diff, axis=1)
        bad = np.flatnonzero(~np.isfinite(per_row))
        raise NumericalError("non-finite loss", row=int(bad[0]) if bad.size else -1)
    res = _pull_back(model, acts, 2.0 * diff / diff.size, wrt,
                     {"x": x_t, "concept": concept, "s0": s0, "time": t})
    res.loss = loss
    res.output = out
    return res


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter), torch semantics."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
                 no_decay: Sequence[str] = ()):
        self.lr = lr
        self.no_decay = frozenset(no_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float | None = None) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; inputs are left untouched."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self._m.get(k)
            v = self._v.get(k)
            m = g * (1 - self.b1) if m is None else self.b1 * m + (1 - self.b1) * g
            v = g * g * (1 - self.b2) if v is None else self.b2 * v + (1 - self.b2) * g * g
            self._m[k], self._v[k] = m, v
            new = p if k in self.no_decay else p * (1.0 - lr * self.weight_decay)
            out[k] = new - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out
