"""Goal-oriented 2D navigation with attribute-typed targets and distractors.

An episode has an initial-state vector ``s0`` of width 22::

    [agent x, agent y,
     obj0 x, obj0 y, obj0 colour one-hot (4), obj0 shape one-hot (4),
     obj1 x, obj1 y, obj1 colour one-hot (4), obj1 shape one-hot (4)]

Object slot 0 sits in the right-hand region and slot 1 in the left-hand
region of a 5 x 5 arena; the agent starts near the centre.  Which slot is the
target is random, so a concept only becomes useful once it is read together
with the attributes in ``s0``.  Trajectories are ``H = 32`` agent positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..diffusion import CompositionSpec, DiffusionSchedule, sample
from ..errors import NumericalError, ShapeError
from ..numerics import MlpDenoiser, Rng

COLORS = ("red", "yellow", "purple", "green")
SHAPES = ("cone", "sphere", "bowl", "cube")
# colour groups and the shape group each is paired with in training data
_PAIRED = {"red": ("cone", "sphere"), "yellow": ("cone", "sphere"),
           "purple": ("bowl", "cube"), "green": ("bowl", "cube"),
           "cone": ("red", "yellow"), "sphere": ("red", "yellow"),
           "bowl": ("purple", "green"), "cube": ("purple", "green")}

H = 32
S0_WIDTH = 22
OBJ_WIDTH = 10
V_MAX = 0.25
JITTER = 0.02
ARRIVAL_RADIUS = 0.25
LOOKAHEAD = 5
AGENT_BOX = ((2.2, 2.8), (2.2, 2.8))
REGIONS = (((3.5, 4.7), (1.0, 4.0)), ((0.3, 1.5), (1.0, 4.0)))

TRAINING_LABELS = ("go to red object", "go to yellow object", "go to bowl", "go to cube")
NEW_TASKS = ("go to red bowl", "go to yellow bowl", "go to red cube", "go to yellow cube", "go to purple cone")
TRAINING_DATASET_SIZE = 900
DEMOS_PER_TASK = 5

REACHED_TARGET, REACHED_DISTRACTOR, TIMEOUT = "reached-target", "reached-distractor", "timeout"


def parse_label(label: str) -> tuple[str | None, str | None]:
    """``(colour, shape)`` demanded of the target; either may be None."""
    if not label.startswith("go to "):
        raise KeyError(f"unknown navigation label {label!r}")
    words = label[len("go to "):].split()
    if words[-1] == "object" and len(words) == 2 and words[0] in COLORS:
        return words[0], None
    if len(words) == 1 and words[0] in SHAPES:
        return None, words[0]
    if len(words) == 2 and words[0] in COLORS and words[1] in SHAPES:
        return words[0], words[1]
    raise KeyError(f"unknown navigation label {label!r}")


@dataclass
class Nav2DEpisode:
    label: str
    s0: np.ndarray         # (22,)
    traj: np.ndarray       # (H, 2)
    target: int            # slot index of the target object

    @property
    def target_pos(self) -> np.ndarray:
        return object_pos(self.s0, self.target)

    @property
    def distractor_pos(self) -> np.ndarray:
        return object_pos(self.s0, 1 - self.target)


def object_pos(s0: np.ndarray, slot) -> np.ndarray:
    """Position of object ``slot`` (scalar or per-row array) in ``s0`` rows."""
    s0 = np.asarray(s0)
    if s0.ndim == 1:
        o = 2 + OBJ_WIDTH * int(slot)
        return s0[o:o + 2].copy()
    slot = np.broadcast_to(np.asarray(slot), (s0.shape[0],))
    o = 2 + OBJ_WIDTH * slot
    rows = np.arange(s0.shape[0])
    return np.stack([s0[rows, o], s0[rows, o + 1]], axis=1)


def object_attrs(s0: np.ndarray, slot: int) -> tuple[str, str]:
    o = 2 + OBJ_WIDTH * slot
    return COLORS[int(np.argmax(s0[o + 2:o + 6]))], SHAPES[int(np.argmax(s0[o + 6:o + 10]))]


def target_slot(label: str, s0: np.ndarray) -> int:
    """The unique object slot matching ``label``'s attributes."""
    color, shape = parse_label(label)
    hits = []
    for slot in range(2):
        c, sh = object_attrs(s0, slot)
        if (color is None or c == color) and (shape is None or sh == shape):
            hits.append(slot)
    if len(hits) != 1:
        raise ValueError(f"{len(hits)} objects match {label!r}; the target must be unique")
    return hits[0]


def _attributes(label: str, rng: Rng) -> tuple[tuple[str, str], tuple[str, str]]:
    """(target, distractor) attribute pairs following the label's construction."""
    color, shape = parse_label(label)
    if color is not None and shape is None:
        other = {"red": "yellow", "yellow": "red"}.get(color)
        if other is None:
            raise KeyError(f"{label!r} is not a training colour concept")
        return (color, rng.choice(_PAIRED[color])), (other, rng.choice(_PAIRED[other]))
    if shape is not None and color is None:
        other = {"bowl": "cube", "cube": "bowl"}.get(shape)
        if other is None:
            raise KeyError(f"{label!r} is not a training shape concept")
        return (rng.choice(_PAIRED[shape]), shape), (rng.choice(_PAIRED[other]), other)
    if rng.bernoulli(0.5):
        # shared colour; distractor shape from the group paired with that colour
        return (color, shape), (color, rng.choice(_PAIRED[color]))
    return (color, shape), (rng.choice(_PAIRED[shape]), shape)


def _onehot(names, value) -> np.ndarray:
    v = np.zeros(len(names))
    v[names.index(value)] = 1.0
    return v


def make_s0(agent, objects) -> np.ndarray:
    """``objects``: two ``((x, y), colour, shape)`` tuples for slots 0 and 1."""
    parts = [np.asarray(agent, dtype=np.float64)]
    for pos, color, shape in objects:
        parts += [np.asarray(pos, dtype=np.float64), _onehot(COLORS, color), _onehot(SHAPES, shape)]
    return np.concatenate(parts)


def expert_trajectory(start, target, rng: Rng | None, jitter: float = JITTER, horizon: int = H) -> np.ndarray:
    """Straight-line approach at speed ``V_MAX`` with Gaussian jitter per step."""
    traj = np.empty((horizon, 2))
    traj[0] = start
    for k in range(1, horizon):
        d = target - traj[k - 1]
        dist = math.hypot(d[0], d[1])
        step = d if dist <= V_MAX else d * (V_MAX / dist)
        noise = rng.normal(2, jitter) if (rng is not None and jitter > 0) else 0.0
        traj[k] = traj[k - 1] + step + noise
    return traj


def gen_nav2d(label: str, count: int, rng: Rng) -> list[Nav2DEpisode]:
    parse_label(label)
    out = []
    for i in range(count):
        r = rng.child("episode", i)
        agent = np.array([r.uniform(*AGENT_BOX[0]), r.uniform(*AGENT_BOX[1])])
        pos = [np.array([r.uniform(*reg[0]), r.uniform(*reg[1])]) for reg in REGIONS]
        (tc, ts), (dc, ds) = _attributes(label, r)
        target = int(r.integers(0, 2))
        objs = [None, None]
        objs[target] = (pos[target], tc, ts)
        objs[1 - target] = (pos[1 - target], dc, ds)
        s0 = make_s0(agent, objs)
        traj = expert_trajectory(agent, pos[target], r)
        out.append(Nav2DEpisode(label, s0, traj, target))
    return out


def training_set(rng: Rng, per_label: int = TRAINING_DATASET_SIZE // len(TRAINING_LABELS)) -> dict[str, list[Nav2DEpisode]]:
    return {lab: gen_nav2d(lab, per_label, rng.child("train", lab)) for lab in TRAINING_LABELS}


def windows(ep: Nav2DEpisode, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-trajectory from ``offset`` padded with the final state, and its ``s0``."""
    traj = np.concatenate([ep.traj[offset:], np.repeat(ep.traj[-1:], offset, axis=0)])
    s0 = ep.s0.copy()
    s0[:2] = ep.traj[offset]
    return traj, s0


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def eval_nav2d_progress(traj, target, start=None):
    """Final position strictly closer to the target than the start."""
    tr = np.asarray(traj, dtype=np.float64)
    single = tr.ndim == 2
    tr = tr[None] if single else tr
    tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), (tr.shape[0], 2))
    st = tr[:, 0] if start is None else np.broadcast_to(np.asarray(start, dtype=np.float64), (tr.shape[0], 2))
    out = np.linalg.norm(tr[:, -1] - tgt, axis=1) < np.linalg.norm(st - tgt, axis=1)
    return bool(out[0]) if single else out


def reach_success(traj, target, distractor, radius: float = ARRIVAL_RADIUS):
    """Ends within ``radius`` of the target without ever entering the distractor's radius."""
    tr = np.asarray(traj, dtype=np.float64)
    single = tr.ndim == 2
    tr = tr[None] if single else tr
    tgt = np.broadcast_to(np.asarray(target), (tr.shape[0], 2))
    dis = np.broadcast_to(np.asarray(distractor), (tr.shape[0], 2))
    end_ok = np.linalg.norm(tr[:, -1] - tgt, axis=1) < radius
    clean = np.all(np.linalg.norm(tr - dis[:, None, :], axis=2) >= radius, axis=1)
    out = end_ok & clean
    return bool(out[0]) if single else out


# --------------------------------------------------------------------------
# normalisation
# --------------------------------------------------------------------------

_POS_SHIFT, _POS_SCALE = 2.5, 2.5


def encode_traj(traj) -> np.ndarray:
    """(..., H, 2) positions -> flattened (..., 2H) normalised vector."""
    tr = (np.asarray(traj, dtype=np.float64) - _POS_SHIFT) / _POS_SCALE
    return tr.reshape(tr.shape[:-2] + (-1,))


def decode_traj(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[:-1] + (-1, 2)) * _POS_SCALE + _POS_SHIFT


_S0_SHIFT = np.concatenate([[2.5, 2.5], np.tile(np.concatenate([[2.5, 2.5], np.full(8, 0.5)]), 2)])
_S0_SCALE = np.concatenate([[2.5, 2.5], np.tile(np.concatenate([[2.5, 2.5], np.full(8, 0.5)]), 2)])


def encode_s0(s0) -> np.ndarray:
    return (np.asarray(s0, dtype=np.float64) - _S0_SHIFT) / _S0_SCALE


def decode_s0(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * _S0_SCALE + _S0_SHIFT


# --------------------------------------------------------------------------
# environment
# --------------------------------------------------------------------------


def clip_action(action, v_max: float = V_MAX) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.where(norm > v_max, v_max / np.maximum(norm, 1e-300), 1.0)
    return a * scale


def nav2d_step(pos, action, v_max: float = V_MAX) -> np.ndarray:
    """Kinematic step: the action is a displacement, clipped to ``v_max`` in norm."""
    nxt = np.asarray(pos, dtype=np.float64) + clip_action(action, v_max)
    if not np.isfinite(nxt).all():
        raise NumericalError("non-finite agent state")
    return nxt


def plan_action(plan: np.ndarray, pos: np.ndarray, since_replan: int, lookahead: int = LOOKAHEAD) -> np.ndarray:
    """``a_t = tau_{t+lookahead} - s_t`` on the current plan (index clamped to the horizon)."""
    idx = min(since_replan + lookahead, plan.shape[-2] - 1)
    return plan[..., idx, :] - pos


@dataclass
class RolloutOutcome:
    status: list[str]
    trace: np.ndarray          # (B, steps + 1, 2) executed positions
    steps: np.ndarray          # steps taken per episode

    @property
    def success(self) -> np.ndarray:
        return np.array([s == REACHED_TARGET for s in self.status])


def rollout(planner, s0: np.ndarray, target_slot, *, replan_every: int, max_steps: int = H,
            lookahead: int = LOOKAHEAD, radius: float = ARRIVAL_RADIUS) -> RolloutOutcome:
    """Execute plans from ``planner(s0_batch, call_index) -> (B, H', 2)`` in the env.

    The planner is re-queried from the current observation every
    ``replan_every`` steps; ``replan_every >= max_steps`` gives open-loop
    execution of the first plan.  An episode stops when it enters the target
    or distractor radius, or after ``max_steps``.
    """
    if replan_every < 1:
        raise ValueError("replan_every must be >= 1")
    s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64)).copy()
    B = s0.shape[0]
    target = object_pos(s0, target_slot)
    distractor = object_pos(s0, 1 - np.asarray(target_slot))
    pos = s0[:, :2].copy()
    status = [TIMEOUT] * B
    active = np.ones(B, dtype=bool)
    steps = np.zeros(B, dtype=int)
    trace = np.repeat(pos[:, None, :], max_steps + 1, axis=1)
    plan = None
    since = 0
    calls = 0
    for step in range(max_steps):
        if not active.any():
            break
        if plan is None or since >= replan_every:
            obs = s0.copy()
            obs[:, :2] = pos
            plan = np.asarray(planner(obs, calls), dtype=np.float64)
            if plan.ndim != 3 or plan.shape[0] != B or plan.shape[2] != 2:
                raise ShapeError(f"planner returned {plan.shape}, expected ({B}, horizon, 2)")
            if plan.shape[1] < lookahead + 1:
                raise ShapeError("planner horizon shorter than the look-ahead")
            if not np.isfinite(plan).all():
                raise NumericalError("non-finite plan state", step=step)
            calls += 1
            since = 0
        new = nav2d_step(pos, plan_action(plan, pos, since, lookahead))
        pos = np.where(active[:, None], new, pos)
        since += 1
        steps += active
        trace[:, step + 1:] = pos[:, None, :]
        hit_d = np.linalg.norm(pos - distractor, axis=1) < radius
        hit_t = np.linalg.norm(pos - target, axis=1) < radius
        for i in np.flatnonzero(active & (hit_d | hit_t)):
            status[i] = REACHED_DISTRACTOR if hit_d[i] else REACHED_TARGET
            active[i] = False
    return RolloutOutcome(status, trace, steps)


def closed_loop_rollout(model: MlpDenoiser, schedule: DiffusionSchedule, spec: CompositionSpec,
                        s0: np.ndarray, target: np.ndarray, rng: Rng, *, replan_every: int = 1,
                        max_steps: int = H, lookahead: int = LOOKAHEAD) -> RolloutOutcome:
    """Roll out diffusion plans conditioned on the current observation."""
    def planner(obs, call):
        return decode_traj(sample(model, schedule, spec, encode_s0(obs), rng.child("plan", call)))

    return rollout(planner, s0, target, replan_every=replan_every, max_steps=max_steps, lookahead=lookahead)
