"""Random-shooting model-predictive path following.

Every control step samples ``K`` action sequences of length ``H`` uniformly
from the action box, pushes them through the learned model, scores each
predicted trajectory with

    cost = f_p * p + f_h * h - f_f * f        (summed over the horizon)

where ``p`` is the distance to the closest path segment, ``h`` the absolute
heading error to that segment and ``f`` the forward progress along the path's
arc length since the previous step. The first action of the cheapest
sequence is executed and the plan is discarded.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import _hash, ddrive, features
from . import simworld as sw
from .config import default_config
from .dynmodel import Variant, predict_next


class PlanningError(RuntimeError):
    """Raised when every candidate sequence was disqualified."""


@dataclass(frozen=True)
class MPCConfig:
    K: int = 500
    H: int = 4
    dt: float = 0.1
    f_p: float = 50.0
    f_f: float = 10.0
    f_h: float = 5.0
    action_low: float = 0.0
    action_high: float = 25.0
    abstraction: sw.Abstraction = sw.Abstraction.VELOCITY

    def __post_init__(self):
        if self.K < 1 or self.H < 1:
            raise ValueError("K and H must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if min(self.f_p, self.f_f, self.f_h) < 0:
            raise ValueError("cost weights must be non-negative")
        if not self.action_low <= self.action_high:
            raise ValueError("empty action box")

    @classmethod
    def from_config(cls, cfg, **overrides):
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in cfg["mpc"].items() if k in names}
        kw.update(overrides)
        if isinstance(kw.get("abstraction"), str):
            kw["abstraction"] = sw.Abstraction(kw["abstraction"])
        return cls(**kw)

    def scaled(self, c):
        return replace(self, f_p=self.f_p * c, f_f=self.f_f * c, f_h=self.f_h * c)


@dataclass(frozen=True)
class PathGeometry:
    p: float
    h: float
    f: float


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------

def path_terms(x, y, yaw, w, prev_arc):
    """Vectorized ``(p, h, arc)`` for positions/yaws against waypoints ``w``.

    ``f`` is ``arc - prev_arc``; it is left to the caller so sequences can
    chain arcs step by step.
    """
    idx, t, dist, _cross = ddrive.project_to_path(x, y, w.points)
    offsets, lens = ddrive.arc_offsets(w.points)
    arc = offsets[idx] + t * lens[idx]
    d_line = ddrive.segment_angles(w.points)[idx]
    h = np.abs(sw.wrap_to_pi_array(d_line - yaw))
    return dist, h, arc


def arc_position(s, w):
    s = np.asarray(s, dtype=float)
    _p, _h, arc = path_terms(s[..., sw.OBS["x"]], s[..., sw.OBS["y"]], sw.obs_yaw(s), w, 0.0)
    return arc


def path_geometry(s, w, prev_arc):
    s = np.asarray(s, dtype=float)
    p, h, arc = path_terms(s[sw.OBS["x"]], s[sw.OBS["y"]], float(sw.obs_yaw(s)), w, prev_arc)
    return PathGeometry(float(p), float(h), float(arc - prev_arc))


def step_cost(g, cfg):
    return cfg.f_p * g.p + cfg.f_h * g.h - cfg.f_f * g.f


def path_cost(states, w, cfg):
    """Accumulated step cost of a realized state sequence (first state is the start)."""
    states = np.asarray(states, dtype=float)
    if len(states) < 2:
        return 0.0
    p, h, arc = path_terms(states[:, sw.OBS["x"]], states[:, sw.OBS["y"]], sw.obs_yaw(states), w, 0.0)
    f = np.diff(arc)
    return float(np.sum(cfg.f_p * p[1:] + cfg.f_h * h[1:] - cfg.f_f * f))


# ---------------------------------------------------------------------------
# Sampling and evaluation
# ---------------------------------------------------------------------------

def step_seed_from(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2 ** 63))
    return int(rng)


def sample_sequences(rng, cfg, K=None, offset=0):
    """``(K, H, 2)`` candidate actions, uniform over the action box.

    Candidate ``i`` depends only on (step seed, i): values come from a
    counter-based hash rather than a shared sequential stream, so any
    chunking or evaluation order reproduces the same candidate set.
    ``rng`` may be a Generator (one step seed is drawn from it) or an int.
    """
    seed = step_seed_from(rng)
    K = cfg.K if K is None else K
    i = np.arange(offset, offset + K)[:, None]
    j = np.arange(cfg.H * 2)[None, :]
    u = _hash.uniform01(_hash.mix(seed, i, j))
    acts = cfg.action_low + (cfg.action_high - cfg.action_low) * u
    return acts.reshape(K, cfg.H, 2)


def evaluate_sequences(model, s0, seqs, e, w, cfg):
    """Costs ``(K,)`` and predicted states ``(K, H+1, S)`` of candidate sequences.

    Candidates whose prediction turns non-finite get cost ``+inf``.
    """
    seqs = np.asarray(seqs, dtype=float)
    K, H = seqs.shape[:2]
    s = np.broadcast_to(np.asarray(s0, dtype=float), (K, len(s0))).copy()
    traj = np.empty((K, H + 1, s.shape[1]))
    traj[:, 0] = s
    _p, _h, prev_arc = path_terms(s[:, sw.OBS["x"]], s[:, sw.OBS["y"]], sw.obs_yaw(s), w, 0.0)
    cost = np.zeros(K)
    bad = np.zeros(K, dtype=bool)
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(H):
            s = predict_next(model, s, seqs[:, k], e)
            finite = np.all(np.isfinite(s), axis=1)
            bad |= ~finite
            s[~finite] = traj[~finite, k]  # keep arithmetic finite; the row is already disqualified
            traj[:, k + 1] = s
            p, h, arc = path_terms(s[:, sw.OBS["x"]], s[:, sw.OBS["y"]], sw.obs_yaw(s), w, 0.0)
            cost += cfg.f_p * p + cfg.f_h * h - cfg.f_f * (arc - prev_arc)
            prev_arc = arc
    cost[bad] = np.inf
    return cost, traj


def evaluate_sequence(model, s0, seq, e, w, cfg):
    cost, traj = evaluate_sequences(model, s0, np.asarray(seq, dtype=float)[None], e, w, cfg)
    return float(cost[0]), traj[0]


@dataclass
class PlanResult:
    action: sw.Action
    index: int
    cost: float
    n_disqualified: int


def plan(model, s, e, w, cfg, rng=None, candidates=None, workers=1):
    """Pick the cheapest candidate; ties go to the lowest index."""
    if candidates is None:
        seed = step_seed_from(rng if rng is not None else 0)
        if workers > 1:
            chunks = np.array_split(np.arange(cfg.K), workers)
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(
                    lambda c: evaluate_sequences(model, s, sample_sequences(seed, cfg, len(c), c[0]), e, w, cfg)[0],
                    [c for c in chunks if len(c)]))
            costs = np.concatenate(parts)
            candidates = sample_sequences(seed, cfg)
        else:
            candidates = sample_sequences(seed, cfg)
            costs = evaluate_sequences(model, s, candidates, e, w, cfg)[0]
    else:
        candidates = np.asarray(candidates, dtype=float)
        if workers > 1:
            chunks = [c for c in np.array_split(np.arange(len(candidates)), workers) if len(c)]
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(lambda c: evaluate_sequences(model, s, candidates[c], e, w, cfg)[0], chunks))
            costs = np.concatenate(parts)
        else:
            costs = evaluate_sequences(model, s, candidates, e, w, cfg)[0]
    bad = int(np.sum(~np.isfinite(costs)))
    if bad == len(costs):
        raise PlanningError("all candidate action sequences were disqualified")
    best = int(np.argmin(costs))
    first = candidates[best, 0]
    return PlanResult(sw.Action(float(first[0]), float(first[1]), cfg.abstraction), best, float(costs[best]), bad)


def mpc_step(model, s, e, w, cfg, rng=None, candidates=None, workers=1):
    """First action of the minimal-cost candidate sequence."""
    return plan(model, s, e, w, cfg, rng, candidates, workers).action


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def rollout_embedding(model, terrain, ws, cfg, source=None):
    """Conditioning vector for a run, fixed from the start-of-run observation.

    ``source`` may be an :class:`~mbloco.features.Embedding` or array to use
    verbatim (e.g. from a precomputed file).
    """
    if not model.variant.conditioned:
        return None
    if source is not None:
        return np.asarray(getattr(source, "values", source), dtype=float)
    if model.variant is Variant.ONE_HOT:
        names = model.meta.get("terrain_order") or list(sw.terrain_presets(cfg))
        return features.one_hot(names.index(terrain.name), len(names)).values
    from .datapipe import default_projection

    tex = cfg["texture"]
    patch = sw.render_patch(terrain, ws, tex["patch_size"], tex["cell_size"])
    return features.embed(patch, default_projection(cfg)).values


def mpc_rollout(cfg, model, terrain, path, mpc_cfg, duration, seed, embedding=None, start=None,
                diagnostics=None):
    """Closed-loop run at the control rate; returns a :class:`~mbloco.simworld.Trajectory`.

    Velocity actions are executed by the PID firmware, PWM actions directly.
    If ``diagnostics`` is a writable text stream, one JSON line per planning
    step is written to it.
    """
    cfg = cfg or default_config()
    p = sw.SimParams.from_config(cfg)
    rng = np.random.default_rng(seed)
    plan_rng = np.random.default_rng([int(seed), 1])
    ws = start if start is not None else sw.eval_start(rng, cfg)
    pid0 = ddrive.PIDState.from_config(cfg)
    pids = (pid0, pid0)
    n_steps = int(round(duration / p.control_dt))
    states, actions, worlds = [], [], []
    if n_steps > 0:
        e = rollout_embedding(model, terrain, ws, cfg, embedding)
        states.append(sw.observe(ws, p))
        worlds.append(ws)
    for k in range(n_steps):
        res = plan(model, states[-1], e, path, mpc_cfg, plan_rng)
        a = res.action
        ws, pids = ddrive.execute(ws, a, pids, terrain, rng, p)
        actions.append((a.left, a.right))
        states.append(sw.observe(ws, p))
        worlds.append(ws)
        if diagnostics is not None:
            diagnostics.write(json.dumps({"step": k, "index": res.index, "cost": res.cost,
                                          "disqualified": res.n_disqualified,
                                          "action": [a.left, a.right]}) + "\n")
    states = np.array(states).reshape(-1, sw.STATE_DIM)
    actions = np.array(actions).reshape(-1, 2)
    cost = path_cost(states, path, mpc_cfg) if n_steps > 0 else 0.0
    return sw.Trajectory(states, actions, cost, worlds)
