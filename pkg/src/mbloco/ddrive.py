"""Differential-drive path follower and the leg-velocity PID firmware loop.

The high-level controller runs at the control rate (10 Hz): it picks the
closest path segment, bends the desired heading towards the line in
proportion to the perpendicular offset, and converts the heading error into
a left/right leg-speed difference around a nominal speed. A discrete PID per
side (1 kHz) turns those setpoints into PWM.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import simworld as sw
from .config import default_config


@dataclass(frozen=True)
class DDParams:
    f1: float = 2.0
    f2: float = 6.0
    omega_nom: float = 10.0

    def __post_init__(self):
        if not (self.f1 > 0 and self.f2 > 0 and self.omega_nom > 0):
            raise ValueError("f1, f2 and omega_nom must be positive")

    @classmethod
    def from_config(cls, cfg, **overrides):
        kw = dict(cfg["ddrive"])
        kw.update(overrides)
        return cls(**kw)


# ---------------------------------------------------------------------------
# Path geometry
# ---------------------------------------------------------------------------

def project_to_path(px, py, pts):
    """Closest-segment projection of one or many points onto a polyline.

    Returns ``(idx, t, dist, cross)`` arrays broadcast to the shape of the
    points: segment index, clamped segment parameter in [0, 1], distance to
    the segment, and the 2-D cross product of the segment direction with the
    offset (positive = left of the segment). Equal distances resolve to the
    later segment.
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    a = pts[:-1]
    d = np.diff(pts, axis=0)
    seg_len2 = np.einsum("ij,ij->i", d, d)
    ox = px[..., None] - a[:, 0]
    oy = py[..., None] - a[:, 1]
    t = np.clip((ox * d[:, 0] + oy * d[:, 1]) / seg_len2, 0.0, 1.0)
    ex = ox - t * d[:, 0]
    ey = oy - t * d[:, 1]
    dist2 = ex * ex + ey * ey
    # reverse so argmin's first-occurrence rule picks the later segment on ties
    n = len(seg_len2)
    idx = n - 1 - np.argmin(dist2[..., ::-1], axis=-1)
    take = lambda arr: np.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]
    cross = d[idx, 0] * take(oy) - d[idx, 1] * take(ox)
    return idx, take(t), np.sqrt(take(dist2)), cross


def segment_angles(pts):
    d = np.diff(pts, axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


def arc_offsets(pts):
    """Arc length at the start of each segment."""
    lens = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(lens)[:-1]]), lens


def closest_segment(p, w):
    """Closest segment of ``w`` to point ``p``.

    Returns ``(segment_index, d_line, p_dist, side)`` with side one of
    ``"left"``, ``"right"`` or ``"on"``.
    """
    idx, _t, dist, cross = project_to_path(p[0], p[1], w.points)
    i = int(idx)
    d_line = float(segment_angles(w.points)[i])
    cross = float(cross)
    seg = np.linalg.norm(w.points[i + 1] - w.points[i])
    if abs(cross) <= 1e-12 * seg:
        side = "on"
    else:
        side = "left" if cross > 0 else "right"
    return i, d_line, float(dist), side


# ---------------------------------------------------------------------------
# High-level controller
# ---------------------------------------------------------------------------

def dd_control(s, w, params, bounds=None, clamp=True):
    """Leg velocity setpoints ``(omega_l, omega_r)`` for observation ``s``.

    The desired heading is the segment angle shifted by ``f1 * p_dist`` back
    towards the line; the wrapped heading error is split symmetrically
    around ``omega_nom``.
    """
    s = np.asarray(s, dtype=float)
    _i, d_line, p_dist, side = closest_segment((s[sw.OBS["x"]], s[sw.OBS["y"]]), w)
    if side == "right":
        d = d_line + params.f1 * p_dist
    else:
        d = d_line - params.f1 * p_dist
    yaw = math.atan2(s[sw.OBS["sin_yaw"]], s[sw.OBS["cos_yaw"]])
    delta = sw.wrap_to_pi(d - yaw)
    wl = params.omega_nom - delta * params.f2
    wr = params.omega_nom + delta * params.f2
    if clamp:
        lo, hi = bounds if bounds is not None else (sw.DEFAULT_PARAMS.omega_min, sw.DEFAULT_PARAMS.omega_max)
        wl = min(max(wl, lo), hi)
        wr = min(max(wr, lo), hi)
    return wl, wr


# ---------------------------------------------------------------------------
# Firmware PID
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PIDState:
    kp: float
    ki: float
    kd: float
    integral: float = 0.0
    prev_error: float = 0.0
    integral_limit: float = 1.0
    out_min: float = -1.0
    out_max: float = 1.0

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg["pid"])


def pid_update(st, setpoint, measured, dt):
    """One discrete PID tick; returns ``(pwm, new_state)``.

    The integral is clamped to ``integral_limit`` and frozen while the output
    is saturated in the direction the error would push it further.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    e = setpoint - measured
    deriv = (e - st.prev_error) / dt
    integral = min(max(st.integral + e * dt, -st.integral_limit), st.integral_limit)
    raw = st.kp * e + st.ki * integral + st.kd * deriv
    if (raw > st.out_max and e > 0) or (raw < st.out_min and e < 0):
        integral = st.integral
        raw = st.kp * e + st.ki * integral + st.kd * deriv
    out = min(max(raw, st.out_min), st.out_max)
    return out, replace(st, integral=integral, prev_error=e)


def track_setpoints(ws, setpoints, pids, terrain, rng, params=None, duration=None):
    """Run the 1 kHz PID firmware against the PWM-driven simulator.

    ``pids`` is a ``(left, right)`` pair of :class:`PIDState`; the updated
    pair is returned with the new world state. Encoder feedback is the
    realized leg velocity.

    This is the hot loop of every closed-loop run, so it inlines
    :func:`pid_update` and one-tick simulator integration; the result is
    bit-identical to :func:`track_setpoints_reference`.
    """
    p = params or sw.DEFAULT_PARAMS
    duration = p.control_dt if duration is None else duration
    n = int(round(duration / p.firmware_dt))
    h = p.firmware_dt
    if not ws.is_finite():
        raise sw.SimulationError(f"non-finite world state: {ws}")
    sp_l, sp_r = setpoints
    pid_l, pid_r = pids
    kp, ki, kd, lim = pid_l.kp, pid_l.ki, pid_l.kd, pid_l.integral_limit
    lo, hi = pid_l.out_min, pid_l.out_max
    kp2, ki2, kd2, lim2 = pid_r.kp, pid_r.ki, pid_r.kd, pid_r.integral_limit
    lo2, hi2 = pid_r.out_min, pid_r.out_max
    il, el, ir, er = pid_l.integral, pid_l.prev_error, pid_r.integral, pid_r.prev_error

    (x, y, yaw, v, wz, roll, pitch, pl, pr, wl, wr, bat, t, _rr, _pr) = ws.as_tuple()
    alpha = min(1.0, h / p.leg_tau)
    freq = sw.TWO_PI * terrain.roll_freq
    noise = terrain.slip_sigma * math.sqrt(h / p.control_dt) / p.slip_v_ref
    kappa, gain0 = p.pwm_phase_kappa, p.pwm_gain
    tf = terrain.traction_fwd * p.r_leg * 0.5
    tt = terrain.traction_turn * p.k_turn
    rg = terrain.roll_gain
    decay = p.battery_decay * h
    sin, cos, wrap, wrap_phase = math.sin, math.cos, sw.wrap_to_pi, sw._wrap_phase
    normal = rng.standard_normal
    for _ in range(n):
        # left PID
        e = sp_l - wl
        de = (e - el) / h
        i_new = min(max(il + e * h, -lim), lim)
        raw = kp * e + ki * i_new + kd * de
        if (raw > hi and e > 0) or (raw < lo and e < 0):
            i_new = il
            raw = kp * e + ki * i_new + kd * de
        u_l = min(max(raw, lo), hi)
        il, el = i_new, e
        # right PID
        e = sp_r - wr
        de = (e - er) / h
        i_new = min(max(ir + e * h, -lim2), lim2)
        raw = kp2 * e + ki2 * i_new + kd2 * de
        if (raw > hi2 and e > 0) or (raw < lo2 and e < 0):
            i_new = ir
            raw = kp2 * e + ki2 * i_new + kd2 * de
        u_r = min(max(raw, lo2), hi2)
        ir, er = i_new, e
        # plant
        g = gain0 * bat / p.v_nominal
        wl += alpha * (u_l * g * (1.0 + kappa * sin(pl)) - wl)
        wr += alpha * (u_r * g * (1.0 + kappa * sin(pr)) - wr)
        v = tf * (wl + wr)
        t += h
        wz = tt * (wr - wl) + rg * sin(freq * t) * v
        if noise > 0.0 and v != 0.0:
            wz += noise * abs(v) * normal() / h
        x += v * cos(yaw) * h
        y += v * sin(yaw) * h
        yaw = wrap(yaw + wz * h)
        pl = wrap_phase(pl + wl * h)
        pr = wrap_phase(pr + wr * h)
        bat = max(0.0, bat - decay)
    amp = math.tanh(0.5 * (abs(wl) + abs(wr)) / p.omega_ref)
    osc, cosc = sin(freq * t), cos(freq * t)
    ws = sw.WorldState(
        x, y, yaw, v, wz, p.roll_amp * amp * osc, p.pitch_amp * amp * cosc,
        pl, pr, wl, wr, bat, t,
        p.roll_amp * amp * freq * cosc, -p.pitch_amp * amp * freq * osc,
    )
    return ws, (replace(pid_l, integral=il, prev_error=el), replace(pid_r, integral=ir, prev_error=er))


def track_setpoints_reference(ws, setpoints, pids, terrain, rng, params=None, duration=None):
    """Straightforward composition of :func:`pid_update` and one-tick steps."""
    p = params or sw.DEFAULT_PARAMS
    duration = p.control_dt if duration is None else duration
    n = int(round(duration / p.firmware_dt))
    pid_l, pid_r = pids
    for _ in range(n):
        u_l, pid_l = pid_update(pid_l, setpoints[0], ws.leg_vel_l, p.firmware_dt)
        u_r, pid_r = pid_update(pid_r, setpoints[1], ws.leg_vel_r, p.firmware_dt)
        ws = sw.step(ws, sw.Action(u_l, u_r, sw.Abstraction.PWM), terrain, p.firmware_dt, rng, p, substeps=1)
    return ws, (pid_l, pid_r)


def execute(ws, action, pids, terrain, rng, params=None):
    """Apply one control-period action through the chosen abstraction.

    Velocity setpoints go through the PID firmware; PWM is applied directly.
    """
    p = params or sw.DEFAULT_PARAMS
    if action.abstraction is sw.Abstraction.VELOCITY:
        sw.check_action(action, p)
        return track_setpoints(ws, (action.left, action.right), pids, terrain, rng, p)
    return sw.step(ws, action, terrain, p.control_dt, rng, p), pids


# ---------------------------------------------------------------------------
# Closed-loop baseline run
# ---------------------------------------------------------------------------

def dd_rollout(cfg, terrain, path, params, duration, seed, bounds=None, start=None):
    """Run the differential-drive baseline on ``path`` for ``duration`` seconds.

    Returns a :class:`~mbloco.simworld.Trajectory` whose cost is the same
    path cost the MPC runs are scored with.
    """
    from .mpc import MPCConfig, path_cost

    cfg = cfg or default_config()
    p = sw.SimParams.from_config(cfg)
    rng = np.random.default_rng(seed)
    ws = start if start is not None else sw.eval_start(rng, cfg)
    pid0 = PIDState.from_config(cfg)
    pids = (pid0, pid0)
    n_steps = int(round(duration / p.control_dt))
    if bounds is None:
        bounds = (p.omega_min, p.omega_max)
    states, actions, worlds = [], [], []
    if n_steps > 0:
        states.append(sw.observe(ws, p))
        worlds.append(ws)
    for _ in range(n_steps):
        wl, wr = dd_control(states[-1], path, params, bounds)
        ws, pids = track_setpoints(ws, (wl, wr), pids, terrain, rng, p)
        actions.append((wl, wr))
        states.append(sw.observe(ws, p))
        worlds.append(ws)
    states = np.array(states).reshape(-1, sw.STATE_DIM)
    actions = np.array(actions).reshape(-1, 2)
    cost = path_cost(states, path, MPCConfig.from_config(cfg)) if n_steps > 0 else 0.0
    return sw.Trajectory(states, actions, cost, worlds)
