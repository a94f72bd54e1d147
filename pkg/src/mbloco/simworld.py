"""Seeded ground-truth simulator of a planar two-sided legged robot.

The simulator stands in for the physical robot, the motion capture rig and the
onboard camera. Its hidden truth is a :class:`WorldState`; controllers and
learned models only ever see the 24-element vector produced by :func:`observe`.

Conventions: yaw is counter-clockwise positive and wrapped to (-pi, pi]; leg
phases live in [0, 2pi); moving the right legs faster turns the robot left.
"""

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import _hash
from .config import ConfigError, default_config

TWO_PI = 2.0 * math.pi
STATE_DIM = 24

# Index map of the exported observation vector.
OBS_NAMES = (
    "x", "y", "z", "v_x", "v_y", "v_z",
    "cos_roll", "sin_roll", "cos_pitch", "sin_pitch", "cos_yaw", "sin_yaw",
    "omega_x", "omega_y", "omega_z",
    "cos_aL", "sin_aL", "cos_aR", "sin_aR",
    "v_aL", "v_aR", "bemf_L", "bemf_R", "V_bat",
)
OBS = {name: i for i, name in enumerate(OBS_NAMES)}
# (cos, sin) index pairs; kept unit-norm after model predictions.
ANGLE_PAIRS = ((6, 7), (8, 9), (10, 11), (15, 16), (17, 18))


class SimulationError(RuntimeError):
    pass


def wrap_to_pi(a):
    """Wrap an angle to (-pi, pi]; angles already in range come back unchanged."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


def wrap_to_pi_array(a):
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, TWO_PI)
    out = np.where(out <= 0.0, out + TWO_PI, out)
    return np.where((a > -np.pi) & (a <= np.pi), a, out - np.pi)


def _wrap_phase(a):
    a = a % TWO_PI
    return 0.0 if a >= TWO_PI else a


class Abstraction(enum.Enum):
    VELOCITY = "velocity"
    PWM = "pwm"


@dataclass(frozen=True)
class SimParams:
    control_dt: float = 0.1
    substeps: int = 10
    firmware_dt: float = 0.001
    r_leg: float = 0.04
    k_turn: float = 0.8
    leg_tau: float = 0.05
    omega_min: float = 0.0
    omega_max: float = 25.0
    pwm_gain: float = 40.0
    v_nominal: float = 3.7
    pwm_phase_kappa: float = 0.2
    battery_decay: float = 0.002
    roll_amp: float = 0.15
    pitch_amp: float = 0.05
    omega_ref: float = 15.0
    slip_v_ref: float = 0.5
    bemf_gain: float = 0.01

    @classmethod
    def from_config(cls, cfg):
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in cfg["sim"].items() if k in names}
        return cls(**kw)

    @property
    def v_max(self):
        return self.r_leg * max(abs(self.omega_min), abs(self.omega_max))


@dataclass(frozen=True)
class TerrainParams:
    name: str
    traction_fwd: float
    traction_turn: float
    slip_sigma: float
    roll_gain: float
    roll_freq: float
    texture_seed: int
    texture_palette: tuple

    def __post_init__(self):
        if not (0.0 < self.traction_fwd <= 1.0 and 0.0 < self.traction_turn <= 1.0):
            raise ValueError(f"terrain {self.name}: traction must lie in (0, 1]")
        if self.slip_sigma < 0.0:
            raise ValueError(f"terrain {self.name}: slip_sigma must be >= 0")
        pal = tuple(tuple(float(c) for c in color) for color in self.texture_palette)
        if len(pal) != 3 or any(len(c) != 3 for c in pal):
            raise ValueError(f"terrain {self.name}: palette needs 3 RGB colors")
        object.__setattr__(self, "texture_palette", pal)


def terrain_presets(cfg=None):
    """Named terrains from the config, in file order."""
    cfg = cfg or default_config()
    return {t["name"]: TerrainParams(**t) for t in cfg["terrains"]}


def get_terrain(name, cfg=None):
    presets = terrain_presets(cfg)
    if name not in presets:
        raise ConfigError(f"unknown terrain {name!r}; presets: {', '.join(presets)}")
    return presets[name]


@dataclass(frozen=True)
class WorldState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v_body: float = 0.0
    omega_z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    leg_phase_l: float = 0.0
    leg_phase_r: float = 0.0
    leg_vel_l: float = 0.0
    leg_vel_r: float = 0.0
    battery_v: float = 4.0
    t: float = 0.0
    # time derivatives of roll/pitch, exported as omega_x/omega_y
    roll_rate: float = 0.0
    pitch_rate: float = 0.0

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def is_finite(self):
        return all(math.isfinite(v) for v in self.as_tuple())


@dataclass(frozen=True)
class Action:
    left: float
    right: float
    abstraction: Abstraction = Abstraction.VELOCITY


def check_action(a, params):
    if a.abstraction is Abstraction.VELOCITY:
        lo, hi = params.omega_min, params.omega_max
    else:
        lo, hi = -1.0, 1.0
    for v in (a.left, a.right):
        if not (math.isfinite(v) and lo <= v <= hi):
            raise ValueError(f"{a.abstraction.value} command {v} outside [{lo}, {hi}]")


def _integrate(ws, abstraction, cmd_l, cmd_r, terrain, h, n, rng, p):
    """Advance ``n`` explicit-Euler ticks of length ``h``."""
    (x, y, yaw, v, wz, roll, pitch, pl, pr, wl, wr, bat, t, _rr, _pr) = ws.as_tuple()
    alpha = min(1.0, h / p.leg_tau)
    freq = TWO_PI * terrain.roll_freq
    noise = terrain.slip_sigma * math.sqrt(h / p.control_dt) / p.slip_v_ref
    pwm = abstraction is Abstraction.PWM
    tl, tr = cmd_l, cmd_r
    for _ in range(n):
        if pwm:
            g = p.pwm_gain * bat / p.v_nominal
            tl = cmd_l * g * (1.0 + p.pwm_phase_kappa * math.sin(pl))
            tr = cmd_r * g * (1.0 + p.pwm_phase_kappa * math.sin(pr))
        wl += alpha * (tl - wl)
        wr += alpha * (tr - wr)
        v = terrain.traction_fwd * p.r_leg * 0.5 * (wl + wr)
        t += h
        osc = math.sin(freq * t)
        wz = terrain.traction_turn * p.k_turn * (wr - wl) + terrain.roll_gain * osc * v
        if noise > 0.0 and v != 0.0:
            # slip enters the yaw rate, so the exported gyro reading carries it too
            wz += noise * abs(v) * rng.standard_normal() / h
        x += v * math.cos(yaw) * h
        y += v * math.sin(yaw) * h
        yaw = wrap_to_pi(yaw + wz * h)
        pl = _wrap_phase(pl + wl * h)
        pr = _wrap_phase(pr + wr * h)
        bat = max(0.0, bat - p.battery_decay * h)
    amp = math.tanh(0.5 * (abs(wl) + abs(wr)) / p.omega_ref)
    osc, cosc = math.sin(freq * t), math.cos(freq * t)
    roll = p.roll_amp * amp * osc
    pitch = p.pitch_amp * amp * cosc
    return WorldState(
        x, y, yaw, v, wz, roll, pitch, pl, pr, wl, wr, bat, t,
        p.roll_amp * amp * freq * cosc, -p.pitch_amp * amp * freq * osc,
    )


def step(ws, a, terrain, dt, rng, params=None, substeps=None):
    """Advance the world by ``dt`` seconds under action ``a``.

    Velocity setpoints are reached through a first-order lag (time constant
    ``leg_tau``); PWM commands drive the same lag towards
    ``pwm * gain * (V_bat / V_nominal) * (1 + kappa sin(phase))``. The interval
    is split into ``substeps`` Euler ticks (default ``params.substeps``).
    """
    p = params or DEFAULT_PARAMS
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not ws.is_finite():
        raise SimulationError(f"non-finite world state: {ws}")
    check_action(a, p)
    n = int(substeps or p.substeps)
    return _integrate(ws, a.abstraction, float(a.left), float(a.right), terrain, dt / n, n, rng, p)


def observe(ws, params=None):
    """Export the 24-element observation vector of a world state."""
    p = params or DEFAULT_PARAMS
    if not ws.is_finite():
        raise SimulationError(f"non-finite world state: {ws}")
    c, s = math.cos(ws.yaw), math.sin(ws.yaw)
    return np.array([
        ws.x, ws.y, 0.0,
        ws.v_body * c, ws.v_body * s, 0.0,
        math.cos(ws.roll), math.sin(ws.roll),
        math.cos(ws.pitch), math.sin(ws.pitch),
        c, s,
        ws.roll_rate, ws.pitch_rate, ws.omega_z,
        math.cos(ws.leg_phase_l), math.sin(ws.leg_phase_l),
        math.cos(ws.leg_phase_r), math.sin(ws.leg_phase_r),
        ws.leg_vel_l, ws.leg_vel_r,
        p.bemf_gain * ws.leg_vel_l, p.bemf_gain * ws.leg_vel_r,
        ws.battery_v,
    ])


def obs_yaw(s):
    """Yaw angle(s) recovered from observation vector(s)."""
    s = np.asarray(s)
    return np.arctan2(s[..., OBS["sin_yaw"]], s[..., OBS["cos_yaw"]])


def random_start(rng, cfg=None):
    """An arbitrary start state inside the arena, at rest."""
    cfg = cfg or default_config()
    st = cfg["start"]
    half = st["arena"]
    return WorldState(
        x=float(rng.uniform(-half, half)),
        y=float(rng.uniform(-half, half)),
        yaw=wrap_to_pi(float(rng.uniform(-math.pi, math.pi))),
        leg_phase_l=float(rng.uniform(0.0, TWO_PI)),
        leg_phase_r=float(rng.uniform(0.0, TWO_PI)),
        battery_v=float(rng.uniform(st["battery_min"], st["battery_max"])),
        t=float(rng.uniform(0.0, 10.0)),
    )


def eval_start(rng, cfg=None):
    """Start pose for path-following runs: fixed offset, random leg/roll phase."""
    cfg = cfg or default_config()
    st = cfg["start"]
    return WorldState(
        x=0.0,
        y=float(st["eval_offset"]),
        yaw=float(st["eval_yaw"]),
        leg_phase_l=float(rng.uniform(0.0, TWO_PI)),
        leg_phase_r=float(rng.uniform(0.0, TWO_PI)),
        battery_v=float(st["eval_battery"]),
        t=float(rng.uniform(0.0, 10.0)),
    )


# ---------------------------------------------------------------------------
# Synthetic terrain camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImagePatch:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3), values in [0, 1]

    def flatten(self):
        return self.pixels.reshape(-1)


def render_patch(terrain, ws, size=16, cell_size=0.01):
    """Procedural ground texture under the robot.

    Each world cell of side ``cell_size`` gets one of the terrain's three
    palette colors plus a small brightness jitter, both keyed on
    (texture_seed, cell index). Patches of nearby poses share cells.
    """
    if size < 4:
        raise ValueError("patch size must be >= 4")
    cx = math.floor(ws.x / cell_size)
    cy = math.floor(ws.y / cell_size)
    off = np.arange(size) - size // 2
    iy, ix = np.meshgrid(cy + off, cx + off, indexing="ij")
    h = _hash.mix(terrain.texture_seed, ix, iy)
    choice = (h % np.uint64(3)).astype(np.intp)
    jitter = _hash.uniform01(_hash.splitmix64(h)) - 0.5
    pal = np.asarray(terrain.texture_palette)
    pix = pal[choice] + 0.04 * jitter[..., None]
    return ImagePatch(size, size, np.clip(pix, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Waypoints:
    points: np.ndarray  # (n, 2)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("waypoints need shape (n>=2, 2)")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) <= 1e-9):
            raise ValueError("consecutive waypoints must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


PATH_KINDS = ("straight", "left", "right", "zigzag")
ZIGZAG_ANGLE = math.radians(30.0)


def make_path(kind, scale=1.0):
    """Standard test paths starting at the origin and heading along +x.

    ``scale`` is the segment length. The zigzag alternates between +30 and
    -30 degrees over four segments.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    if kind == "straight":
        pts = [(0.0, 0.0), (scale, 0.0)]
    elif kind == "left":
        pts = [(0.0, 0.0), (scale, 0.0), (scale, scale)]
    elif kind == "right":
        pts = [(0.0, 0.0), (scale, 0.0), (scale, -scale)]
    elif kind == "zigzag":
        pts = [(0.0, 0.0)]
        for i in range(4):
            ang = ZIGZAG_ANGLE if i % 2 == 0 else -ZIGZAG_ANGLE
            px, py = pts[-1]
            pts.append((px + scale * math.cos(ang), py + scale * math.sin(ang)))
    else:
        raise ValueError(f"unknown path kind {kind!r}; expected one of {PATH_KINDS}")
    return Waypoints(np.array(pts))


DEFAULT_PARAMS = SimParams.from_config(default_config())


@dataclass
class Trajectory:
    """Realized closed-loop run: observations, commanded actions and path cost."""

    states: np.ndarray  # (T+1, 24), or (0, 24) for an empty run
    actions: np.ndarray  # (T, 2)
    cost: float
    worlds: list  # WorldState per recorded observation

    def __len__(self):
        return len(self.actions)
