"""Random-action data collection and the (input, state-delta) dataset.

A rollout starts from an arbitrary pose, executes i.i.d. uniform actions for
``T`` control steps and records ``T + 1`` observations plus one start-of-
rollout terrain embedding. Slicing turns each transition into a training pair
``([s_t; a_t], s_{t+1} - s_t)``; the pair keeps a reference to its rollout so
the rollout's embedding is shared by all of its pairs.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ddrive, features
from . import simworld as sw
from .config import config_hash, default_config, world_hash

DATA_MAGIC = b"RCHD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


class DatasetFileError(ValueError):
    pass


@dataclass
class Rollout:
    id: int
    terrain: str
    states: np.ndarray  # (T+1, 24)
    actions: np.ndarray  # (T, 2)
    embedding: features.Embedding
    seed: int
    abstraction: str = "velocity"

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a rollout needs exactly one more state than actions")


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, S+A) float32
    targets: np.ndarray  # (N, S) float32
    rollout: np.ndarray  # (N,) rollout index of each pair
    embeddings: np.ndarray  # (R, k) float32, one row per rollout
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.inputs)

    @property
    def n_rollouts(self):
        return len(self.embeddings)

    @property
    def state_dim(self):
        return self.targets.shape[1]

    @property
    def action_dim(self):
        return self.inputs.shape[1] - self.targets.shape[1]

    @property
    def rollout_terrains(self):
        return self.meta.get("rollout_terrains", [])

    def embeddings_for(self, variant):
        """Per-rollout conditioning table for a model variant."""
        if variant == "one_hot":
            names = self.meta.get("terrain_order") or list(sw.terrain_presets())
            idx = {n: i for i, n in enumerate(names)}
            return np.array([features.one_hot(idx[t], len(names)).values for t in self.rollout_terrains])
        if self.embeddings.shape[1] == 0:
            raise ValueError("dataset carries no embeddings")
        return self.embeddings

    def subset(self, rollout_ids):
        """Pairs of the given rollouts, renumbered ``0..len(rollout_ids)-1``."""
        rollout_ids = [int(r) for r in rollout_ids]
        remap = np.full(self.n_rollouts, -1)
        remap[rollout_ids] = np.arange(len(rollout_ids))
        mask = remap[self.rollout] >= 0
        meta = dict(self.meta)
        terr = self.rollout_terrains
        if terr:
            meta["rollout_terrains"] = [terr[r] for r in rollout_ids]
        return Dataset(self.inputs[mask], self.targets[mask], remap[self.rollout[mask]],
                       self.embeddings[rollout_ids], meta)

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.inputs, self.targets, self.rollout, self.embeddings):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

def rollout_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def collect_one(cfg, terrain, index, seed, horizon=50, proj=None, abstraction=sw.Abstraction.VELOCITY):
    """One random-action rollout; deterministic in ``(seed, index)``."""
    p = sw.SimParams.from_config(cfg)
    rs = rollout_seed(seed, index)
    rng = np.random.default_rng(rs)
    ws = sw.random_start(rng, cfg)
    tex = cfg["texture"]
    if proj is None:
        proj = default_projection(cfg)
    emb = features.embed(sw.render_patch(terrain, ws, tex["patch_size"], tex["cell_size"]), proj)
    pid0 = ddrive.PIDState.from_config(cfg)
    pids = (pid0, pid0)
    if abstraction is sw.Abstraction.VELOCITY:
        lo, hi = p.omega_min, p.omega_max
    else:
        lo, hi = -1.0, 1.0
    states = [sw.observe(ws, p)]
    actions = rng.uniform(lo, hi, size=(horizon, 2))
    for t in range(horizon):
        a = sw.Action(float(actions[t, 0]), float(actions[t, 1]), abstraction)
        try:
            ws, pids = ddrive.execute(ws, a, pids, terrain, rng, p)
        except sw.SimulationError as exc:
            raise sw.SimulationError(f"rollout {index}: {exc}") from exc
        states.append(sw.observe(ws, p))
    return Rollout(index, terrain.name, np.array(states), actions, emb, rs, abstraction.value)


def default_projection(cfg):
    tex, fc = cfg["texture"], cfg["features"]
    return features.make_projection(fc["projection_seed"], tex["patch_size"] ** 2 * 3, fc["embedding_dim"])


def collect(cfg, terrain, n_rollouts, horizon=50, seed=0, abstraction=sw.Abstraction.VELOCITY):
    """``n_rollouts`` random-action rollouts on one terrain."""
    if n_rollouts < 1:
        raise ValueError("need at least one rollout")
    cfg = cfg or default_config()
    proj = default_projection(cfg)
    return [collect_one(cfg, terrain, i, seed, horizon, proj, abstraction) for i in range(n_rollouts)]


def data_seconds(n_rollouts, horizon, dt):
    """Wall-clock seconds of robot time represented by a collection."""
    return n_rollouts * horizon * dt


# ---------------------------------------------------------------------------
# Slicing, splitting, merging
# ---------------------------------------------------------------------------

def slice_rollouts(rollouts, meta=None):
    """One ``([s_t; a_t], s_{t+1} - s_t)`` pair per transition.

    Differences are taken in float64 before the rows are stored as float32.
    """
    ins, outs, rid, embs, terrains = [], [], [], [], []
    for r, ro in enumerate(rollouts):
        s = np.asarray(ro.states, dtype=float)
        ins.append(np.concatenate([s[:-1], np.asarray(ro.actions, dtype=float)], axis=1))
        outs.append(s[1:] - s[:-1])
        rid.append(np.full(len(ro.actions), r))
        embs.append(ro.embedding.values)
        terrains.append(ro.terrain)
    if not rollouts:
        return Dataset(np.zeros((0, sw.STATE_DIM + 2), np.float32), np.zeros((0, sw.STATE_DIM), np.float32),
                       np.zeros(0, np.int64), np.zeros((0, 0), np.float32), dict(meta or {}))
    m = dict(meta or {})
    m.setdefault("terrains", sorted(set(terrains)))
    m["rollout_terrains"] = terrains
    m["rollout_seeds"] = [int(ro.seed) for ro in rollouts]
    return Dataset(
        np.concatenate(ins).astype(np.float32),
        np.concatenate(outs).astype(np.float32),
        np.concatenate(rid).astype(np.int64),
        np.asarray(embs, dtype=np.float32),
        m,
    )


def reassemble(ds):
    """Recover each rollout's state sequence from its pairs."""
    out = []
    S = ds.state_dim
    for r in range(ds.n_rollouts):
        rows = np.flatnonzero(ds.rollout == r)
        s = ds.inputs[rows, :S].astype(float)
        last = s[-1] + ds.targets[rows[-1]].astype(float)
        out.append(np.vstack([s, last]))
    return out


def split(ds, ratio, seed=0):
    """Split by rollout into ``(train, val)``; ``ratio`` is the train fraction."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    R = ds.n_rollouts
    if R < 2:
        raise ValueError("need at least two rollouts to split")
    order = np.random.default_rng(seed).permutation(R)
    n_train = min(max(int(round(ratio * R)), 1), R - 1)
    return ds.subset(np.sort(order[:n_train])), ds.subset(np.sort(order[n_train:]))


def merge(datasets, terrain_order=None):
    """Concatenate datasets, renumbering rollouts."""
    if not datasets:
        raise ValueError("nothing to merge")
    dims = {(d.inputs.shape[1], d.targets.shape[1], d.embeddings.shape[1]) for d in datasets}
    if len(dims) > 1:
        raise ValueError(f"datasets disagree on dimensions: {sorted(dims)}")
    offset = 0
    ins, outs, rid, embs, terr = [], [], [], [], []
    for d in datasets:
        ins.append(d.inputs)
        outs.append(d.targets)
        rid.append(d.rollout + offset)
        embs.append(d.embeddings)
        terr += list(d.rollout_terrains)
        offset += d.n_rollouts
    meta = {"terrains": sorted(set(terr)), "rollout_terrains": terr, "merged_from": [d.digest() for d in datasets]}
    hashes = {d.meta.get("world_hash") for d in datasets}
    if len(hashes) == 1 and None not in hashes:
        meta["world_hash"] = hashes.pop()
    if terrain_order:
        meta["terrain_order"] = list(terrain_order)
    return Dataset(np.concatenate(ins), np.concatenate(outs), np.concatenate(rid), np.concatenate(embs), meta)


def build_dataset(cfg, terrain, n_rollouts, horizon=50, seed=0, abstraction=sw.Abstraction.VELOCITY):
    """Collect and slice in one go, recording provenance."""
    rollouts = collect(cfg, terrain, n_rollouts, horizon, seed, abstraction)
    meta = {"terrains": [terrain.name], "seed": int(seed), "horizon": horizon, "abstraction": abstraction.value,
            "config_hash": config_hash(cfg),
            "world_hash": world_hash(cfg), "robot_seconds": data_seconds(n_rollouts, horizon, cfg["sim"]["control_dt"])}
    return slice_rollouts(rollouts, meta)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_dataset(ds, path):
    """Write the RCHD binary format.

    Layout (little-endian): magic ``RCHD``, u32 version, u32 n_pairs,
    u32 input_dim, u32 target_dim, u32 n_rollouts, u32 embed_dim; then
    f32 pair rows ``[input | target]``; u32 rollout index per pair; f32
    embedding table; u32 metadata length + UTF-8 JSON metadata; CRC32 of
    everything before it.
    """
    n, di = ds.inputs.shape
    dt = ds.targets.shape[1]
    R, k = ds.embeddings.shape
    rows = np.concatenate([ds.inputs, ds.targets], axis=1).astype("<f4")
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    body = b"".join([
        _HEADER.pack(DATA_MAGIC, DATA_VERSION, n, di, dt, R, k),
        rows.tobytes(),
        np.asarray(ds.rollout, dtype="<u4").tobytes(),
        np.asarray(ds.embeddings, dtype="<f4").tobytes(),
        struct.pack("<I", len(meta)),
        meta,
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise DatasetFileError("dataset file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if body[:4] != DATA_MAGIC:
        raise DatasetFileError(f"bad magic {body[:4]!r}")
    if zlib.crc32(body) != crc:
        raise DatasetFileError("dataset checksum mismatch (corrupt or truncated)")
    _m, version, n, di, dt, R, k = _HEADER.unpack_from(body)
    if version != DATA_VERSION:
        raise DatasetFileError(f"unsupported dataset version {version}")
    off = _HEADER.size
    rows = np.frombuffer(body, dtype="<f4", count=n * (di + dt), offset=off).reshape(n, di + dt)
    off += 4 * n * (di + dt)
    rid = np.frombuffer(body, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    emb = np.frombuffer(body, dtype="<f4", count=R * k, offset=off).reshape(R, k)
    off += 4 * R * k
    (mlen,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + mlen].decode())
    if off + mlen != len(body):
        raise DatasetFileError("dataset file inconsistent with its header")
    return Dataset(rows[:, :di].astype(np.float32), rows[:, di:].astype(np.float32), rid,
                   emb.astype(np.float32), meta)
