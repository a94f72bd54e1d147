"""Learned one-step dynamics: MLP with hand-written backprop and Adam.

Two architectures share one code path:

* plain: normalized ``[s; a]`` -> ReLU hidden layers -> linear output.
* conditioned: normalized ``[s; a]`` -> one ReLU layer of width ``m``; the
  hidden vector and the normalized embedding ``e`` (width ``k``) are fused by
  an outer product, flattened to ``m * k``, then -> ReLU hidden -> linear.

The conditioned architecture is used with either random-projection image
embeddings or one-hot terrain labels; the variant tag records which.
All losses and gradients live in normalized space:
``L = mean_b 0.5 * ||norm(target_b) - net(norm(input_b))||^2``.
"""

import enum
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .simworld import ANGLE_PAIRS

STD_FLOOR = 1e-8
MODEL_MAGIC = b"RCHM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sIBIIIII")
_VARIANT_CODES = {"plain": 0, "one_hot": 1, "embedding": 2}


class ModelFileError(ValueError):
    pass


class Variant(enum.Enum):
    PLAIN = "plain"
    ONE_HOT = "one_hot"
    EMBEDDING = "embedding"

    @property
    def conditioned(self):
        return self is not Variant.PLAIN


# smallest float32 value not below the floor, so stored stds still respect it
_F32_FLOOR = float(np.nextafter(np.float32(STD_FLOOR), np.float32(1.0)))


def _f32(a):
    """Round to float32 precision but keep float64 storage."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class NormStats:
    mean_in: np.ndarray
    std_in: np.ndarray
    mean_out: np.ndarray
    std_out: np.ndarray

    @classmethod
    def fit(cls, inputs, targets):
        """Per-dimension mean/std with the std floored at ``STD_FLOOR``."""
        inputs = np.asarray(inputs, dtype=float)
        targets = np.asarray(targets, dtype=float)
        return cls(
            _f32(inputs.mean(axis=0)),
            np.maximum(_f32(inputs.std(axis=0)), _F32_FLOOR),
            _f32(targets.mean(axis=0)),
            np.maximum(_f32(targets.std(axis=0)), _F32_FLOOR),
        )

    @classmethod
    def identity(cls, in_dim, out_dim):
        return cls(np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim))

    def norm_in(self, x):
        return (x - self.mean_in) / self.std_in

    def denorm_in(self, xn):
        return xn * self.std_in + self.mean_in

    def norm_out(self, y):
        return (y - self.mean_out) / self.std_out

    def denorm_out(self, yn):
        return yn * self.std_out + self.mean_out


@dataclass
class DynModel:
    variant: Variant
    state_dim: int
    action_dim: int
    embed_dim: int  # 0 for plain
    n_pre: int  # layers applied before the outer-product fusion (0 for plain)
    params: list  # [W0, b0, W1, b1, ...]; W has shape (fan_in, fan_out)
    norm: NormStats
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self):
        return len(self.params) // 2

    @property
    def in_dim(self):
        return self.state_dim + self.action_dim

    def layer_dims(self):
        return [self.params[2 * i].shape for i in range(self.n_layers)]

    def validate(self):
        dims = self.layer_dims()
        if dims[0][0] != self.in_dim or dims[-1][1] != self.state_dim:
            raise ValueError(f"layer dims {dims} do not match I/O ({self.in_dim} -> {self.state_dim})")
        for i in range(1, len(dims)):
            want = dims[i - 1][1]
            if self.variant.conditioned and i == self.n_pre:
                want *= self.embed_dim
            if dims[i][0] != want:
                raise ValueError(f"layer {i} expects {dims[i][0]} inputs, previous gives {want}")
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("non-finite parameters")
        return self


def init_model(variant, state_dim, action_dim, embed_dim=0, hidden=(250, 250), sa_hidden=64,
               post_hidden=(250,), seed=0, norm=None):
    """Freshly initialized model (He-uniform weights, zero biases)."""
    variant = Variant(variant)
    rng = np.random.default_rng(seed)
    in_dim = state_dim + action_dim
    if variant.conditioned:
        if embed_dim < 1:
            raise ValueError("conditioned variants need embed_dim >= 1")
        sizes = [(in_dim, sa_hidden)]
        prev = sa_hidden * embed_dim
        for h in post_hidden:
            sizes.append((prev, h))
            prev = h
        sizes.append((prev, state_dim))
        n_pre = 1
    else:
        embed_dim = 0
        sizes, prev = [], in_dim
        for h in hidden:
            sizes.append((prev, h))
            prev = h
        sizes.append((prev, state_dim))
        n_pre = 0
    params = []
    for fan_in, fan_out in sizes:
        lim = np.sqrt(6.0 / fan_in)
        params += [_f32(rng.uniform(-lim, lim, size=(fan_in, fan_out))), np.zeros(fan_out)]
    total_in = in_dim + embed_dim
    norm = norm or NormStats.identity(total_in, state_dim)
    return DynModel(variant, state_dim, action_dim, embed_dim, n_pre, params, norm).validate()


# ---------------------------------------------------------------------------
# Forward / backward in normalized space
# ---------------------------------------------------------------------------

def _fuse(h, e):
    return (h[:, :, None] * e[:, None, :]).reshape(len(h), -1)


def forward_normalized(model, xn, en=None, params=None, cache=False):
    """Network output for normalized inputs ``xn`` (B, S+A) and ``en`` (B, k).

    With ``cache=True`` also returns the per-layer activations needed by
    :func:`backward`.
    """
    params = model.params if params is None else params
    L = model.n_layers
    h = xn
    acts = []
    for i in range(L):
        W, b = params[2 * i], params[2 * i + 1]
        if model.variant.conditioned and i == model.n_pre:
            acts.append(("fuse", h))
            h = _fuse(h, en)
        z = h @ W + b
        acts.append((h, z))
        h = z if i == L - 1 else np.maximum(z, 0.0)
    return (h, acts) if cache else h


def _shared_embedding_forward(model, xn, en_row):
    """Forward pass when every row shares one normalized embedding.

    Contracting the fused weight with the embedding first turns the
    ``(m*k) -> out`` layer into an ``m -> out`` one; same function, far
    fewer flops. Used by the planner, where one rollout has one image.
    """
    params = model.params
    L = model.n_layers
    h = xn
    for i in range(L):
        W, b = params[2 * i], params[2 * i + 1]
        if i == model.n_pre:
            m = h.shape[1]
            W = np.einsum("ijo,j->io", W.reshape(m, model.embed_dim, -1), en_row)
        z = h @ W + b
        h = z if i == L - 1 else np.maximum(z, 0.0)
    return h


def _prepare(model, s, a, e):
    s = np.atleast_2d(np.asarray(s, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if s.shape[1] != model.state_dim or a.shape[1] != model.action_dim:
        raise ValueError(f"expected state dim {model.state_dim} and action dim {model.action_dim}, "
                         f"got {s.shape[1]} and {a.shape[1]}")
    if model.variant.conditioned:
        if e is None:
            raise ValueError(f"{model.variant.value} model needs an embedding")
        e = np.asarray(getattr(e, "values", e), dtype=float)
        if e.shape[-1] != model.embed_dim:
            raise ValueError(f"embedding dim {e.shape[-1]} != model's {model.embed_dim}")
    elif e is not None:
        raise ValueError("plain model takes no embedding")
    if len(s) != len(a):
        s, a = np.broadcast_arrays(s, a)
    x = np.concatenate([s, a], axis=1)
    if not np.all(np.isfinite(x)) or (e is not None and not np.all(np.isfinite(e))):
        raise ValueError("non-finite model input")
    return x, e


def forward(model, s, a, e=None):
    """Predicted (denormalized) state change for state(s) ``s`` and action(s) ``a``.

    Accepts single vectors or batches. A 1-D ``e`` is shared by the whole
    batch; a 2-D ``e`` gives one embedding per row.
    """
    single = np.ndim(s) == 1 and np.ndim(a) == 1
    x, e = _prepare(model, s, a, e)
    sa = model.in_dim
    xn = (x - model.norm.mean_in[:sa]) / model.norm.std_in[:sa]
    if model.variant.conditioned:
        en = (e - model.norm.mean_in[sa:]) / model.norm.std_in[sa:]
        if en.ndim == 1:
            out = _shared_embedding_forward(model, xn, en)
        else:
            out = forward_normalized(model, xn, np.broadcast_to(en, (len(xn), model.embed_dim)))
    else:
        out = forward_normalized(model, xn)
    delta = model.norm.denorm_out(out)
    return delta[0] if single else delta


def renormalize_angle_pairs(s):
    s = np.array(s, dtype=float, copy=True)
    for ci, si in ANGLE_PAIRS:
        n = np.hypot(s[..., ci], s[..., si])
        n = np.where(n > 0.0, n, 1.0)
        s[..., ci] /= n
        s[..., si] /= n
    return s


def predict_next(model, s, a, e=None):
    """``s + forward(...)`` with every (cos, sin) pair projected back to unit norm."""
    return renormalize_angle_pairs(np.asarray(s, dtype=float) + forward(model, s, a, e))


def _normalized_batch(model, batch):
    inputs = np.asarray(batch.inputs, dtype=float)
    targets = np.asarray(batch.targets, dtype=float)
    if len(inputs) == 0:
        raise ValueError("empty batch")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    sa = model.in_dim
    xn = (inputs - model.norm.mean_in[:sa]) / model.norm.std_in[:sa]
    en = None
    if model.variant.conditioned:
        emb = np.asarray(batch.embeddings, dtype=float)
        en = (emb - model.norm.mean_in[sa:]) / model.norm.std_in[sa:]
    return xn, en, model.norm.norm_out(targets)


def loss(model, batch, params=None):
    xn, en, tn = _normalized_batch(model, batch)
    r = tn - forward_normalized(model, xn, en, params)
    return 0.5 * float(np.mean(np.sum(r * r, axis=1)))


def backward(model, batch, params=None):
    """Exact gradient of :func:`loss` w.r.t. every parameter; returns ``(loss, grads)``."""
    params = model.params if params is None else params
    xn, en, tn = _normalized_batch(model, batch)
    out, acts = forward_normalized(model, xn, en, params, cache=True)
    B = len(xn)
    r = out - tn
    value = 0.5 * float(np.mean(np.sum(r * r, axis=1)))
    grads = [None] * len(params)
    dh = r / B
    L = model.n_layers
    for i in range(L - 1, -1, -1):
        entry = acts.pop()
        h_in, z = entry
        dz = dh if i == L - 1 else dh * (z > 0.0)
        W = params[2 * i]
        grads[2 * i] = h_in.T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i == 0:
            break
        dh = dz @ W.T
        if model.variant.conditioned and i == model.n_pre:
            _tag, h_pre = acts.pop()
            dh = np.einsum("bij,bj->bi", dh.reshape(B, h_pre.shape[1], -1), en)
    return value, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, st, lr=0.001):
    """Bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    if len(params) != len(grads) or any(np.shape(p) != np.shape(g) for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    t = st.step_count + 1
    b1, b2 = st.beta1, st.beta2
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + st.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(st, m=new_m, v=new_v, step_count=t)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    embeddings: np.ndarray | None = None


@dataclass
class TrainResult:
    model: DynModel
    train_loss: list
    val_loss: list


def dataset_arrays(ds, variant):
    """Inputs, targets and per-pair embeddings of a dataset as float64 arrays."""
    x = np.asarray(ds.inputs, dtype=float)
    y = np.asarray(ds.targets, dtype=float)
    e = None
    if Variant(variant).conditioned:
        table = ds.embeddings_for(Variant(variant).value)
        e = np.asarray(table, dtype=float)[ds.rollout]
    return x, y, e


def train(train_set, variant="plain", epochs=50, lr=0.001, batch=1000, seed=0, val_set=None,
          hidden=(250, 250), sa_hidden=64, post_hidden=(250,), log=None):
    """Fit a dynamics model with minibatch Adam on normalized data.

    Normalization statistics come from ``train_set`` only. Minibatches are
    drawn from a per-epoch permutation of a seeded stream; the batch size is
    clipped to the dataset. Final parameters are rounded to float32 so the
    model file stores them losslessly.
    """
    variant = Variant(variant)
    x, y, e = dataset_arrays(train_set, variant)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    state_dim = y.shape[1]
    action_dim = x.shape[1] - state_dim
    full_in = x if e is None else np.concatenate([x, e], axis=1)
    norm = NormStats.fit(full_in, y)
    model = init_model(variant, state_dim, action_dim, 0 if e is None else e.shape[1], hidden=hidden,
                       sa_hidden=sa_hidden, post_hidden=post_hidden, seed=seed, norm=norm)
    rng = np.random.default_rng(seed)
    val = None
    if val_set is not None and len(val_set.inputs):
        vx, vy, ve = dataset_arrays(val_set, variant)
        val = Batch(vx, vy, ve)
    bs = min(batch, len(x))
    params = model.params
    opt = AdamState.zeros_like(params)
    train_curve, val_curve = [], []
    for ep in range(epochs):
        order = rng.permutation(len(x))
        total, seen = 0.0, 0
        for start in range(0, len(x), bs):
            idx = order[start:start + bs]
            b = Batch(x[idx], y[idx], None if e is None else e[idx])
            value, grads = backward(model, b, params)
            params, opt = adam_step(params, grads, opt, lr)
            total += value * len(idx)
            seen += len(idx)
        train_curve.append(total / seen)
        if val is not None:
            val_curve.append(loss(model, val, params))
        if log:
            log(ep, train_curve[-1], val_curve[-1] if val_curve else None)
    model = replace(model, params=[_f32(p) for p in params], meta={"epochs": epochs, "lr": lr, "batch": bs,
                                                                 "seed": seed, "n_train": len(x)})
    return TrainResult(model.validate(), train_curve, val_curve)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write the RCHM binary format.

    Layout (little-endian): magic ``RCHM``, u32 version, u8 variant,
    u32 state_dim, u32 action_dim, u32 embed_dim, u32 n_layers, u32 n_pre;
    then per layer u32 fan_in, u32 fan_out; then f32 mean_in, std_in,
    mean_out, std_out; then f32 weights (row-major) and biases per layer;
    then a CRC32 of everything before it.
    """
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, _VARIANT_CODES[model.variant.value], model.state_dim,
                          model.action_dim, model.embed_dim, model.n_layers, model.n_pre)]
    parts.append(np.asarray(model.layer_dims(), dtype="<u4").tobytes())
    n = model.norm
    for arr in (n.mean_in, n.std_in, n.mean_out, n.std_out, *model.params):
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise ModelFileError("model file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic = body[:4]
    if magic != MODEL_MAGIC:
        raise ModelFileError(f"bad magic {magic!r}")
    if zlib.crc32(body) != crc:
        raise ModelFileError("model file checksum mismatch (corrupt or truncated)")
    _m, version, code, sd, ad, ed, nl, npre = _HEADER.unpack_from(body)
    if version != MODEL_VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    variant = {v: k for k, v in _VARIANT_CODES.items()}.get(code)
    if variant is None:
        raise ModelFileError(f"unknown variant code {code}")
    off = _HEADER.size
    dims = np.frombuffer(body, dtype="<u4", count=2 * nl, offset=off).reshape(nl, 2)
    off += 8 * nl

    def take(count):
        nonlocal off
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        return arr

    try:
        norm = NormStats(take(sd + ad + ed), take(sd + ad + ed), take(sd), take(sd))
        params = []
        for fi, fo in dims:
            params.append(take(int(fi) * int(fo)).reshape(int(fi), int(fo)))
            params.append(take(int(fo)))
    except ValueError as exc:
        raise ModelFileError(f"model file inconsistent with its header: {exc}") from exc
    if off != len(body):
        raise ModelFileError("trailing bytes in model file")
    return DynModel(Variant(variant), sd, ad, ed, npre, params, norm).validate()
