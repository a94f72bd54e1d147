"""Terrain-conditioning vectors: one-hot labels and fixed random projections.

The projection route mirrors the image pathway of the conditioned model: an
image patch is flattened and multiplied by a fixed Gaussian matrix. A binary
file hook lets externally computed embeddings (e.g. pretrained conv features)
replace it.
"""

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMBED_MAGIC = b"RCHE"
EMBED_VERSION = 1
_EMBED_HEADER = struct.Struct("<4sIII")


class EmbeddingFileError(ValueError):
    pass


class Source(enum.Enum):
    ONE_HOT = "one_hot"
    RANDOM_PROJECTION = "random_projection"
    PRECOMPUTED = "precomputed"


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    source: Source

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self):
        return len(self.values)


@dataclass(frozen=True)
class ProjectionMatrix:
    seed: int
    matrix: np.ndarray  # (out_dim, in_dim), read-only

    @property
    def rows(self):
        return self.matrix.shape[0]

    @property
    def cols(self):
        return self.matrix.shape[1]


def make_projection(seed, in_dim, out_dim):
    """Fixed ``out_dim x in_dim`` matrix with i.i.d. N(0, 1/in_dim) entries."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError("projection dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    m = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
    m.setflags(write=False)
    return ProjectionMatrix(int(seed), m)


def embed(patch, proj):
    flat = np.asarray(patch.flatten() if hasattr(patch, "flatten") else patch, dtype=float).reshape(-1)
    if flat.size != proj.cols:
        raise ValueError(f"flattened patch has {flat.size} values, projection expects {proj.cols}")
    return Embedding(proj.matrix @ flat, Source.RANDOM_PROJECTION)


def one_hot(index, n):
    if not 0 <= index < n:
        raise ValueError(f"terrain index {index} out of range for {n} terrains")
    v = np.zeros(n)
    v[index] = 1.0
    return Embedding(v, Source.ONE_HOT)


def save_embeddings(path, table):
    """Write per-rollout embeddings to the RCHE binary format.

    ``table`` is a sequence, or a dict keyed by rollout ids ``0..n-1``; the
    rollout id is the row index. Layout (little-endian): magic ``RCHE``,
    u32 version, u32 k, u32 count, then ``count * k`` f32 values.
    """
    if isinstance(table, dict):
        ids = sorted(int(i) for i in table)
        if ids != list(range(len(ids))):
            raise EmbeddingFileError("rollout ids must be 0..n-1")
        items = [table[i] for i in ids]
    else:
        items = list(table)
    rows = [np.asarray(getattr(e, "values", e), dtype=float).reshape(-1) for e in items]
    dims = {r.size for r in rows}
    if len(dims) > 1:
        raise EmbeddingFileError(f"mixed embedding dimensions {sorted(dims)}")
    k = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, k, len(rows)))
        if rows:
            fh.write(np.asarray(rows, dtype="<f4").tobytes())


def load_embeddings(path, expected_dim=None):
    """Read an RCHE file into ``{rollout_id: Embedding}``."""
    data = Path(path).read_bytes()
    if len(data) < _EMBED_HEADER.size:
        raise EmbeddingFileError("embedding file truncated")
    magic, version, k, count = _EMBED_HEADER.unpack_from(data)
    if magic != EMBED_MAGIC:
        raise EmbeddingFileError(f"bad magic {magic!r}")
    if version != EMBED_VERSION:
        raise EmbeddingFileError(f"unsupported embedding file version {version}")
    if expected_dim is not None and k != expected_dim:
        raise EmbeddingFileError(f"embedding dim {k} != expected {expected_dim}")
    need = _EMBED_HEADER.size + 4 * count * k
    if len(data) != need:
        raise EmbeddingFileError(f"embedding file has {len(data)} bytes, header implies {need}")
    vals = np.frombuffer(data, dtype="<f4", count=count * k, offset=_EMBED_HEADER.size).reshape(count, k)
    return {i: Embedding(v.astype(float), Source.PRECOMPUTED) for i, v in enumerate(vals)}
