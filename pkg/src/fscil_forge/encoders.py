"""Frozen toy encoders and EMB1 embedding files.

The CLIP depth encoder, DGCNN point encoder and CLIP text encoder of the full
method are replaced by small seeded maps:

* depth: 16x16 average pool -> flatten (256) -> fixed Gaussian 256 x C matrix
* points: per-point ReLU(W p + b) with W 3 x D3, max-pooled over points
* text: SHA-256 of the prompt seeds a SplitMix64 stream of C normals, unit norm

Weights are generated once per (dim, seed), marked read-only and never touched
by training.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .geometry import PointCloud
from .projection import DepthMapSet
from .rng import SplitMix64, derive_seed

EMB_MAGIC = b"EMB1"
POOL_SIZE = 16
PROMPT_TEMPLATE = "an image or projection or sketch of a {}"


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    keys: list

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.rows.shape[0] != len(self.keys):
            raise FormatError(f"{self.rows.shape[0]} rows but {len(self.keys)} keys")
        if not np.all(np.isfinite(self.rows)):
            raise DataError("embedding matrix has non-finite entries")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class PrototypeBank:
    rows: np.ndarray
    class_names: list

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("prototype class names must be unique")
        if np.any(np.linalg.norm(self.rows, axis=1) == 0):
            raise DataError("prototype rows must have nonzero norm")

    def index(self, name: str) -> int:
        return self.class_names.index(name)

    def subset(self, names) -> np.ndarray:
        lookup = {n: i for i, n in enumerate(self.class_names)}
        return self.rows[[lookup[n] for n in names]]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def depth_encoder_weights(dim: int, seed: int) -> np.ndarray:
    rng = SplitMix64(derive_seed(seed, "depth-encoder", dim))
    return _frozen(rng.normals(POOL_SIZE * POOL_SIZE * dim).reshape(POOL_SIZE * POOL_SIZE, dim))


@lru_cache(maxsize=None)
def point_encoder_weights(dim: int, seed: int) -> tuple:
    rng = SplitMix64(derive_seed(seed, "point-encoder", dim))
    w = rng.normals(3 * dim).reshape(3, dim)
    b = 0.5 * rng.normals(dim)
    return _frozen(w), _frozen(b)


def _pool_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if n == out:
        return x
    if n % out == 0:
        shape = list(x.shape)
        shape[axis:axis + 1] = [out, n // out]
        return x.reshape(shape).mean(axis=axis + 1)
    slices = []
    for k in range(out):
        lo = (k * n) // out
        hi = max(-(-((k + 1) * n) // out), lo + 1)
        slices.append(np.take(x, range(lo, hi), axis=axis).mean(axis=axis))
    return np.stack(slices, axis=axis)


def pool_maps(maps: np.ndarray) -> np.ndarray:
    """(N, H, W) -> (N, 256) by area averaging onto a 16 x 16 grid."""
    pooled = _pool_axis(_pool_axis(np.asarray(maps, dtype=float), POOL_SIZE, 1), POOL_SIZE, 2)
    return pooled.reshape(pooled.shape[0], -1)


def encode_depth_toy(maps: DepthMapSet | np.ndarray, dim: int, seed: int) -> np.ndarray:
    """One C-dim row per view; linear, no bias."""
    arr = maps.maps if isinstance(maps, DepthMapSet) else np.asarray(maps)
    if arr.ndim == 2:
        arr = arr[None]
    return pool_maps(arr) @ depth_encoder_weights(dim, seed)


def encode_points_toy(pc: PointCloud | np.ndarray, dim: int, seed: int) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else np.atleast_2d(np.asarray(pc, dtype=float))
    w, b = point_encoder_weights(dim, seed)
    return np.maximum(pts @ w + b, 0.0).max(axis=0)


def prompt_for(class_name: str) -> str:
    return PROMPT_TEMPLATE.format(class_name)


@lru_cache(maxsize=4096)
def _text_vector(class_name: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(prompt_for(class_name).encode("utf-8")).digest()
    v = SplitMix64(int.from_bytes(digest[:8], "big")).normals(dim)
    return _frozen(v / np.linalg.norm(v))


def encode_text_toy(class_name: str, dim: int) -> np.ndarray:
    if not class_name or not class_name.strip():
        raise DataError("class name must be non-empty")
    return _text_vector(class_name, dim).copy()


def build_prototype_bank(class_names, dim: int) -> PrototypeBank:
    names = list(class_names)
    rows = np.stack([encode_text_toy(n, dim) for n in names]) if names else np.zeros((0, dim))
    return PrototypeBank(rows, names)


# --- EMB1 files -------------------------------------------------------------


def _sidecar_for(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_embeddings(path, matrix: EmbeddingMatrix) -> Path:
    """Write ``path`` (EMB1) plus ``path.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    rows = matrix.rows.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", rows.shape[1], rows.shape[0]))
        fh.write(rows.tobytes(order="C"))
    sidecar = _sidecar_for(path)
    sidecar.write_text(json.dumps({"file": path.name, "keys": list(matrix.keys)}, indent=1) + "\n")
    return sidecar


def read_emb1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic, not an EMB1 file")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    dim, count = struct.unpack_from("<II", raw, 4)
    body = raw[12:]
    if len(body) != 4 * dim * count:
        raise FormatError(f"{path}: header says {count}x{dim}, payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)


def load_embeddings(manifest_path, expected_dim: int | None = None) -> EmbeddingMatrix:
    """Load an EMB1 matrix with keys.

    ``manifest_path`` is either the JSON sidecar (``{"file": ..., "keys": [...]}``)
    or the EMB1 file itself, in which case ``<file>.json`` is read.
    """
    p = Path(manifest_path)
    if p.suffix == ".json":
        sidecar = p
        meta = json.loads(p.read_text())
        emb_path = p.parent / meta.get("file", p.name[:-5])
    else:
        emb_path, sidecar = p, _sidecar_for(p)
        meta = json.loads(sidecar.read_text())
    if "keys" not in meta:
        raise FormatError(f"{sidecar}: missing 'keys'")
    rows = read_emb1(emb_path)
    if expected_dim is not None and rows.shape[1] != expected_dim:
        raise FormatError(f"{emb_path}: dimension {rows.shape[1]} != configured {expected_dim}")
    if rows.shape[0] != len(meta["keys"]):
        raise FormatError(f"{emb_path}: {rows.shape[0]} rows but sidecar lists {len(meta['keys'])} keys")
    return EmbeddingMatrix(rows, list(meta["keys"]))


def check_dim(matrix: np.ndarray, dim: int, what: str = "features") -> None:
    if matrix.shape[-1] != dim:
        raise ShapeError(f"{what}: expected last dimension {dim}, got {matrix.shape[-1]}")
