"""Trainable heads: depth-view merger, point adapter, and max/avg fusion.

Merger:   f_d = W1^T ReLU(W2^T concat(F2D) + b2) + b1
Adapter:  f_p = W2p^T ReLU(W1p^T f3D + b1p) + b2p
Fusion:   f_g = (max(f_d, f_p) + (f_d + f_p) / 2) / 2, element-wise

All forwards accept a single sample or a leading batch axis. Gradients are
written out by hand; there is no autodiff.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, StaleCacheError
from .rng import SplitMix64

MERGER_FIELDS = ("W2", "b2", "W1", "b1")
ADAPTER_FIELDS = ("W1p", "b1p", "W2p", "b2p")
HDS_MAGIC = b"HDS1"


@dataclass
class MergerParams:
    W2: np.ndarray  # (N*C, H)
    b2: np.ndarray  # (H,)
    W1: np.ndarray  # (H, C)
    b1: np.ndarray  # (C,)

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_views(self) -> int:
        return self.W2.shape[0] // self.dim

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init(cls, n_views: int, dim: int, hidden: int, rng: SplitMix64) -> "MergerParams":
        fan2 = n_views * dim
        w2 = rng.normals(fan2 * hidden).reshape(fan2, hidden) / np.sqrt(fan2)
        w1 = rng.normals(hidden * dim).reshape(hidden, dim) / np.sqrt(hidden)
        return cls(w2, np.zeros(hidden), w1, np.zeros(dim))

    @classmethod
    def zeros(cls, n_views: int, dim: int, hidden: int) -> "MergerParams":
        return cls(np.zeros((n_views * dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim))


@dataclass
class AdapterParams:
    W1p: np.ndarray  # (D3, H3)
    b1p: np.ndarray  # (H3,)
    W2p: np.ndarray  # (H3, C)
    b2p: np.ndarray  # (C,)

    @property
    def in_dim(self) -> int:
        return self.W1p.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1p.shape[1]

    @classmethod
    def init(cls, in_dim: int, hidden: int, dim: int, rng: SplitMix64) -> "AdapterParams":
        w1 = rng.normals(in_dim * hidden).reshape(in_dim, hidden) / np.sqrt(in_dim)
        w2 = rng.normals(hidden * dim).reshape(hidden, dim) / np.sqrt(hidden)
        return cls(w1, np.zeros(hidden), w2, np.zeros(dim))

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, dim: int) -> "AdapterParams":
        return cls(np.zeros((in_dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim))


@dataclass
class GradientBundle:
    params: dict
    fd: np.ndarray | None = None
    fp: np.ndarray | None = None

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle({k: v * factor for k, v in self.params.items()},
                              None if self.fd is None else self.fd * factor,
                              None if self.fp is None else self.fp * factor)


def _concat_views(F2D: np.ndarray, n_views: int, dim: int) -> np.ndarray:
    F = np.asarray(F2D, dtype=float)
    if F.ndim == 2:
        F = F[None]
    if F.shape[1:] != (n_views, dim):
        raise ShapeError(f"depth features must be (N={n_views}, C={dim}) per sample, got {F.shape[1:]}")
    return F.reshape(F.shape[0], n_views * dim)


def merger_forward(F2D, p: MergerParams) -> np.ndarray:
    x = _concat_views(F2D, p.n_views, p.dim)
    out = np.maximum(x @ p.W2 + p.b2, 0.0) @ p.W1 + p.b1
    return out[0] if np.ndim(F2D) == 2 else out


def adapter_forward(f3D, p: AdapterParams) -> np.ndarray:
    x = np.atleast_2d(np.asarray(f3D, dtype=float))
    if x.shape[1] != p.in_dim:
        raise ShapeError(f"point feature must have dim {p.in_dim}, got {x.shape[1]}")
    out = np.maximum(x @ p.W1p + p.b1p, 0.0) @ p.W2p + p.b2p
    return out[0] if np.ndim(f3D) == 1 else out


def fuse(fd, fp) -> np.ndarray:
    fd, fp = np.asarray(fd, dtype=float), np.asarray(fp, dtype=float)
    if fd.shape != fp.shape:
        raise ShapeError(f"cannot fuse shapes {fd.shape} and {fp.shape}")
    return 0.5 * (np.maximum(fd, fp) + 0.5 * (fd + fp))


def fuse_backward(grad, fd, fp):
    """Ties route the max branch to ``fd``."""
    d_wins = fd >= fp
    gfd = grad * np.where(d_wins, 0.75, 0.25)
    gfp = grad * np.where(d_wins, 0.25, 0.75)
    return gfd, gfp


@dataclass
class HeadsCache:
    version: int
    x: np.ndarray
    merger_pre: np.ndarray
    merger_hidden: np.ndarray
    fd: np.ndarray
    f3d: np.ndarray | None = None
    adapter_pre: np.ndarray | None = None
    adapter_hidden: np.ndarray | None = None
    fp: np.ndarray | None = None
    heads_id: int = 0


@dataclass
class Heads:
    """Merger plus optional adapter; ``version`` changes whenever parameters do."""

    merger: MergerParams
    adapter: AdapterParams | None = None
    version: int = field(default=0)

    @classmethod
    def init(cls, n_views, dim, hidden, point_dim, point_hidden, rng: SplitMix64, with_adapter=True):
        merger = MergerParams.init(n_views, dim, hidden, rng)
        adapter = AdapterParams.init(point_dim, point_hidden, dim, rng) if with_adapter else None
        return cls(merger, adapter)

    def named_params(self, include_adapter: bool = True) -> dict:
        out = {k: getattr(self.merger, k) for k in MERGER_FIELDS}
        if include_adapter and self.adapter is not None:
            out.update({k: getattr(self.adapter, k) for k in ADAPTER_FIELDS})
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        owner = self.merger if name in MERGER_FIELDS else self.adapter
        if getattr(owner, name).shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {getattr(owner, name).shape}")
        setattr(owner, name, value)

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "Heads":
        m = MergerParams(*(getattr(self.merger, k).copy() for k in MERGER_FIELDS))
        a = None if self.adapter is None else AdapterParams(*(getattr(self.adapter, k).copy() for k in ADAPTER_FIELDS))
        return Heads(m, a, self.version)

    def forward(self, F2D, f3D=None):
        """Batched forward; returns ``(f_g, cache)``. Without ``f3D`` the output is f_d."""
        m = self.merger
        x = _concat_views(F2D, m.n_views, m.dim)
        pre = x @ m.W2 + m.b2
        hid = np.maximum(pre, 0.0)
        fd = hid @ m.W1 + m.b1
        cache = HeadsCache(self.version, x, pre, hid, fd, heads_id=id(self))
        if f3D is None:
            return fd, cache
        if self.adapter is None:
            raise ShapeError("point features given but heads have no adapter")
        a = self.adapter
        f3 = np.atleast_2d(np.asarray(f3D, dtype=float))
        if f3.shape != (x.shape[0], a.in_dim):
            raise ShapeError(f"point features must be (B, {a.in_dim}), got {f3.shape}")
        apre = f3 @ a.W1p + a.b1p
        ahid = np.maximum(apre, 0.0)
        fp = ahid @ a.W2p + a.b2p
        cache.f3d, cache.adapter_pre, cache.adapter_hidden, cache.fp = f3, apre, ahid, fp
        return fuse(fd, fp), cache

    def backward(self, grad_fg: np.ndarray, cache: HeadsCache, extra_grad_fd=None) -> GradientBundle:
        return heads_backward(grad_fg, cache, self, extra_grad_fd)


def heads_backward(upstream_grad_on_fg, cache: HeadsCache, heads: Heads, extra_grad_fd=None) -> GradientBundle:
    """Gradients of every active parameter given dL/df_g (or dL/df_d when no adapter ran).

    ``extra_grad_fd`` is added to dL/df_d after the fusion backward, for losses
    that read f_d directly.
    """
    if cache.heads_id != id(heads) or cache.version != heads.version:
        raise StaleCacheError("forward cache does not match current parameters")
    g = np.atleast_2d(np.asarray(upstream_grad_on_fg, dtype=float))
    if g.shape != cache.fd.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != {cache.fd.shape}")
    m = heads.merger
    if cache.fp is not None:
        gfd, gfp = fuse_backward(g, cache.fd, cache.fp)
    else:
        gfd, gfp = g, None
    if extra_grad_fd is not None:
        gfd = gfd + np.atleast_2d(extra_grad_fd)
    grads = {}
    grads["W1"] = cache.merger_hidden.T @ gfd
    grads["b1"] = gfd.sum(axis=0)
    gpre = (gfd @ m.W1.T) * (cache.merger_pre > 0)
    grads["W2"] = cache.x.T @ gpre
    grads["b2"] = gpre.sum(axis=0)
    if gfp is not None:
        a = heads.adapter
        grads["W2p"] = cache.adapter_hidden.T @ gfp
        grads["b2p"] = gfp.sum(axis=0)
        gapre = (gfp @ a.W2p.T) * (cache.adapter_pre > 0)
        grads["W1p"] = cache.f3d.T @ gapre
        grads["b1p"] = gapre.sum(axis=0)
    return GradientBundle(grads, gfd, gfp)


# --- HDS1 checkpoints ---------------------------------------------------------


def encode_hds1(heads: Heads) -> bytes:
    m = heads.merger
    a = heads.adapter
    d3, h3 = (a.in_dim, a.hidden) if a is not None else (0, 0)
    parts = [HDS_MAGIC, struct.pack("<5I", m.n_views, m.dim, m.hidden, d3, h3)]
    for k in MERGER_FIELDS:
        parts.append(np.ascontiguousarray(getattr(m, k), dtype="<f8").tobytes())
    if a is not None:
        for k in ADAPTER_FIELDS:
            parts.append(np.ascontiguousarray(getattr(a, k), dtype="<f8").tobytes())
    return b"".join(parts)


def decode_hds1(raw: bytes, offset: int = 0):
    """Parse an HDS1 block; returns ``(heads, end_offset)``."""
    if raw[offset:offset + 4] != HDS_MAGIC:
        raise FormatError("not an HDS1 checkpoint")
    n, c, h, d3, h3 = struct.unpack_from("<5I", raw, offset + 4)
    pos = offset + 24

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(raw):
            raise FormatError("truncated HDS1 checkpoint")
        arr = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
        return arr

    merger = MergerParams(take((n * c, h)), take((h,)), take((h, c)), take((c,)))
    adapter = None
    if d3:
        adapter = AdapterParams(take((d3, h3)), take((h3,)), take((h3, c)), take((c,)))
    return Heads(merger, adapter), pos
