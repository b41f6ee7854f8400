"""Redundant feature elimination: principal basis, projection, renormalized cosine.

A feature ``f`` splits into its coordinates on the basis rows plus a residual
orthogonal to them. Plain cosine between ``f`` and a prototype ``t`` is

    cos(f, t) = (Vf . Vt + R_f . R_t) / (|f| |t|)

The renormalized cosine similarity keeps the first term only, still dividing
by the norms of the ORIGINAL vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateFeatureError, FormatError, ShapeError

PCV_MAGIC = b"PCV1"


@dataclass
class PrincipalBasis:
    V: np.ndarray  # (M, C), orthonormal rows
    singular_values: np.ndarray  # (C,), descending, zero padded
    energy_fraction: float

    @property
    def n_components(self) -> int:
        return self.V.shape[0]

    @property
    def dim(self) -> int:
        return self.V.shape[1]

    def retained_energy(self) -> float:
        s2 = self.singular_values**2
        total = s2.sum()
        return float(s2[: self.n_components].sum() / total) if total > 0 else 1.0


def _fix_signs(V: np.ndarray) -> np.ndarray:
    V = V.copy()
    for row in V:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return V


def fit_basis(F2D_all, energy_fraction: float = 0.95) -> PrincipalBasis:
    """Top right singular vectors of the raw (uncentered) feature matrix.

    ``M`` is the smallest count whose cumulative squared singular values reach
    ``energy_fraction`` of the total. ``energy_fraction >= 1`` keeps the full
    C x C orthonormal frame, null directions included.
    """
    F = np.atleast_2d(np.asarray(getattr(F2D_all, "rows", F2D_all), dtype=np.float64))
    if F.shape[0] < 1:
        raise DataError("need at least one feature row")
    if not np.all(np.isfinite(F)):
        raise DataError("feature matrix has non-finite entries")
    if not 0.0 < energy_fraction <= 1.0:
        raise DataError(f"energy_fraction must be in (0, 1], got {energy_fraction}")
    r, c = F.shape
    _, s, vt = np.linalg.svd(F, full_matrices=r < c)
    sv = np.zeros(c)
    sv[: s.size] = s
    s2 = sv**2
    total = s2.sum()
    if energy_fraction >= 1.0:
        m = c
    else:
        if total == 0:
            raise DataError("feature matrix is identically zero")
        cum = np.cumsum(s2)
        # relative slack absorbs summation rounding at exact thresholds
        m = int(np.searchsorted(cum, energy_fraction * total * (1 - 1e-12), side="left")) + 1
        m = min(m, c)
    return PrincipalBasis(_fix_signs(vt[:m]), sv, float(energy_fraction))


def _check_dim(v: np.ndarray, basis: PrincipalBasis) -> None:
    if v.shape[-1] != basis.dim:
        raise ShapeError(f"feature dim {v.shape[-1]} != basis dim {basis.dim}")


def project(v, basis: PrincipalBasis) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    _check_dim(v, basis)
    return v @ basis.V.T


def residual(v, basis: PrincipalBasis) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    _check_dim(v, basis)
    return v - (v @ basis.V.T) @ basis.V


def _norm(v, what):
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateFeatureError(f"{what} has zero norm")
    return n


def cosine_logit(f, proto) -> float:
    f, proto = np.asarray(f, dtype=float), np.asarray(proto, dtype=float)
    return float(f @ proto) / (_norm(f, "feature") * _norm(proto, "prototype"))


def rcs_logit(f, proto, basis: PrincipalBasis) -> float:
    f, proto = np.asarray(f, dtype=float), np.asarray(proto, dtype=float)
    nf, nt = _norm(f, "feature"), _norm(proto, "prototype")
    return float(project(f, basis) @ project(proto, basis)) / (nf * nt)


def predict_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- batched similarity with backward -------------------------------------


def _effective_protos(P: np.ndarray, basis: PrincipalBasis | None) -> np.ndarray:
    if basis is None:
        return P
    return (P @ basis.V.T) @ basis.V


def similarity_logits(F, P, basis: PrincipalBasis | None = None):
    """Logits (B, K): cosine when ``basis`` is None, renormalized cosine otherwise.

    Returns ``(logits, ctx)``; pass ``ctx`` to :func:`similarity_backward`.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    nf = np.linalg.norm(F, axis=1)
    npr = np.linalg.norm(P, axis=1)
    if np.any(nf == 0):
        raise DegenerateFeatureError("zero-norm feature in batch")
    if np.any(npr == 0):
        raise DegenerateFeatureError("zero-norm prototype")
    Q = _effective_protos(P, basis) / npr[:, None]
    logits = (F @ Q.T) / nf[:, None]
    return logits, (F, Q, nf, logits)


def similarity_backward(grad_logits, ctx) -> np.ndarray:
    """dL/dF from dL/dlogits: ``G Q / |f| - (sum_k G_k l_k) f / |f|^2``."""
    F, Q, nf, logits = ctx
    G = np.atleast_2d(grad_logits)
    return (G @ Q) / nf[:, None] - ((G * logits).sum(axis=1) / nf**2)[:, None] * F


# --- PCV1 files ---------------------------------------------------------------


def encode_pcv1(basis: PrincipalBasis) -> bytes:
    m, c = basis.V.shape
    return b"".join([
        PCV_MAGIC,
        struct.pack("<IId", c, m, basis.energy_fraction),
        np.ascontiguousarray(basis.V, dtype="<f8").tobytes(),
        np.ascontiguousarray(basis.singular_values, dtype="<f8").tobytes(),
    ])


def decode_pcv1(raw: bytes) -> PrincipalBasis:
    if raw[:4] != PCV_MAGIC:
        raise FormatError("not a PCV1 basis file")
    c, m, energy = struct.unpack_from("<IId", raw, 4)
    body = raw[20:]
    if len(body) != 8 * (m * c + c):
        raise FormatError(f"PCV1 payload size mismatch for M={m}, C={c}")
    vals = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return PrincipalBasis(vals[: m * c].reshape(m, c), vals[m * c:], energy)


def save_basis(path, basis: PrincipalBasis) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pcv1(basis))


def load_basis(path) -> PrincipalBasis:
    with open(path, "rb") as fh:
        return decode_pcv1(fh.read())
