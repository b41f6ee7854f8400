"""Point clouds: data model, normalization, augmentation, synthetic shapes, PCB1 I/O."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DegenerateCloudError, FormatError, UnknownShapeError
from .rng import SplitMix64, derive_seed

PCB_MAGIC = b"PCB1"
JITTER_SIGMA = 0.02
NOISY_SIGMA = 0.08
NOISY_OUTLIER_FRACTION = 0.05
_NORM_TOL = 1e-12


@dataclass
class PointCloud:
    points: np.ndarray
    class_name: str = ""
    sample_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DegenerateCloudError(f"points must be P x 3, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise DegenerateCloudError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise DegenerateCloudError("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.class_name, self.sample_id)


@dataclass(frozen=True)
class AugmentationConfig:
    """Sampling ranges for the training-time augmentation.

    Each rotation range is ``(lo, hi)`` in radians; a zero-width range pins the
    angle. ``distance_range`` scales the camera distance at render time.
    """

    rotation_ranges: tuple = ((0.0, 2 * math.pi),) * 3
    distance_range: tuple = (0.9, 1.1)

    def validate(self) -> None:
        if len(self.rotation_ranges) != 3:
            raise ConfigError("need exactly three rotation ranges (x, y, z)")
        for lo, hi in self.rotation_ranges:
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ConfigError(f"empty rotation range ({lo}, {hi})")
        lo, hi = self.distance_range
        if hi < lo or lo <= 0:
            raise ConfigError(f"invalid view distance range ({lo}, {hi})")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(((0.0, 0.0),) * 3, (1.0, 1.0))


@dataclass(frozen=True)
class AugmentationRecord:
    rotation: tuple
    view_distance_scale: float
    seed: int


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = pc.points
    centroid = pts.mean(axis=0)
    radius = np.linalg.norm(pts - centroid, axis=1).max()
    if radius < 1e-12:
        raise DegenerateCloudError(f"cloud {pc.sample_id!r} has zero extent")
    # already canonical: return unchanged so the operation is exactly idempotent
    if np.abs(centroid).max() <= _NORM_TOL and abs(radius - 1.0) <= _NORM_TOL:
        return pc.with_points(pts.copy())
    centered = pts - centroid
    return pc.with_points(centered / radius)


def rotation_matrix(angles) -> np.ndarray:
    """Rotation about x, then y, then z: ``Rz @ Ry @ Rx``."""
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(pc: PointCloud, seed: int, config: AugmentationConfig | None = None):
    """Random axis rotations plus a recorded camera-distance scale."""
    config = config or AugmentationConfig()
    config.validate()
    rng = SplitMix64(seed)
    u = rng.uniforms(4)
    angles = tuple(lo + u[i] * (hi - lo) for i, (lo, hi) in enumerate(config.rotation_ranges))
    dlo, dhi = config.distance_range
    scale = dlo + u[3] * (dhi - dlo)
    if all(a == 0.0 for a in angles):
        rotated = pc.points.copy()
    else:
        rotated = pc.points @ rotation_matrix(angles).T
    record = AugmentationRecord(tuple(float(a) for a in angles), float(scale), int(seed))
    return pc.with_points(rotated), record


# --- synthetic shapes -------------------------------------------------------


def _sample_triangles(rng: SplitMix64, tris: np.ndarray, n: int) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    cdf = np.cumsum(areas) / areas.sum()
    u = rng.uniforms(3 * n).reshape(n, 3)
    idx = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(tris) - 1)
    r1 = np.sqrt(u[:, 1])
    w = np.stack([1 - r1, r1 * (1 - u[:, 2]), r1 * u[:, 2]], axis=1)
    return w[:, :1] * a[idx] + w[:, 1:2] * b[idx] + w[:, 2:] * c[idx]


def _box_triangles(lo, hi) -> np.ndarray:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 5, 7, 6), (0, 1, 5, 4), (2, 3, 7, 6), (0, 2, 6, 4), (1, 3, 7, 5)]
    tris = []
    for q in quads:
        tris.append(v[[q[0], q[1], q[2]]])
        tris.append(v[[q[0], q[2], q[3]]])
    return np.array(tris)


def _unit_vectors(rng: SplitMix64, n: int) -> np.ndarray:
    g = rng.normals(3 * n).reshape(n, 3)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _sphere(rng, n):
    return _unit_vectors(rng, n)


def _ellipsoid(rng, n):
    return _unit_vectors(rng, n) * np.array([1.0, 0.6, 0.35])


def _hemisphere(rng, n):
    v = _unit_vectors(rng, n)
    v[:, 2] = np.abs(v[:, 2])
    return v


def _cube(rng, n):
    return _sample_triangles(rng, _box_triangles((-1, -1, -1), (1, 1, 1)), n)


def _cross(rng, n):
    tris = np.concatenate([
        _box_triangles((-1.0, -0.2, -0.2), (1.0, 0.2, 0.2)),
        _box_triangles((-0.2, -1.0, -0.2), (0.2, 1.0, 0.2)),
    ])
    return _sample_triangles(rng, tris, n)


def _plane(rng, n):
    u = rng.uniforms(2 * n).reshape(n, 2) * 2 - 1
    return np.column_stack([u, np.zeros(n)])


def _disk(rng, n):
    u = rng.uniforms(2 * n).reshape(n, 2)
    r, t = np.sqrt(u[:, 0]), 2 * np.pi * u[:, 1]
    return np.column_stack([r * np.cos(t), r * np.sin(t), np.zeros(n)])


def _cylinder(rng, n, radius=0.5, half=1.0):
    side, cap = 2 * np.pi * radius * 2 * half, np.pi * radius**2
    u = rng.uniforms(3 * n).reshape(n, 3)
    pick = u[:, 0] * (side + 2 * cap)
    t = 2 * np.pi * u[:, 1]
    pts = np.column_stack([radius * np.cos(t), radius * np.sin(t), (2 * u[:, 2] - 1) * half])
    caps = pick >= side
    r = radius * np.sqrt(u[caps, 2])
    pts[caps, 0] = r * np.cos(t[caps])
    pts[caps, 1] = r * np.sin(t[caps])
    pts[caps, 2] = np.where(pick[caps] >= side + cap, half, -half)
    return pts


def _cone(rng, n, radius=0.7, height=2.0):
    slant = math.hypot(radius, height)
    side, base = np.pi * radius * slant, np.pi * radius**2
    u = rng.uniforms(3 * n).reshape(n, 3)
    t = 2 * np.pi * u[:, 1]
    on_side = u[:, 0] * (side + base) < side
    # lateral area grows linearly with distance from apex
    s = np.where(on_side, np.sqrt(u[:, 2]), 1.0)
    r = np.where(on_side, radius * s, radius * np.sqrt(u[:, 2]))
    z = np.where(on_side, 1.0 - height * s, 1.0 - height)
    return np.column_stack([r * np.cos(t), r * np.sin(t), z])


def _torus(rng, n, big=0.8, small=0.25):
    u = rng.uniforms(2 * n).reshape(n, 2) * 2 * np.pi
    a, b = u[:, 0], u[:, 1]
    return np.column_stack([(big + small * np.cos(b)) * np.cos(a),
                            (big + small * np.cos(b)) * np.sin(a),
                            small * np.sin(b)])


def _ring(rng, n):
    t = rng.uniforms(n) * 2 * np.pi
    return np.column_stack([np.cos(t), np.sin(t), np.zeros(n)])


def _helix(rng, n, turns=2.0):
    t = rng.uniforms(n) * 2 * np.pi * turns
    return np.column_stack([0.6 * np.cos(t), 0.6 * np.sin(t), t / (np.pi * turns) - 1.0])


def _trefoil(rng, n):
    t = rng.uniforms(n) * 2 * np.pi
    x = np.sin(t) + 2 * np.sin(2 * t)
    y = np.cos(t) - 2 * np.cos(2 * t)
    z = -np.sin(3 * t)
    return np.column_stack([x, y, z]) / 3.0


def _pyramid(rng, n):
    b = np.array([[-1, -1, -0.7], [1, -1, -0.7], [1, 1, -0.7], [-1, 1, -0.7]], dtype=float)
    apex = np.array([0.0, 0.0, 0.9])
    tris = [b[[0, 1, 2]], b[[0, 2, 3]]]
    tris += [np.array([b[i], b[(i + 1) % 4], apex]) for i in range(4)]
    return _sample_triangles(rng, np.array(tris), n)


def _tetrahedron(rng, n):
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    tris = np.array([v[[0, 1, 2]], v[[0, 1, 3]], v[[0, 2, 3]], v[[1, 2, 3]]])
    return _sample_triangles(rng, tris, n)


def _capsule(rng, n, radius=0.35, half=0.6):
    side, caps = 2 * np.pi * radius * 2 * half, 4 * np.pi * radius**2
    u = rng.uniforms(2 * n).reshape(n, 2)
    on_side = u[:, 0] * (side + caps) < side
    t = 2 * np.pi * u[:, 1]
    pts = np.column_stack([radius * np.cos(t), radius * np.sin(t), np.zeros(n)])
    pts[:, 2] = (2 * rng.uniforms(n) - 1) * half
    k = int((~on_side).sum())
    if k:
        s = _unit_vectors(rng, k) * radius
        s[:, 2] += np.where(s[:, 2] >= 0, half, -half)
        pts[~on_side] = s
    return pts


SHAPES: dict[str, Callable[[SplitMix64, int], np.ndarray]] = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "pyramid": _pyramid,
    "helix": _helix,
    "cross": _cross,
    "ring": _ring,
    # extended library; the base ten come first
    "ellipsoid": _ellipsoid,
    "hemisphere": _hemisphere,
    "capsule": _capsule,
    "disk": _disk,
    "tetrahedron": _tetrahedron,
    "trefoil": _trefoil,
}
SHAPE_NAMES = tuple(SHAPES)


def gen_synthetic(class_name: str, n_points: int, seed: int, *, noisy: bool = False,
                  sample_id: str = "") -> PointCloud:
    """Points on a parametric surface with Gaussian jitter.

    ``noisy=True`` raises the jitter to 0.08 and replaces 5% of the points with
    uniform outliers in the bounding box, a stand-in for real-scan noise.
    """
    if class_name not in SHAPES:
        raise UnknownShapeError(f"unknown shape {class_name!r}; known: {', '.join(SHAPE_NAMES)}")
    if n_points < 1:
        raise ConfigError("n_points must be >= 1")
    rng = SplitMix64(derive_seed(seed, "synthetic", class_name))
    pts = SHAPES[class_name](rng, n_points)
    sigma = NOISY_SIGMA if noisy else JITTER_SIGMA
    pts = pts + sigma * rng.normals(3 * n_points).reshape(n_points, 3)
    if noisy:
        n_out = int(round(NOISY_OUTLIER_FRACTION * n_points))
        if n_out:
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            which = np.array(rng.permutation(n_points)[:n_out])
            pts[which] = lo + rng.uniforms(3 * n_out).reshape(n_out, 3) * (hi - lo)
    return PointCloud(pts, class_name, sample_id or f"{class_name}-{seed}")


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2) ** 2
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# --- file formats -----------------------------------------------------------


def write_pcb(path, pc: PointCloud) -> None:
    pts = pc.points.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(PCB_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes(order="C"))


def read_pcb(path, class_name: str = "", sample_id: str = "") -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != PCB_MAGIC:
        raise FormatError(f"{path}: not a PCB1 file")
    (count,) = struct.unpack_from("<I", raw, 4)
    body = raw[8:]
    if len(body) != 12 * count:
        raise FormatError(f"{path}: expected {count} points, payload has {len(body)} bytes")
    pts = np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(np.float64)
    return PointCloud(pts, class_name, sample_id or Path(path).stem)


def read_xyz(path, class_name: str = "", sample_id: str = "") -> PointCloud:
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 3:
            raise FormatError(f"{path}: bad line {line!r}")
        rows.append([float(x) for x in parts[:3]])
    if not rows:
        raise FormatError(f"{path}: no points")
    return PointCloud(np.array(rows), class_name, sample_id or Path(path).stem)


def load_cloud(path, class_name: str = "", sample_id: str = "") -> PointCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == PCB_MAGIC:
        return read_pcb(path, class_name, sample_id)
    if path.suffix.lower() == ".xyz":
        return read_xyz(path, class_name, sample_id)
    raise FormatError(f"{path}: unrecognized point cloud format")
