"""Multi-view z-buffer depth rendering of point clouds.

Depth encoding: with camera distance ``d`` the admissible depth range for a
unit-sphere cloud is ``[d - 1, 2d]``. Depth is mapped linearly onto
``[1, DEPTH_EPS]`` (near is bright); background pixels stay 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DegenerateCloudError
from .geometry import PointCloud

DEPTH_EPS = 0.05
MAX_VIEWS = 26

_AXIS_DIRS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)


@dataclass(frozen=True)
class Camera:
    position: tuple
    up: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    resolution: tuple = (32, 32)
    fov_deg: float = 60.0

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.position, self.look_at)))

    def frame(self):
        """Orthonormal (right, up, forward) triple."""
        forward = np.subtract(self.look_at, self.position).astype(float)
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ConfigError("camera position coincides with look_at")
        forward /= norm
        right = np.cross(forward, np.asarray(self.up, dtype=float))
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise ConfigError("camera up vector is parallel to the view direction")
        right /= rn
        return right, np.cross(right, forward), forward

    def scaled(self, factor: float) -> "Camera":
        """Same view direction, distance multiplied by ``factor``."""
        if factor == 1.0:
            return self
        la = np.asarray(self.look_at, dtype=float)
        pos = la + (np.asarray(self.position, dtype=float) - la) * factor
        return replace(self, position=tuple(pos.tolist()))

    def rotated(self, rot: np.ndarray) -> "Camera":
        return replace(self,
                       position=tuple((rot @ np.asarray(self.position, float)).tolist()),
                       up=tuple((rot @ np.asarray(self.up, float)).tolist()),
                       look_at=tuple((rot @ np.asarray(self.look_at, float)).tolist()))


@dataclass
class DepthMapSet:
    maps: np.ndarray  # (N, H, W)
    cameras: list

    def __post_init__(self):
        if len(self.maps) != len(self.cameras):
            raise ValueError("one camera per depth map")

    def __len__(self):
        return len(self.maps)


def _default_up(direction: np.ndarray) -> tuple:
    return (0.0, 0.0, 1.0) if abs(direction[1]) > 0.99 else (0.0, 1.0, 0.0)


def default_camera_set(n_views: int = 6, distance: float = 2.0, resolution=(32, 32),
                       fov_deg: float = 60.0) -> list[Camera]:
    """Axis-aligned cameras for 6 views, otherwise a Fibonacci sphere starting at +z."""
    if not 1 <= n_views <= MAX_VIEWS:
        raise ConfigError(f"n_views must be in 1..{MAX_VIEWS}, got {n_views}")
    if distance <= 0:
        raise ConfigError("camera distance must be positive")
    if n_views == 6:
        dirs = _AXIS_DIRS
    elif n_views == 1:
        dirs = np.array([[0.0, 0.0, 1.0]])
    else:
        golden = math.pi * (3.0 - math.sqrt(5.0))
        i = np.arange(n_views)
        z = 1.0 - 2.0 * i / (n_views - 1)
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        dirs = np.column_stack([r * np.cos(golden * i), r * np.sin(golden * i), z])
    res = tuple(int(x) for x in resolution)
    return [Camera(tuple((d * distance).tolist()), _default_up(d), resolution=res, fov_deg=fov_deg)
            for d in dirs]


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.column_stack([dy[keep], dx[keep]])


def depth_value(z, distance: float):
    """Linear depth encoding: ``d - 1`` maps to 1, ``2d`` to ``DEPTH_EPS``."""
    near, far = distance - 1.0, 2.0 * distance
    v = 1.0 - (1.0 - DEPTH_EPS) * (np.asarray(z, dtype=float) - near) / (far - near)
    return np.clip(v, DEPTH_EPS, 1.0)


def render_view(points: np.ndarray, cam: Camera, point_radius_px: int = 1) -> np.ndarray:
    h, w = cam.resolution
    distance = cam.distance
    if distance <= 1.0:
        raise ConfigError("camera must sit outside the unit sphere (distance > 1)")
    right, up, forward = cam.frame()
    rel = points - np.asarray(cam.position, dtype=float)
    z = rel @ forward
    keep = (z > 1e-9) & (z <= 2.0 * distance)
    if not keep.any():
        return np.zeros((h, w))
    rel, z = rel[keep], z[keep]
    focal = (w / 2.0) / math.tan(math.radians(cam.fov_deg) / 2.0)
    col = np.floor(w / 2.0 + focal * (rel @ right) / z).astype(np.int64)
    row = np.floor(h / 2.0 - focal * (rel @ up) / z).astype(np.int64)
    offs = _disc_offsets(point_radius_px)
    rr = (row[:, None] + offs[None, :, 0]).ravel()
    cc = (col[:, None] + offs[None, :, 1]).ravel()
    zz = np.repeat(z, len(offs))
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, rr[inside] * w + cc[inside], zz[inside])
    out = np.zeros(h * w)
    hit = np.isfinite(zbuf)
    out[hit] = depth_value(zbuf[hit], distance)
    return out.reshape(h, w)


def render_views(pc: PointCloud, cameras: list[Camera], point_radius_px: int = 1,
                 distance_scale: float = 1.0, workers: int = 1) -> DepthMapSet:
    """Render every camera; maps are ordered by camera index regardless of ``workers``."""
    if len(pc) == 0:
        raise DegenerateCloudError("cannot render an empty cloud")
    if point_radius_px < 0:
        raise ConfigError("point_radius_px must be >= 0")
    cams = [c.scaled(distance_scale) for c in cameras]
    if workers > 1 and len(cams) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            maps = list(ex.map(lambda c: render_view(pc.points, c, point_radius_px), cams))
    else:
        maps = [render_view(pc.points, c, point_radius_px) for c in cams]
    return DepthMapSet(np.stack(maps), cams)


def write_pgm(path, depth: np.ndarray) -> None:
    """8-bit binary PGM (P5) for eyeballing a single depth map."""
    img = np.clip(np.round(depth * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
