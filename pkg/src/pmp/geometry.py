"""Pinhole cameras and structured point maps.

A point map stores, per pixel of a depth image, the 3-D coordinates of the
unprojected sample on the same H x W grid, plus a validity mask for samples
outside the depth bounds. All distances are meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CAMERA_FRAME = "camera"
WORLD_FRAME = "world"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )


@dataclass(frozen=True)
class CameraExtrinsics:
    """Rigid world-from-camera pose: p_world = R @ p_cam + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"extrinsics need a 3x3 rotation and 3-vector, got {R.shape}, {t.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"rotation determinant {np.linalg.det(R):.8f} != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass
class DepthImage:
    """H x W depth samples in meters with validity bounds [d_min, d_max]."""

    values: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth image must be 2-D, got shape {self.values.shape}")
        if not (0 <= self.d_min < self.d_max):
            raise ValueError(f"need 0 <= d_min < d_max, got [{self.d_min}, {self.d_max}]")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PointMap:
    """H x W x 3 grid of coordinates plus an H x W validity mask.

    Invalid entries are zero-filled; the mask is diagnostic and is never fed
    to the encoders.
    """

    coords: np.ndarray
    valid: np.ndarray
    frame: str

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ValueError(f"coords must be HxWx3, got {self.coords.shape}")
        if self.valid.shape != self.coords.shape[:2]:
            raise ValueError(f"mask {self.valid.shape} does not match grid {self.coords.shape[:2]}")
        if self.frame not in (CAMERA_FRAME, WORLD_FRAME):
            raise ValueError(f"unknown frame tag {self.frame!r}")


def clip_rgb(rgb: np.ndarray) -> np.ndarray:
    """Clamp an H x W x 3 image into [0, 1]."""
    return np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)


def unproject_pixel(u: float, v: float, d: float, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point for pixel (u, v) at depth d > 0."""
    if d <= 0:
        raise ValueError(f"depth must be positive, got {d}")
    return np.array([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d])


def project_point(p, intr: CameraIntrinsics) -> tuple[float, float, float]:
    """Inverse pinhole map: camera-frame point -> (u, v, depth)."""
    x, y, z = np.asarray(p, dtype=np.float64)
    if z <= 0:
        raise ValueError(f"point behind camera, z={z}")
    return (x / z * intr.fx + intr.cx, y / z * intr.fy + intr.cy, z)


def build_point_map(depth: DepthImage, intr: CameraIntrinsics) -> PointMap:
    """Per-pixel unprojection of a depth image into a camera-frame point map.

    A pixel is valid iff its depth is finite and within [d_min, d_max];
    invalid coordinates are zeroed.
    """
    h, w = depth.shape
    if (w, h) != (intr.width, intr.height):
        raise ValueError(f"depth {w}x{h} does not match intrinsics {intr.width}x{intr.height}")
    d = depth.values
    finite = np.isfinite(d)
    valid = finite & (d >= depth.d_min) & (d <= depth.d_max)

    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    dsafe = np.where(valid, d, 0.0)
    coords = np.zeros((h, w, 3))
    coords[:, :, 0] = (u - intr.cx) / intr.fx * dsafe
    coords[:, :, 1] = (v - intr.cy) / intr.fy * dsafe
    coords[:, :, 2] = dsafe
    coords[~valid] = 0.0
    return PointMap(coords=coords, valid=valid, frame=CAMERA_FRAME)


def transform_points(pmap: PointMap, extr: CameraExtrinsics) -> PointMap:
    """Map a camera-frame point map into the world frame: p -> R p + t."""
    if pmap.frame != CAMERA_FRAME:
        raise ValueError(f"transform_points expects a camera-frame map, got {pmap.frame!r}")
    coords = pmap.coords @ extr.rotation.T + extr.translation
    coords[~pmap.valid] = 0.0
    return PointMap(coords=coords, valid=pmap.valid.copy(), frame=WORLD_FRAME)


def normalized_world_pmap(depth_values: np.ndarray, d_min: float, d_max: float,
                          intr: CameraIntrinsics, extr: CameraExtrinsics,
                          ws_lo, ws_hi) -> PointMap:
    """Full per-view pipeline: unproject, move to world frame, map into the
    workspace box as [-1, 1] coordinates."""
    depth = DepthImage(depth_values, d_min, d_max)
    pmap = transform_points(build_point_map(depth, intr), extr)
    return normalize_point_map(pmap, ws_lo, ws_hi)


def normalize_point_map(pmap: PointMap, lo, hi) -> PointMap:
    """Affinely map each axis from [lo, hi] onto [-1, 1], then clamp.

    Invalid entries stay exactly zero. The box must have positive extent on
    every axis.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ValueError("workspace box needs 3-vector lo and hi")
    if np.any(hi <= lo):
        raise ValueError(f"degenerate workspace box: lo={lo}, hi={hi}")
    scaled = (pmap.coords - lo) / (hi - lo) * 2.0 - 1.0
    coords = np.clip(scaled, -1.0, 1.0)
    coords[~pmap.valid] = 0.0
    return PointMap(coords=coords, valid=pmap.valid.copy(), frame=pmap.frame)
