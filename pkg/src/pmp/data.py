"""Bit-exact demonstration dataset container (`.pmpd`).

Layout, all little-endian: magic "PMPD", version u32=1, header
(n_episodes u32, n_views u8, img_h u16, img_w u16, action_dim u8), one
calibration block per view (fx, fy, cx, cy f32; 3x4 world-from-camera
row-major f32; d_min, d_max f32), then per episode: instruction
(len u16 + UTF-8), n_steps u32, and per step per view RGB u8[h*w*3] then
depth f32[h*w], followed by the action f32[action_dim].

RGB is stored as u8 and mapped back to [0, 1] on load; depth is stored raw
(pre-masking) so point-map construction parameters can change post hoc.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pmp.geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    DepthImage,
    build_point_map,
    transform_points,
)

MAGIC = b"PMPD"
VERSION = 1
EXTENSION = ".pmpd"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ViewCalibration:
    """Per-camera intrinsics, world-from-camera pose, and depth bounds."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    d_min: float
    d_max: float

    def intrinsics(self, width: int, height: int) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, width, height)

    def extrinsics(self) -> CameraExtrinsics:
        return CameraExtrinsics(self.rotation, self.translation)


@dataclass
class Episode:
    """One demonstration: S steps of V-view RGB-D frames plus actions."""

    instruction: str
    rgb: np.ndarray  # (S, V, H, W, 3) uint8
    depth: np.ndarray  # (S, V, H, W) float32
    actions: np.ndarray  # (S, A) float32

    @property
    def n_steps(self) -> int:
        return self.rgb.shape[0]


@dataclass
class Dataset:
    views: list
    episodes: list
    img_h: int
    img_w: int
    action_dim: int

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def total_steps(self) -> int:
        return sum(ep.n_steps for ep in self.episodes)


@dataclass
class DatasetStats:
    """Exact per-dimension action bounds plus point-map diagnostics."""

    action_min: np.ndarray
    action_max: np.ndarray
    pmap_min: np.ndarray
    pmap_max: np.ndarray
    n_episodes: int
    total_steps: int


def write_dataset(dataset: Dataset, path) -> int:
    """Serialize; returns the byte count. Identical input -> identical bytes."""
    h, w, a, v = dataset.img_h, dataset.img_w, dataset.action_dim, dataset.n_views
    for i, ep in enumerate(dataset.episodes):
        s = ep.n_steps
        if ep.rgb.shape != (s, v, h, w, 3) or ep.rgb.dtype != np.uint8:
            raise DatasetError(f"episode {i}: rgb shape/dtype {ep.rgb.shape}/{ep.rgb.dtype}")
        if ep.depth.shape != (s, v, h, w) or ep.depth.dtype != np.float32:
            raise DatasetError(f"episode {i}: depth shape/dtype {ep.depth.shape}/{ep.depth.dtype}")
        if ep.actions.shape != (s, a) or ep.actions.dtype != np.float32:
            raise DatasetError(f"episode {i}: actions shape/dtype {ep.actions.shape}/{ep.actions.dtype}")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<IBHHB", len(dataset.episodes), v, h, w, a)
    for cal in dataset.views:
        blob += struct.pack("<4f", cal.fx, cal.fy, cal.cx, cal.cy)
        rt = np.hstack([np.asarray(cal.rotation), np.asarray(cal.translation).reshape(3, 1)])
        blob += np.ascontiguousarray(rt, dtype="<f4").tobytes()
        blob += struct.pack("<2f", cal.d_min, cal.d_max)
    for ep in dataset.episodes:
        enc = ep.instruction.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<I", ep.n_steps)
        for s in range(ep.n_steps):
            for view in range(v):
                blob += ep.rgb[s, view].tobytes()
                blob += np.ascontiguousarray(ep.depth[s, view], dtype="<f4").tobytes()
            blob += np.ascontiguousarray(ep.actions[s], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))
    return len(blob)


def read_dataset(path) -> Dataset:
    """Exact inverse of write_dataset, validating lengths before allocation."""
    raw = Path(path).read_bytes()
    total = len(raw)
    if total < 8:
        raise DatasetError(f"truncated file: {total} bytes")
    if raw[:4] != MAGIC:
        raise DatasetError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported version {version}")
    off = 8
    if off + 10 > total:
        raise DatasetError(f"truncated header at offset {off}")
    n_eps, v, h, w, a = struct.unpack_from("<IBHHB", raw, off)
    off += 10

    views = []
    cal_bytes = 16 + 48 + 8
    for _ in range(v):
        if off + cal_bytes > total:
            raise DatasetError(f"truncated calibration at offset {off}")
        fx, fy, cx, cy = struct.unpack_from("<4f", raw, off)
        rt = np.frombuffer(raw, dtype="<f4", count=12, offset=off + 16).reshape(3, 4)
        d_min, d_max = struct.unpack_from("<2f", raw, off + 64)
        views.append(
            ViewCalibration(fx, fy, cx, cy, rt[:, :3].astype(np.float64),
                            rt[:, 3].astype(np.float64), d_min, d_max)
        )
        off += cal_bytes

    rgb_bytes = h * w * 3
    depth_bytes = h * w * 4
    step_bytes = v * (rgb_bytes + depth_bytes) + 4 * a
    episodes = []
    for ei in range(n_eps):
        if off + 2 > total:
            raise DatasetError(f"truncated episode {ei} header at offset {off}")
        (ilen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + ilen + 4 > total:
            raise DatasetError(f"truncated instruction of episode {ei} at offset {off}")
        instruction = raw[off : off + ilen].decode("utf-8")
        off += ilen
        (n_steps,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n_steps * step_bytes > total:
            raise DatasetError(f"truncated payload of episode {ei} at offset {off}")
        rgb = np.empty((n_steps, v, h, w, 3), dtype=np.uint8)
        depth = np.empty((n_steps, v, h, w), dtype=np.float32)
        actions = np.empty((n_steps, a), dtype=np.float32)
        for s in range(n_steps):
            for view in range(v):
                rgb[s, view] = np.frombuffer(raw, np.uint8, rgb_bytes, off).reshape(h, w, 3)
                off += rgb_bytes
                depth[s, view] = np.frombuffer(raw, "<f4", h * w, off).reshape(h, w)
                off += depth_bytes
            actions[s] = np.frombuffer(raw, "<f4", a, off)
            off += 4 * a
        episodes.append(Episode(instruction, rgb, depth, actions))
    if off != total:
        raise DatasetError(f"{total - off} trailing bytes after last episode")
    return Dataset(views, episodes, h, w, a)


def rgb_to_unit(rgb_u8: np.ndarray) -> np.ndarray:
    return rgb_u8.astype(np.float64) / 255.0


def unit_to_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def compute_stats(dataset: Dataset) -> DatasetStats:
    """Exact action bounds plus world-frame point bounds over valid pixels."""
    if dataset.total_steps == 0:
        raise DatasetError("empty dataset")
    acts = np.concatenate([ep.actions for ep in dataset.episodes], axis=0)
    pmap_min = np.full(3, np.inf)
    pmap_max = np.full(3, -np.inf)
    for ep in dataset.episodes:
        for view, cal in enumerate(dataset.views):
            intr = cal.intrinsics(dataset.img_w, dataset.img_h)
            extr = cal.extrinsics()
            for s in range(ep.n_steps):
                depth = DepthImage(ep.depth[s, view].astype(np.float64), cal.d_min, cal.d_max)
                pmap = transform_points(build_point_map(depth, intr), extr)
                if pmap.valid.any():
                    pts = pmap.coords[pmap.valid]
                    pmap_min = np.minimum(pmap_min, pts.min(axis=0))
                    pmap_max = np.maximum(pmap_max, pts.max(axis=0))
    return DatasetStats(
        action_min=acts.min(axis=0).astype(np.float64),
        action_max=acts.max(axis=0).astype(np.float64),
        pmap_min=pmap_min,
        pmap_max=pmap_max,
        n_episodes=len(dataset.episodes),
        total_steps=dataset.total_steps,
    )
