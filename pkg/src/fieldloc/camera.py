"""Pinhole camera model: pixel/ray conversion and pixel subset sampling.

Camera frame convention: +z forward, +x right, +y down.  A pixel with integer
index (u, v) (u = column, v = row) has its center at (u + 0.5, v + 0.5) in
continuous image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadCount, OutOfBounds
from .se3 import Pose


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Ray:
    """Origin (m) and unit direction in the world frame."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be nonzero")
        object.__setattr__(self, "direction", d / n)


@dataclass(frozen=True)
class PixelSample:
    """Pixel index (u = column, v = row) plus its RGB color in [0, 1]."""

    u: int
    v: int
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))


def pixel_directions_cam(intr: CameraIntrinsics, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions (n, 3) through the centers of pixels (us, vs)."""
    x = (np.asarray(us, dtype=float) + 0.5 - intr.cx) / intr.fx
    y = (np.asarray(vs, dtype=float) + 0.5 - intr.cy) / intr.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_to_ray(intr: CameraIntrinsics, pose: Pose, u: float, v: float) -> Ray:
    """World-frame ray through the center of pixel (u, v) from the given camera pose."""
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    d_cam = pixel_directions_cam(intr, np.array([u]), np.array([v]))[0]
    return Ray(pose.translation, pose.rotation.apply(d_cam))


def sample_pixels(intr: CameraIntrinsics, image: np.ndarray, m: int,
                  rng: np.random.Generator) -> list[PixelSample]:
    """m distinct pixels, uniform without replacement, with their image colors."""
    total = intr.width * intr.height
    if not 1 <= m <= total:
        raise BadCount(f"m must be in [1, {total}], got {m}")
    if image.shape[:2] != (intr.height, intr.width):
        raise ValueError("image shape does not match intrinsics")
    idx = rng.choice(total, size=m, replace=False)
    vs, us = np.divmod(idx, intr.width)
    return [PixelSample(int(u), int(v), image[v, u]) for u, v in zip(us, vs)]
