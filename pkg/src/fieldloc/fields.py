"""Radiance-field map models: analytic primitive scenes and baked voxel grids.

Both built-in fields are Lambertian: the view direction is accepted by the
query interface and ignored.  Queries outside the field bounds return zero
density.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_VOX_MAGIC = b"VOXRF1"


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned box, meters."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))
        if np.any(self.hi <= self.lo):
            raise ValueError("bounds box must have positive extent")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


class RadianceField(ABC):
    """Map interface: density sigma (1/m) and RGB color at 3D points."""

    bounds: Bounds
    background: np.ndarray | None

    @abstractmethod
    def query(self, positions: np.ndarray,
              view_dirs: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(sigma (n,), rgb (n, 3)) at positions (n, 3); sigma >= 0, rgb in [0, 1]."""


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    sigma: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d2 = np.sum((pts - self.center) ** 2, axis=-1)
        return d2 <= self.radius * self.radius

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius


@dataclass(frozen=True)
class BoxPrimitive:
    lo: np.ndarray
    hi: np.ndarray
    sigma: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        if np.any(self.hi <= self.lo):
            raise ValueError("box must have positive extent")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi


Primitive = Sphere | BoxPrimitive


class AnalyticScene(RadianceField):
    """Constant-density primitives inside a bounding box.

    Where primitives overlap, the point takes the max sigma and the color of
    the max-sigma primitive; ties go to the lowest primitive index.
    """

    def __init__(self, primitives: list[Primitive], bounds: Bounds,
                 background: np.ndarray | None = None):
        for k, prim in enumerate(primitives):
            lo, hi = prim.aabb()
            if np.any(lo < bounds.lo - 1e-9) or np.any(hi > bounds.hi + 1e-9):
                raise ValueError(f"primitive {k} extends outside the scene bounds")
        self.primitives = list(primitives)
        self.bounds = bounds
        self.background = None if background is None else np.asarray(background, dtype=float).reshape(3)

    def query(self, positions: np.ndarray,
              view_dirs: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(positions, dtype=float)
        n = pts.shape[0]
        sigma = np.zeros(n)
        rgb = np.zeros((n, 3))
        if not self.primitives:
            return sigma, rgb
        sig_stack = np.zeros((len(self.primitives), n))
        for k, prim in enumerate(self.primitives):
            inside = prim.contains(pts)
            sig_stack[k, inside] = prim.sigma
        best = np.argmax(sig_stack, axis=0)
        sigma = sig_stack[best, np.arange(n)]
        colors = np.stack([p.color for p in self.primitives])
        hit = sigma > 0
        rgb[hit] = colors[best[hit]]
        outside = ~self.bounds.contains(pts)
        sigma[outside] = 0.0
        rgb[outside] = 0.0
        return sigma, rgb


class VoxelField(RadianceField):
    """Regular grid of (sigma, rgb) samples with trilinear interpolation.

    Sample k of axis x sits at lo_x + (k + 0.5) * cell_x (and likewise for y, z).
    Interpolation coordinates within half a cell of the lattice (1e-9 cells)
    snap to it, so querying a voxel center returns the stored value exactly.
    """

    def __init__(self, resolution: tuple[int, int, int], bounds: Bounds,
                 sigma: np.ndarray, rgb: np.ndarray,
                 background: np.ndarray | None = None):
        nx, ny, nz = (int(r) for r in resolution)
        if min(nx, ny, nz) < 2:
            raise ValueError("voxel resolution must be >= 2 per axis")
        sigma = np.asarray(sigma, dtype=float)
        rgb = np.asarray(rgb, dtype=float)
        if sigma.shape != (nx, ny, nz) or rgb.shape != (nx, ny, nz, 3):
            raise ValueError("sigma/rgb arrays do not match resolution")
        if np.any(sigma < 0):
            raise ValueError("stored sigmas must be non-negative")
        self.resolution = (nx, ny, nz)
        self.bounds = bounds
        self.sigma_grid = sigma
        self.rgb_grid = rgb
        self.background = None if background is None else np.asarray(background, dtype=float).reshape(3)
        self._cell = (bounds.hi - bounds.lo) / np.array([nx, ny, nz], dtype=float)

    def query(self, positions: np.ndarray,
              view_dirs: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(positions, dtype=float)
        n = pts.shape[0]
        res = np.array(self.resolution)
        g = (pts - self.bounds.lo) / self._cell - 0.5
        i0 = np.clip(np.floor(g).astype(int), 0, res - 2)
        frac = np.clip(g - i0, 0.0, 1.0)
        frac[frac < 1e-9] = 0.0
        frac[frac > 1.0 - 1e-9] = 1.0

        sigma = np.zeros(n)
        rgb = np.zeros((n, 3))
        for corner in range(8):
            dx, dy, dz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
            w = (np.where(dx, frac[:, 0], 1.0 - frac[:, 0])
                 * np.where(dy, frac[:, 1], 1.0 - frac[:, 1])
                 * np.where(dz, frac[:, 2], 1.0 - frac[:, 2]))
            ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
            sigma += w * self.sigma_grid[ix, iy, iz]
            rgb += w[:, None] * self.rgb_grid[ix, iy, iz]
        outside = ~self.bounds.contains(pts)
        sigma[outside] = 0.0
        rgb[outside] = 0.0
        return sigma, rgb

    def voxel_centers(self) -> np.ndarray:
        """Centers of all voxels, shape (nx, ny, nz, 3)."""
        return _grid_centers(self.resolution, self.bounds)


def _grid_centers(resolution: tuple[int, int, int], bounds: Bounds) -> np.ndarray:
    nx, ny, nz = resolution
    cell = (bounds.hi - bounds.lo) / np.array([nx, ny, nz], dtype=float)
    xs = bounds.lo[0] + (np.arange(nx) + 0.5) * cell[0]
    ys = bounds.lo[1] + (np.arange(ny) + 0.5) * cell[1]
    zs = bounds.lo[2] + (np.arange(nz) + 0.5) * cell[2]
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def bake_voxels(field: RadianceField, resolution: tuple[int, int, int],
                chunk: int = 1 << 18) -> VoxelField:
    """Sample a field at voxel centers into a VoxelField with the same bounds."""
    nx, ny, nz = (int(r) for r in resolution)
    if min(nx, ny, nz) < 2:
        raise ValueError("bake resolution must be >= 2 per axis")
    centers = _grid_centers((nx, ny, nz), field.bounds).reshape(-1, 3)
    sigma = np.empty(centers.shape[0])
    rgb = np.empty((centers.shape[0], 3))
    for start in range(0, centers.shape[0], chunk):
        sl = slice(start, min(start + chunk, centers.shape[0]))
        sigma[sl], rgb[sl] = field.query(centers[sl])
    return VoxelField((nx, ny, nz), field.bounds, sigma.reshape(nx, ny, nz),
                      rgb.reshape(nx, ny, nz, 3), background=field.background)


def save_voxels(field: VoxelField, path: str | Path) -> None:
    """Write the VOXRF1 binary format.

    Header: magic "VOXRF1", resolution as 3 little-endian uint32, bounds as
    6 little-endian float64 (lo xyz then hi xyz).  Body: nx*ny*nz records of
    4 little-endian float32 (sigma, r, g, b), x-fastest ordering.
    """
    nx, ny, nz = field.resolution
    with open(path, "wb") as f:
        f.write(_VOX_MAGIC)
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<6d", *field.bounds.lo, *field.bounds.hi))
        records = np.concatenate([field.sigma_grid[..., None], field.rgb_grid], axis=-1)
        # memory layout is [x, y, z]; file wants x fastest.
        f.write(np.ascontiguousarray(records.transpose(2, 1, 0, 3)).astype("<f4").tobytes())


def load_voxels(path: str | Path, background: np.ndarray | None = None) -> VoxelField:
    with open(path, "rb") as f:
        magic = f.read(len(_VOX_MAGIC))
        if magic != _VOX_MAGIC:
            raise ValueError(f"{path}: not a VOXRF1 file")
        nx, ny, nz = struct.unpack("<3I", f.read(12))
        b = struct.unpack("<6d", f.read(48))
        data = np.frombuffer(f.read(nx * ny * nz * 16), dtype="<f4")
    records = data.reshape(nz, ny, nx, 4).transpose(2, 1, 0, 3).astype(float)
    return VoxelField((nx, ny, nz), Bounds(np.array(b[:3]), np.array(b[3:])),
                      records[..., 0], records[..., 1:], background=background)


def triad_scene(background: np.ndarray | None = None) -> AnalyticScene:
    """Standard test scene: red/green/blue spheres over a gray floor, bounds [-3, 3]^3.

    Sphere radius 0.5 m, sigma 50/m; a 5 cm / 5 deg pose error moves the
    rendered silhouettes by several pixels at the default 96x96 intrinsics.
    """
    bounds = Bounds(np.array([-3.0, -3.0, -3.0]), np.array([3.0, 3.0, 3.0]))
    prims: list[Primitive] = [
        Sphere(np.array([-1.0, 0.0, 2.5]), 0.5, 50.0, np.array([1.0, 0.0, 0.0])),
        Sphere(np.array([1.0, 0.0, 2.5]), 0.5, 50.0, np.array([0.0, 1.0, 0.0])),
        Sphere(np.array([0.0, 1.0, 2.5]), 0.5, 50.0, np.array([0.0, 0.0, 1.0])),
        # +y is down, so the floor sits under the low sphere.
        BoxPrimitive(np.array([-3.0, 1.5, -3.0]), np.array([3.0, 1.8, 3.0]),
                     50.0, np.array([0.5, 0.5, 0.5])),
    ]
    return AnalyticScene(prims, bounds, background=background)
