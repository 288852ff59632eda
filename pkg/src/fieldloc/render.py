"""Volumetric raymarching: coarse/fine depth sampling and quadrature compositing.

The color of a ray is the discrete quadrature sum(T_i * alpha_i * c_i) with
alpha_i = 1 - exp(-sigma_i * delta_i), T_i = prod_{j<i} (1 - alpha_j), where
delta_i is the gap to the next sample and the last gap runs to z_far.  Any
remaining transmittance is composited over the field's background color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, Ray, pixel_directions_cam
from .fields import RadianceField
from .se3 import Pose
from .streams import substream

_QUERY_CHUNK = 1 << 21


@dataclass(frozen=True)
class RenderConfig:
    z_near: float
    z_far: float
    n_coarse: int
    n_fine: int = 0
    stratified: bool = False

    def __post_init__(self):
        if not 0 <= self.z_near < self.z_far:
            raise ValueError("need 0 <= z_near < z_far")
        if self.n_coarse < 2:
            raise ValueError("n_coarse must be >= 2")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")

    @property
    def samples_per_ray(self) -> int:
        """Field evaluations per rendered ray (coarse pre-pass plus merged pass)."""
        if self.n_fine == 0:
            return self.n_coarse
        return 2 * self.n_coarse + self.n_fine

    @property
    def needs_rng(self) -> bool:
        return self.stratified or self.n_fine > 0


def sample_coarse(cfg: RenderConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """n_coarse depths in [z_near, z_far], one per equal-width bin, ascending.

    Stratified: one uniform draw per bin; otherwise bin midpoints.
    """
    edges = np.linspace(cfg.z_near, cfg.z_far, cfg.n_coarse + 1)
    lo, width = edges[:-1], np.diff(edges)
    if cfg.stratified:
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        return lo + width * rng.random(cfg.n_coarse)
    return lo + 0.5 * width


def sample_fine(coarse_depths: np.ndarray, coarse_weights: np.ndarray, n_fine: int,
                rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant pdf over the coarse bins.

    Bin k spans the midpoints around coarse depth k (end bins extended by half
    a gap, so uniform midpoint depths reconstruct [z_near, z_far] exactly).
    All-zero weights fall back to uniform.  Returns the fine depths merged and
    sorted with the coarse ones.
    """
    d = np.asarray(coarse_depths, dtype=float)
    w = np.asarray(coarse_weights, dtype=float)
    if d.ndim != 1 or d.shape != w.shape:
        raise ValueError("coarse depths and weights must be 1-d and the same length")
    if d.size < 2:
        raise ValueError("need at least two coarse depths")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if n_fine == 0:
        return np.sort(d)

    mids = 0.5 * (d[:-1] + d[1:])
    edges = np.concatenate([[d[0] - 0.5 * (d[1] - d[0])], mids,
                            [d[-1] + 0.5 * (d[-1] - d[-2])]])
    total = w.sum()
    if total <= 0:
        w = np.ones_like(w)
        total = w.sum()
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    cdf_lo = np.concatenate([[0.0], cdf[:-1]])

    u = rng.random(n_fine)
    j = np.clip(np.searchsorted(cdf, u, side="right"), 0, w.size - 1)
    span = cdf[j] - cdf_lo[j]
    frac = (u - cdf_lo[j]) / np.where(span > 0, span, 1.0)
    fine = edges[j] + frac * (edges[j + 1] - edges[j])
    return np.sort(np.concatenate([d, fine]))


def _alpha_trans(sigma: np.ndarray, depths: np.ndarray, z_far: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(alpha, transmittance-before-sample, transmittance-after-all) for sorted depths."""
    deltas = np.concatenate([np.diff(depths, axis=-1),
                             z_far - depths[..., -1:]], axis=-1)
    alpha = 1.0 - np.exp(-sigma * deltas)
    surv = np.cumprod(1.0 - alpha, axis=-1)
    trans = np.concatenate([np.ones_like(surv[..., :1]), surv[..., :-1]], axis=-1)
    return alpha, trans, surv[..., -1]


def quadrature_weights(sigma: np.ndarray, depths: np.ndarray, z_far: float) -> np.ndarray:
    """Per-sample contribution weights T_i * alpha_i."""
    alpha, trans, _ = _alpha_trans(sigma, depths, z_far)
    return trans * alpha


def _composite(sigma: np.ndarray, rgb: np.ndarray, depths: np.ndarray, z_far: float,
               background: np.ndarray | None) -> np.ndarray:
    alpha, trans, rest = _alpha_trans(sigma, depths, z_far)
    out = np.sum((trans * alpha)[..., None] * rgb, axis=-2)
    if background is not None:
        out = out + rest[..., None] * background
    return np.clip(out, 0.0, 1.0)


def render_ray(field: RadianceField, ray: Ray, cfg: RenderConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """RGB color of one ray."""
    depths = sample_coarse(cfg, rng)
    if cfg.n_fine > 0:
        if rng is None:
            raise ValueError("fine sampling requires an rng")
        pts = ray.origin + depths[:, None] * ray.direction
        sigma, _ = field.query(pts)
        depths = sample_fine(depths, quadrature_weights(sigma, depths, cfg.z_far),
                             cfg.n_fine, rng)
    pts = ray.origin + depths[:, None] * ray.direction
    sigma, rgb = field.query(pts)
    return _composite(sigma, rgb, depths, cfg.z_far, field.background)


def render_rays_batch(field: RadianceField, origins: np.ndarray, dirs: np.ndarray,
                      cfg: RenderConfig, depths: np.ndarray | None = None) -> np.ndarray:
    """Batch render of rays (origins (r, 3), unit dirs (r, 3)) -> (r, 3).

    All rays share one coarse depth set (midpoints unless `depths` is given),
    no fine pass; the filter's hot path.
    """
    if depths is None:
        depths = sample_coarse(RenderConfig(cfg.z_near, cfg.z_far, cfg.n_coarse))
    r, s = origins.shape[0], depths.size
    out = np.empty((r, 3))
    rows = max(1, _QUERY_CHUNK // s)
    for start in range(0, r, rows):
        sl = slice(start, min(start + rows, r))
        pts = origins[sl, None, :] + dirs[sl, None, :] * depths[None, :, None]
        sigma, rgb = field.query(pts.reshape(-1, 3))
        out[sl] = _composite(sigma.reshape(-1, s), rgb.reshape(-1, s, 3),
                             depths, cfg.z_far, field.background)
    return out


def render_image(field: RadianceField, pose: Pose, intr: CameraIntrinsics,
                 cfg: RenderConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render every pixel; returns a float image (height, width, 3) in [0, 1].

    With stratified or fine sampling active, each pixel uses a stream derived
    from (one draw from rng, row, column), so the result depends only on the
    rng state, not on evaluation order.
    """
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = pixel_directions_cam(intr, us.ravel(), vs.ravel())
    dirs_world = pose.rotation.apply(dirs_cam)
    if not cfg.needs_rng:
        origins = np.broadcast_to(pose.translation, dirs_world.shape)
        return render_rays_batch(field, origins, dirs_world, cfg).reshape(h, w, 3)

    if rng is None:
        raise ValueError("this render config requires an rng")
    base = int(rng.integers(0, 2**63))
    img = np.empty((h, w, 3))
    for v in range(h):
        for u in range(w):
            ray = Ray(pose.translation, dirs_world[v * w + u])
            img[v, u] = render_ray(field, ray, cfg, substream(base, v, u))
    return img


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Float [0, 1] image -> uint8."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def dequantize_image(img: np.ndarray) -> np.ndarray:
    """Uint8 image -> float [0, 1]."""
    return img.astype(float) / 255.0
