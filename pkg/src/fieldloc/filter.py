"""Monte Carlo localization core: particle set lifecycle.

Per image the filter runs one or more update steps, each being
annealing -> prediction -> photometric weight update -> pose estimate ->
resampling.  All randomness is drawn from streams keyed by
(seed, time_index, purpose[, particle index]), so results are independent of
thread count and scheduling.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from enum import Enum

import numpy as np

from . import streams
from .camera import CameraIntrinsics, Ray, pixel_directions_cam, sample_pixels
from .errors import BadSpec
from .fields import RadianceField
from .render import RenderConfig, render_ray, render_rays_batch, sample_coarse
from .se3 import (NoiseParams, Pose, Rotation, exp_se3_batch, rotation_average,
                  sample_noise_batch)

_WEIGHT_EPS_PER_PIXEL = 1e-8


@dataclass(frozen=True)
class Particle:
    pose: Pose
    weight: float


@dataclass
class ParticleSet:
    """Weighted pose hypotheses, stored as arrays for vectorized ops."""

    rotations: np.ndarray    # (n, 3, 3)
    translations: np.ndarray  # (n, 3)
    weights: np.ndarray       # (n,)
    time_index: int = 0

    @classmethod
    def from_particles(cls, particles: list[Particle], time_index: int = 0) -> "ParticleSet":
        if not particles:
            raise ValueError("particle set must be non-empty")
        return cls(np.stack([p.pose.rotation.matrix for p in particles]),
                   np.stack([p.pose.translation for p in particles]),
                   np.array([p.weight for p in particles], dtype=float),
                   time_index)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def particles(self) -> list[Particle]:
        return [Particle(self.pose(i), float(self.weights[i])) for i in range(self.size)]

    def pose(self, i: int) -> Pose:
        return Pose(Rotation(self.rotations[i], check=False), self.translations[i])


class Stage(Enum):
    INIT = "init"
    REFINE = "refine"
    SUPER_REFINE = "super_refine"


@dataclass(frozen=True)
class AnnealConfig:
    sigma_r_init: float       # rad
    sigma_t_init: float       # m
    alpha_refine: float       # m, spread threshold for the refine stage
    alpha_super_refine: float  # m
    n_init: int
    n_reduced: int

    def __post_init__(self):
        if not 0 < self.alpha_super_refine < self.alpha_refine:
            raise ValueError("need 0 < alpha_super_refine < alpha_refine")
        if not 0 < self.n_reduced <= self.n_init:
            raise ValueError("need 0 < n_reduced <= n_init")


@dataclass(frozen=True)
class AnnealState:
    sigma_r: float
    sigma_t: float
    n: int
    stage: Stage


def anneal(cfg: AnnealConfig, spread: float) -> AnnealState:
    """Noise/population schedule driven by the particle position spread.

    Recomputed from spread every step, with no hysteresis: if the spread
    re-grows the noise re-grows, which doubles as kidnapping recovery.  The
    top branch restores n_init as well (see package docs on the schedule).
    """
    if spread < cfg.alpha_super_refine:
        return AnnealState(cfg.sigma_r_init / 4.0, cfg.sigma_t_init / 4.0,
                           cfg.n_reduced, Stage.SUPER_REFINE)
    if spread < cfg.alpha_refine:
        return AnnealState(cfg.sigma_r_init / 2.0, cfg.sigma_t_init / 2.0,
                           cfg.n_reduced, Stage.REFINE)
    return AnnealState(cfg.sigma_r_init, cfg.sigma_t_init, cfg.n_init, Stage.INIT)


class InitMode(Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class InitSpec:
    """Particle initialization: LOCAL spread around a center pose, or GLOBAL
    positions in a world box with uniform yaw and bounded roll/pitch."""

    mode: InitMode
    count: int
    # LOCAL
    center: Pose | None = None
    rot_range: float = 0.0     # rad, per-axis uniform half-range
    trans_range: float = 0.0   # m, per-axis uniform half-range
    # GLOBAL; yaw about +y (world vertical), pitch about +x, roll about +z,
    # applied on top of base_rotation (default level/identity).
    box_lo: np.ndarray | None = None
    box_hi: np.ndarray | None = None
    yaw_range: float = 0.0
    roll_pitch_range: float = 0.0
    base_rotation: Rotation | None = None


def init_local(spec: InitSpec, rng: np.random.Generator) -> ParticleSet:
    """Particles at center * exp(delta), delta uniform per axis, uniform weights."""
    if spec.mode is not InitMode.LOCAL or spec.center is None:
        raise BadSpec("init_local needs a LOCAL spec with a center pose")
    if spec.count < 1 or spec.rot_range < 0 or spec.trans_range < 0:
        raise BadSpec("invalid LOCAL init ranges or count")
    n = spec.count
    rot = rng.uniform(-spec.rot_range, spec.rot_range, (n, 3)) if spec.rot_range > 0 else np.zeros((n, 3))
    trans = rng.uniform(-spec.trans_range, spec.trans_range, (n, 3)) if spec.trans_range > 0 else np.zeros((n, 3))
    dr, dt = exp_se3_batch(rot, trans)
    rc, tc = spec.center.rotation.matrix, spec.center.translation
    return ParticleSet(np.einsum("ij,njk->nik", rc, dr),
                       dt @ rc.T + tc,
                       np.full(n, 1.0 / n))


def init_global(spec: InitSpec, rng: np.random.Generator) -> ParticleSet:
    """Positions uniform in the box, yaw uniform, roll/pitch uniform, uniform weights."""
    if spec.mode is not InitMode.GLOBAL or spec.box_lo is None or spec.box_hi is None:
        raise BadSpec("init_global needs a GLOBAL spec with a position box")
    lo = np.asarray(spec.box_lo, dtype=float).reshape(3)
    hi = np.asarray(spec.box_hi, dtype=float).reshape(3)
    if np.any(hi < lo) or spec.count < 1 or spec.yaw_range < 0 or spec.roll_pitch_range < 0:
        raise BadSpec("invalid GLOBAL init box, ranges, or count")
    n = spec.count
    positions = rng.uniform(lo, hi, (n, 3)) if np.any(hi > lo) else np.tile(lo, (n, 1))
    yaw = rng.uniform(-spec.yaw_range, spec.yaw_range, n) if spec.yaw_range > 0 else np.zeros(n)
    rpr = spec.roll_pitch_range
    roll = rng.uniform(-rpr, rpr, n) if rpr > 0 else np.zeros(n)
    pitch = rng.uniform(-rpr, rpr, n) if rpr > 0 else np.zeros(n)

    zeros = np.zeros(n)
    ry = exp_se3_batch(np.stack([zeros, yaw, zeros], axis=1), np.zeros((n, 3)))[0]
    rx = exp_se3_batch(np.stack([pitch, zeros, zeros], axis=1), np.zeros((n, 3)))[0]
    rz = exp_se3_batch(np.stack([zeros, zeros, roll], axis=1), np.zeros((n, 3)))[0]
    rots = ry @ rx @ rz
    if spec.base_rotation is not None:
        rots = rots @ spec.base_rotation.matrix
    return ParticleSet(rots, positions, np.full(n, 1.0 / n))


def predict(pset: ParticleSet, odom: Pose, noise: NoiseParams,
            rng: np.random.Generator) -> ParticleSet:
    """Right-compose every particle with odom, then with a sampled noise transform."""
    n = pset.size
    rot_n, trans_n = sample_noise_batch(noise, n, rng)
    nr, nt = exp_se3_batch(rot_n, trans_n)
    ro, to = odom.rotation.matrix, odom.translation
    r_mid = np.einsum("nij,njk->nik", np.broadcast_to(ro, (n, 3, 3)), nr)
    t_mid = nt @ ro.T + to
    rotations = np.einsum("nij,njk->nik", pset.rotations, r_mid)
    translations = np.einsum("nij,nj->ni", pset.rotations, t_mid) + pset.translations
    # Bound orthonormality drift on very long runs.
    if (pset.time_index + 1) % 500 == 0:
        u, _, vt = np.linalg.svd(rotations)
        rotations = u @ vt
    return ParticleSet(rotations, translations, pset.weights.copy(), pset.time_index)


def _render_particles(pset: ParticleSet, dirs_cam: np.ndarray, field: RadianceField,
                      cfg: RenderConfig, lo: int, hi: int, render_seed: int | None,
                      depths: np.ndarray | None = None) -> np.ndarray:
    """Colors (hi-lo, m, 3) of the shared pixel set rendered from particles [lo, hi).

    Without fine sampling, all particles share one coarse depth set (midpoints,
    or one stratified draw per update passed via `depths`), which keeps weight
    differences about pose, not sampling luck.  With fine sampling each
    particle renders from its own (render_seed, index) stream.
    """
    m = dirs_cam.shape[0]
    if cfg.n_fine == 0:
        dirs_world = np.einsum("nij,mj->nmi", pset.rotations[lo:hi], dirs_cam)
        origins = np.repeat(pset.translations[lo:hi], m, axis=0)
        return render_rays_batch(field, origins, dirs_world.reshape(-1, 3),
                                 cfg, depths=depths).reshape(hi - lo, m, 3)
    out = np.empty((hi - lo, m, 3))
    for i in range(lo, hi):
        prng = streams.substream(render_seed, i)
        dirs_world = pset.rotations[i] @ dirs_cam.T
        for j in range(m):
            ray = Ray(pset.translations[i], dirs_world[:, j])
            out[i - lo, j] = render_ray(field, ray, cfg, prng)
    return out


def photometric_weight(m: int, residual: float | np.ndarray) -> float | np.ndarray:
    """Raw likelihood heuristic (m / max(eps, residual))^4 with eps = 1e-8 m.

    The fourth power is computed by squaring twice so exact ratios (e.g.
    residuals s and 4s giving a 256:1 weight ratio) hold to machine precision.
    """
    ratio = m / np.maximum(_WEIGHT_EPS_PER_PIXEL * m, residual)
    sq = ratio * ratio
    return sq * sq


def update_weights(pset: ParticleSet, image: np.ndarray, field: RadianceField,
                   intr: CameraIntrinsics, cfg: RenderConfig, m: int,
                   rng: np.random.Generator, *, render_seed: int | None = None,
                   threads: int = 1) -> ParticleSet:
    """Photometric weight update against one shared subset of m pixels.

    Raw weight is photometric_weight(m, residual) with the residual summing
    squared RGB distances over the subset; weights are normalized to sum to 1.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    pixels = sample_pixels(intr, image, m, rng)
    us = np.array([p.u for p in pixels])
    vs = np.array([p.v for p in pixels])
    target = np.stack([p.color for p in pixels])
    dirs_cam = pixel_directions_cam(intr, us, vs)
    if cfg.needs_rng and render_seed is None:
        render_seed = int(rng.integers(0, 2**63))
    depths = None
    if cfg.stratified and cfg.n_fine == 0:
        depths = sample_coarse(cfg, streams.substream(render_seed, 0))

    n = pset.size
    residuals = np.empty(n)

    def work(lo: int, hi: int) -> None:
        colors = _render_particles(pset, dirs_cam, field, cfg, lo, hi, render_seed,
                                   depths=depths)
        residuals[lo:hi] = np.sum((target - colors) ** 2, axis=(1, 2))

    if threads <= 1 or n == 1:
        work(0, n)
    else:
        edges = np.linspace(0, n, min(threads, n) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda se: work(*se), zip(edges[:-1], edges[1:])))

    raw = photometric_weight(m, residuals)
    return ParticleSet(pset.rotations, pset.translations, raw / raw.sum(), pset.time_index)


def resample(pset: ParticleSet, n: int, rng: np.random.Generator,
             scheme: str = "multinomial") -> ParticleSet:
    """Draw n particles with replacement by weight; output weights reset to 1/n.

    "multinomial" draws i.i.d. from the categorical distribution;
    "systematic" is the low-variance comb variant.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if scheme == "multinomial":
        idx = rng.choice(pset.size, size=n, replace=True, p=pset.weights)
    elif scheme == "systematic":
        positions = (rng.random() + np.arange(n)) / n
        idx = np.minimum(np.searchsorted(np.cumsum(pset.weights), positions, side="left"),
                         pset.size - 1)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return ParticleSet(pset.rotations[idx].copy(), pset.translations[idx].copy(),
                       np.full(n, 1.0 / n), pset.time_index)


def position_spread(pset: ParticleSet) -> float:
    """Sqrt of the trace of the (equal-weight, population) position covariance."""
    d = pset.translations - pset.translations.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def estimate_pose(pset: ParticleSet) -> Pose:
    """Weighted-mean position plus geodesic-L2 rotation average."""
    if abs(float(pset.weights.sum()) - 1.0) > 1e-6:
        raise ValueError("weights must be normalized before estimating the pose")
    translation = pset.weights @ pset.translations
    rotations = [Rotation(m, check=False) for m in pset.rotations]
    return Pose(rotation_average(rotations, pset.weights), translation)


@dataclass(frozen=True)
class StepTrace:
    """Per-update record emitted by step() when a trace sink is configured."""

    time_index: int
    update_index: int
    phase: str                 # "predict" or "update"
    estimate: Pose
    spread: float              # spread that drove the anneal decision
    n_particles: int           # particles rendered this update
    stage: Stage
    sigma_r: float
    sigma_t: float
    forward_passes: int        # field evaluations spent on this update
    wall_ms: float


@dataclass
class FilterContext:
    """Everything step() needs besides the particle set and the measurement."""

    field: RadianceField
    intrinsics: CameraIntrinsics
    render_cfg: RenderConfig
    anneal_cfg: AnnealConfig
    m_pixels: int
    seed: int
    resampling: str = "multinomial"
    updates_per_image: int = 1
    anneal_enabled: bool = True
    threads: int = 1
    trace: list[StepTrace] | None = dataclass_field(default=None)


def _anneal_state(ctx: FilterContext, spread: float) -> AnnealState:
    if not ctx.anneal_enabled:
        cfg = ctx.anneal_cfg
        return AnnealState(cfg.sigma_r_init, cfg.sigma_t_init, cfg.n_init, Stage.INIT)
    return anneal(ctx.anneal_cfg, spread)


def step(pset: ParticleSet, odom: Pose, image: np.ndarray | None,
         ctx: FilterContext) -> tuple[ParticleSet, Pose, AnnealState]:
    """One filter step for one image: updates_per_image update iterations.

    The odometry measurement is applied on the first prediction only; later
    iterations predict with pure annealed noise.  The pose estimate is taken
    from the weighted set before resampling.  With updates_per_image == 0 the
    step is prediction-only (no weighting, no resampling).
    """
    estimate: Pose | None = None
    state: AnnealState | None = None

    if ctx.updates_per_image == 0:
        t0 = time.perf_counter()
        t = pset.time_index
        spread = position_spread(pset)
        state = _anneal_state(ctx, spread)
        noise = NoiseParams(state.sigma_r, state.sigma_t)
        pset = predict(pset, odom, noise, streams.substream(ctx.seed, t, streams.PREDICT))
        estimate = estimate_pose(pset)
        pset.time_index = t + 1
        if ctx.trace is not None:
            ctx.trace.append(StepTrace(t, 0, "predict", estimate, spread, pset.size,
                                       state.stage, state.sigma_r, state.sigma_t, 0,
                                       (time.perf_counter() - t0) * 1e3))
        return pset, estimate, state

    for u in range(ctx.updates_per_image):
        t0 = time.perf_counter()
        t = pset.time_index
        spread = position_spread(pset)
        state = _anneal_state(ctx, spread)
        noise = NoiseParams(state.sigma_r, state.sigma_t)
        odom_u = odom if u == 0 else Pose.identity()
        pset = predict(pset, odom_u, noise, streams.substream(ctx.seed, t, streams.PREDICT))
        if u == 0 and ctx.trace is not None:
            ctx.trace.append(StepTrace(t, u, "predict", estimate_pose(pset), spread,
                                       pset.size, state.stage, state.sigma_r,
                                       state.sigma_t, 0,
                                       (time.perf_counter() - t0) * 1e3))
        pset = update_weights(pset, image, ctx.field, ctx.intrinsics, ctx.render_cfg,
                              ctx.m_pixels, streams.substream(ctx.seed, t, streams.PIXELS),
                              render_seed=streams.derive_base(ctx.seed, t, streams.RENDER),
                              threads=ctx.threads)
        estimate = estimate_pose(pset)
        n_rendered = pset.size
        evals = n_rendered * ctx.m_pixels * ctx.render_cfg.samples_per_ray
        pset = resample(pset, state.n, streams.substream(ctx.seed, t, streams.RESAMPLE),
                        ctx.resampling)
        pset.time_index = t + 1
        if ctx.trace is not None:
            ctx.trace.append(StepTrace(t, u, "update", estimate, spread, n_rendered,
                                       state.stage, state.sigma_r, state.sigma_t, evals,
                                       (time.perf_counter() - t0) * 1e3))
    assert estimate is not None and state is not None
    return pset, estimate, state
