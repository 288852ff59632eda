"""Scenario configuration: YAML schema, validation, and object builders.

A scenario file is a nested key/value document describing the map, camera,
render settings, trajectory, odometry source, particle initialization, filter
constants, and metrics.  The seed is mandatory; nothing in a run reads the
wall clock for entropy.  See README for the full schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .camera import CameraIntrinsics
from .errors import ConfigError
from .fields import (AnalyticScene, Bounds, BoxPrimitive, Primitive, RadianceField,
                     Sphere, load_voxels, triad_scene)
from .motion import TrajectorySample
from .render import RenderConfig
from .se3 import NoiseParams, Pose, Rotation


@dataclass(frozen=True)
class Threshold:
    """Anneal threshold, absolute meters or relative to the initial spread."""

    value: float
    relative: bool

    def resolve(self, initial_spread: float) -> float:
        return self.value * initial_spread if self.relative else self.value


@dataclass(frozen=True)
class MapSpec:
    kind: str                      # "analytic" | "voxel" | "triad"
    background: np.ndarray | None = None
    bounds: Bounds | None = None
    primitives: tuple[Primitive, ...] = ()
    file: str | None = None


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str                      # "orbit" | "file"
    center: np.ndarray | None = None
    radius: float = 2.0
    height: float = 0.3
    start_deg: float = -60.0
    end_deg: float = 60.0
    count: int = 20
    rate_hz: float = 1.0
    file: str | None = None


@dataclass(frozen=True)
class OdometrySpec:
    source: str                    # "perturbed_gt" | "constant_velocity" | "file"
    noise: NoiseParams = NoiseParams(0.0, 0.0)
    file: str | None = None


@dataclass(frozen=True)
class InitCfg:
    mode: str                      # "local" | "global"
    # local: center = truth * (axis-angle offset, world-frame translation offset)
    offset_rot_deg: float = 0.0
    offset_trans: float = 0.0
    rot_range_deg: float = 0.0
    trans_range: float = 0.0
    # global: box = (truth position + per-axis U(-offset_trans, +offset_trans)) +- half_extent
    half_extent: float = 1.0
    yaw_range_deg: float = 180.0
    roll_pitch_range_deg: float = 0.0


@dataclass(frozen=True)
class FilterCfg:
    n_init: int
    n_reduced: int
    m_pixels: int
    sigma_r_init: float            # rad
    sigma_t_init: float            # m
    alpha_refine: Threshold
    alpha_super_refine: Threshold
    resampling: str = "multinomial"
    updates_per_image: int = 1


@dataclass(frozen=True)
class MetricsCfg:
    trials: int = 1
    max_steps: int = 60
    success_rot_deg: float = 5.0
    success_trans_m: float = 0.05


@dataclass(frozen=True)
class Scenario:
    seed: int
    map: MapSpec
    camera: CameraIntrinsics
    render: RenderConfig           # filter-side rendering
    dataset_render: RenderConfig   # ground-truth image rendering
    trajectory: TrajectorySpec
    odometry: OdometrySpec
    init: InitCfg
    filter: FilterCfg
    metrics: MetricsCfg
    dataset_dir: str | None = None
    bake_resolution: tuple[int, int, int] = (96, 96, 96)
    base_dir: Path = field(default=Path("."), compare=False)

    def with_seed(self, seed: int | None) -> "Scenario":
        return self if seed is None else replace(self, seed=int(seed))


def _req(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key '{key}' in {where}")
    return section[key]


def _vec3(value, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ConfigError(f"{where} must be a 3-vector")
    return arr


def _parse_map(section: dict) -> MapSpec:
    kind = _req(section, "type", "map")
    bg = section.get("background")
    background = None if bg is None else _vec3(bg, "map.background")
    if kind == "triad":
        return MapSpec("triad", background=background)
    if kind == "voxel":
        return MapSpec("voxel", background=background, file=_req(section, "file", "map"))
    if kind != "analytic":
        raise ConfigError(f"unknown map type {kind!r}")
    b = _req(section, "bounds", "map")
    bounds = Bounds(_vec3(_req(b, "lo", "map.bounds"), "map.bounds.lo"),
                    _vec3(_req(b, "hi", "map.bounds"), "map.bounds.hi"))
    prims: list[Primitive] = []
    for k, p in enumerate(section.get("primitives", [])):
        where = f"map.primitives[{k}]"
        pk = _req(p, "kind", where)
        sigma = float(_req(p, "sigma", where))
        color = _vec3(_req(p, "color", where), where + ".color")
        if pk == "sphere":
            prims.append(Sphere(_vec3(_req(p, "center", where), where), float(_req(p, "radius", where)),
                                sigma, color))
        elif pk == "box":
            prims.append(BoxPrimitive(_vec3(_req(p, "lo", where), where),
                                      _vec3(_req(p, "hi", where), where), sigma, color))
        else:
            raise ConfigError(f"{where}: unknown primitive kind {pk!r}")
    return MapSpec("analytic", background=background, bounds=bounds, primitives=tuple(prims))


def _parse_render(section: dict, where: str) -> RenderConfig:
    try:
        return RenderConfig(z_near=float(_req(section, "z_near", where)),
                            z_far=float(_req(section, "z_far", where)),
                            n_coarse=int(_req(section, "n_coarse", where)),
                            n_fine=int(section.get("n_fine", 0)),
                            stratified=bool(section.get("stratified", False)))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_threshold(value, where: str) -> Threshold:
    if isinstance(value, dict):
        if "relative" in value:
            return Threshold(float(value["relative"]), relative=True)
        if "absolute" in value:
            return Threshold(float(value["absolute"]), relative=False)
        raise ConfigError(f"{where} must carry 'relative' or 'absolute'")
    return Threshold(float(value), relative=False)


def load_scenario(path: str | Path, seed_override: int | None = None) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scenario must be a mapping")
    return parse_scenario(doc, base_dir=path.parent).with_seed(seed_override)


def parse_scenario(doc: dict, base_dir: Path = Path(".")) -> Scenario:
    if "seed" not in doc:
        raise ConfigError("scenario requires an explicit seed")
    cam = _req(doc, "camera", "scenario")
    try:
        intr = CameraIntrinsics(fx=float(_req(cam, "fx", "camera")), fy=float(_req(cam, "fy", "camera")),
                                cx=float(_req(cam, "cx", "camera")), cy=float(_req(cam, "cy", "camera")),
                                width=int(_req(cam, "width", "camera")),
                                height=int(_req(cam, "height", "camera")))
    except ValueError as exc:
        raise ConfigError(f"camera: {exc}") from exc

    f = _req(doc, "filter", "scenario")
    fcfg = FilterCfg(
        n_init=int(_req(f, "n_init", "filter")),
        n_reduced=int(_req(f, "n_reduced", "filter")),
        m_pixels=int(_req(f, "m_pixels", "filter")),
        sigma_r_init=float(np.radians(float(_req(f, "sigma_r_init_deg", "filter")))),
        sigma_t_init=float(_req(f, "sigma_t_init", "filter")),
        alpha_refine=_parse_threshold(_req(f, "alpha_refine", "filter"), "filter.alpha_refine"),
        alpha_super_refine=_parse_threshold(_req(f, "alpha_super_refine", "filter"),
                                            "filter.alpha_super_refine"),
        resampling=str(f.get("resampling", "multinomial")),
        updates_per_image=int(f.get("updates_per_image", 1)),
    )
    if fcfg.resampling not in ("multinomial", "systematic"):
        raise ConfigError(f"filter.resampling: unknown scheme {fcfg.resampling!r}")
    if not 0 < fcfg.n_reduced <= fcfg.n_init:
        raise ConfigError("filter: need 0 < n_reduced <= n_init")

    t = doc.get("trajectory", {"kind": "orbit"})
    tspec = TrajectorySpec(
        kind=str(t.get("kind", "orbit")),
        center=_vec3(t.get("center", [0.0, 0.3, 2.5]), "trajectory.center"),
        radius=float(t.get("radius", 2.0)),
        height=float(t.get("height", 0.3)),
        start_deg=float(t.get("start_deg", -60.0)),
        end_deg=float(t.get("end_deg", 60.0)),
        count=int(t.get("count", 20)),
        rate_hz=float(t.get("rate_hz", 1.0)),
        file=t.get("file"),
    )
    if tspec.kind not in ("orbit", "file"):
        raise ConfigError(f"trajectory.kind: unknown kind {tspec.kind!r}")
    if tspec.kind == "orbit" and tspec.count < 1:
        raise ConfigError("trajectory.count must be >= 1")
    if tspec.kind == "file" and not tspec.file:
        raise ConfigError("trajectory.kind=file requires trajectory.file")

    o = doc.get("odometry", {"source": "perturbed_gt"})
    ospec = OdometrySpec(
        source=str(o.get("source", "perturbed_gt")),
        noise=NoiseParams(sigma_r=float(np.radians(float(o.get("sigma_r_deg", 0.0)))),
                          sigma_t=float(o.get("sigma_t", 0.0))),
        file=o.get("file"),
    )
    if ospec.source not in ("perturbed_gt", "constant_velocity", "file"):
        raise ConfigError(f"odometry.source: unknown source {ospec.source!r}")

    i = _req(doc, "init", "scenario")
    icfg = InitCfg(
        mode=str(_req(i, "mode", "init")),
        offset_rot_deg=float(i.get("offset_rot_deg", 0.0)),
        offset_trans=float(i.get("offset_trans", 0.0)),
        rot_range_deg=float(i.get("rot_range_deg", 0.0)),
        trans_range=float(i.get("trans_range", 0.0)),
        half_extent=float(i.get("half_extent", 1.0)),
        yaw_range_deg=float(i.get("yaw_range_deg", 180.0)),
        roll_pitch_range_deg=float(i.get("roll_pitch_range_deg", 0.0)),
    )
    if icfg.mode not in ("local", "global"):
        raise ConfigError(f"init.mode: unknown mode {icfg.mode!r}")

    m = doc.get("metrics", {})
    metrics = MetricsCfg(trials=int(m.get("trials", 1)),
                         max_steps=int(m.get("max_steps", 60)),
                         success_rot_deg=float(m.get("success_rot_deg", 5.0)),
                         success_trans_m=float(m.get("success_trans_m", 0.05)))
    if metrics.trials < 1 or metrics.max_steps < 1:
        raise ConfigError("metrics: trials and max_steps must be >= 1")

    bake = doc.get("bake_resolution", [96, 96, 96])
    if not (isinstance(bake, (list, tuple)) and len(bake) == 3):
        raise ConfigError("bake_resolution must be a 3-list")

    return Scenario(
        seed=int(doc["seed"]),
        map=_parse_map(_req(doc, "map", "scenario")),
        camera=intr,
        render=_parse_render(_req(doc, "render", "scenario"), "render"),
        dataset_render=_parse_render(doc.get("dataset_render", doc["render"]), "dataset_render"),
        trajectory=tspec,
        odometry=ospec,
        init=icfg,
        filter=fcfg,
        metrics=metrics,
        dataset_dir=doc.get("dataset_dir"),
        bake_resolution=tuple(int(v) for v in bake),
        base_dir=base_dir,
    )


def build_field(scn: Scenario) -> RadianceField:
    spec = scn.map
    if spec.kind == "triad":
        return triad_scene(background=spec.background)
    if spec.kind == "voxel":
        return load_voxels(scn.base_dir / spec.file, background=spec.background)
    return AnalyticScene(list(spec.primitives), spec.bounds, background=spec.background)


def look_at(eye: np.ndarray, target: np.ndarray, down: np.ndarray | None = None) -> Pose:
    """Camera pose at eye looking toward target (+z forward, +y down, +x right)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    d = np.array([0.0, 1.0, 0.0]) if down is None else np.asarray(down, dtype=float)
    right = np.cross(d, fwd)
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("view direction is parallel to the down axis")
    right /= n
    true_down = np.cross(fwd, right)
    return Pose(Rotation(np.stack([right, true_down, fwd], axis=1), check=False), eye)


def build_trajectory(scn: Scenario) -> list[TrajectorySample]:
    spec = scn.trajectory
    if spec.kind == "file":
        from .motion import load_trajectory
        return load_trajectory(scn.base_dir / spec.file)
    samples = []
    angles = np.linspace(np.radians(spec.start_deg), np.radians(spec.end_deg), spec.count)
    for k, ang in enumerate(angles):
        eye = np.array([spec.center[0] + spec.radius * np.sin(ang),
                        spec.height,
                        spec.center[2] - spec.radius * np.cos(ang)])
        target = np.array([spec.center[0], spec.height, spec.center[2]])
        samples.append(TrajectorySample(k / spec.rate_hz, look_at(eye, target)))
    return samples
