"""Experiment runners: dataset generation, benchmark protocols, metrics, artifacts.

Every run writes into its own output directory: a scenario snapshot, per-trial
step CSVs, a summary CSV, and (for benchmarks) mean-curve CSVs.  Summary and
curve files contain no wall-clock data, so identical scenario + seed yields
byte-identical copies regardless of thread count.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import streams
from .errors import ConfigError, NonConvergence
from .filter import (AnnealConfig, FilterContext, InitMode, InitSpec, StepTrace,
                     init_global, init_local, position_spread, step)
from .motion import (TrajectorySample, constant_velocity_propagate, dead_reckon,
                     load_odometry, load_trajectory, perturbed_gt_odometry,
                     save_trajectory)
from .render import dequantize_image, quantize_image, render_image
from .scenario import Scenario, build_field, build_trajectory
from .se3 import Pose, Rotation, rotation_geodesic_deg

STEP_HEADER = "step,updates,rot_err_deg,trans_err_m,spread_m,n_particles,wall_ms,forward_passes"
BENCH_SUMMARY_HEADER = ("trial,seed,truth_index,steps,success,success_step,"
                        "final_rot_err_deg,final_trans_err_m,forward_passes")
TRACK_SUMMARY_HEADER = ("trial,seed,final_rot_err_deg,final_trans_err_m,odom_drift_m,"
                        "median_postpred_trans_m,median_postupd_trans_m,forward_passes")
CURVES_HEADER = "step,mean_rot_err_deg,mean_trans_err_m,success_ratio"


@dataclass(frozen=True)
class StepRecord:
    step: int
    updates: int
    rot_err_deg: float
    trans_err_m: float
    spread_m: float
    n_particles: int
    wall_ms: float
    forward_passes: int

    def row(self) -> str:
        return (f"{self.step},{self.updates},{_fmt(self.rot_err_deg)},"
                f"{_fmt(self.trans_err_m)},{_fmt(self.spread_m)},{self.n_particles},"
                f"{self.wall_ms:.3f},{self.forward_passes}")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_png(img_uint8: np.ndarray, path: Path) -> None:
    Image.fromarray(img_uint8, mode="RGB").save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    """8-bit PNG -> float image in [0, 1]."""
    return dequantize_image(np.asarray(Image.open(path).convert("RGB")))


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.write_text("\n".join([header, *rows]) + "\n")


def _pose_errors(est: Pose, truth: Pose) -> tuple[float, float]:
    return (rotation_geodesic_deg(est.rotation, truth.rotation),
            float(np.linalg.norm(est.translation - truth.translation)))


def _snapshot_scenario(out_dir: Path, scenario_path: Path | None) -> None:
    if scenario_path is not None:
        shutil.copyfile(scenario_path, out_dir / "scenario.yaml")


def _make_local_spec(scn: Scenario, truth: Pose, rng: np.random.Generator) -> InitSpec:
    """Init center = truth perturbed by a random axis-angle rotation and a
    per-axis world translation offset; particles spread around it."""
    icfg = scn.init
    if icfg.offset_rot_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-np.radians(icfg.offset_rot_deg), np.radians(icfg.offset_rot_deg))
        rot = truth.rotation @ Rotation.from_axis_angle(axis, angle)
    else:
        rot = truth.rotation
    dt = (rng.uniform(-icfg.offset_trans, icfg.offset_trans, 3)
          if icfg.offset_trans > 0 else np.zeros(3))
    center = Pose(rot, truth.translation + dt)
    return InitSpec(InitMode.LOCAL, scn.filter.n_init, center=center,
                    rot_range=np.radians(icfg.rot_range_deg),
                    trans_range=icfg.trans_range)


def _make_global_spec(scn: Scenario, truth: Pose, rng: np.random.Generator) -> InitSpec:
    icfg = scn.init
    offset = (rng.uniform(-icfg.offset_trans, icfg.offset_trans, 3)
              if icfg.offset_trans > 0 else np.zeros(3))
    center = truth.translation + offset
    return InitSpec(InitMode.GLOBAL, scn.filter.n_init,
                    box_lo=center - icfg.half_extent, box_hi=center + icfg.half_extent,
                    yaw_range=np.radians(icfg.yaw_range_deg),
                    roll_pitch_range=np.radians(icfg.roll_pitch_range_deg))


def _anneal_config(scn: Scenario, initial_spread: float) -> AnnealConfig:
    f = scn.filter
    refine = f.alpha_refine.resolve(initial_spread)
    super_refine = f.alpha_super_refine.resolve(initial_spread)
    return AnnealConfig(sigma_r_init=f.sigma_r_init, sigma_t_init=f.sigma_t_init,
                        alpha_refine=refine, alpha_super_refine=super_refine,
                        n_init=f.n_init, n_reduced=f.n_reduced)


def run_static_benchmark(scn: Scenario, out_dir: str | Path, *, no_anneal: bool = False,
                         threads: int = 1, scenario_path: Path | None = None) -> dict:
    """Single-image / global-localization protocol: repeated update steps on one
    static image per trial (odometry = identity, motion = annealed noise)."""
    mode = scn.init.mode
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_scenario(out_dir, scenario_path)

    field = build_field(scn)
    traj = build_trajectory(scn)
    intr = scn.camera
    met = scn.metrics

    summary_rows: list[str] = []
    all_records: list[list[StepRecord]] = []
    success_steps: list[int] = []
    nonconverged = 0

    for trial in range(met.trials):
        trial_rng = streams.substream(scn.seed, streams.TRIAL, trial, 0)
        filter_seed = streams.derive_base(scn.seed, streams.TRIAL, trial, 1)
        truth_index = int(trial_rng.integers(len(traj)))
        truth = traj[truth_index].pose
        image = dequantize_image(quantize_image(render_image(
            field, truth, intr, scn.dataset_render,
            streams.substream(scn.seed, streams.IMAGE, trial))))

        if mode == "local":
            spec = _make_local_spec(scn, truth, trial_rng)
            pset = init_local(spec, streams.substream(scn.seed, streams.INIT, trial))
        else:
            spec = _make_global_spec(scn, truth, trial_rng)
            pset = init_global(spec, streams.substream(scn.seed, streams.INIT, trial))

        anneal_cfg = _anneal_config(scn, position_spread(pset))
        trace: list[StepTrace] = []
        ctx = FilterContext(field=field, intrinsics=intr, render_cfg=scn.render,
                            anneal_cfg=anneal_cfg, m_pixels=scn.filter.m_pixels,
                            seed=filter_seed, resampling=scn.filter.resampling,
                            updates_per_image=1, anneal_enabled=not no_anneal,
                            threads=threads, trace=trace)

        for _ in range(met.max_steps):
            try:
                pset, _, _ = step(pset, Pose.identity(), image, ctx)
            except NonConvergence:
                nonconverged += 1
                break

        records: list[StepRecord] = []
        success_step = -1
        cum_fp = 0
        updates = [t for t in trace if t.phase == "update"]
        for k, t in enumerate(updates):
            rot_err, trans_err = _pose_errors(t.estimate, truth)
            cum_fp += t.forward_passes
            records.append(StepRecord(k, k + 1, rot_err, trans_err, t.spread,
                                      t.n_particles, t.wall_ms, cum_fp))
            if success_step < 0 and rot_err < met.success_rot_deg and trans_err < met.success_trans_m:
                success_step = k
        all_records.append(records)
        success_steps.append(success_step)

        trial_dir = out_dir / f"trial_{trial:03d}"
        trial_dir.mkdir(exist_ok=True)
        _write_csv(trial_dir / "steps.csv", STEP_HEADER, [r.row() for r in records])
        final = records[-1]
        save_trajectory([TrajectorySample(0.0, updates[-1].estimate)], trial_dir / "estimate.txt")
        summary_rows.append(
            f"{trial},{filter_seed},{truth_index},{len(records)},"
            f"{int(success_step >= 0)},{success_step},{_fmt(final.rot_err_deg)},"
            f"{_fmt(final.trans_err_m)},{final.forward_passes}")

    _write_csv(out_dir / "summary.csv", BENCH_SUMMARY_HEADER, summary_rows)
    curves = compute_curves(all_records, success_steps)
    _write_csv(out_dir / "curves.csv", CURVES_HEADER, curves)

    finals_rot = [recs[-1].rot_err_deg for recs in all_records]
    finals_trans = [recs[-1].trans_err_m for recs in all_records]
    return {
        "mode": mode,
        "trials": met.trials,
        "success_ratio": float(np.mean([s >= 0 for s in success_steps])),
        "success_steps": success_steps,
        "final_rot_err_deg": finals_rot,
        "final_trans_err_m": finals_trans,
        "records": all_records,
        "nonconverged_steps": nonconverged,
        "out_dir": str(out_dir),
    }


def compute_curves(all_records: list[list[StepRecord]], success_steps: list[int]) -> list[str]:
    """Per-step mean error curves plus the cumulative success ratio."""
    n_steps = max(len(r) for r in all_records)
    rows = []
    for k in range(n_steps):
        rot = [r[min(k, len(r) - 1)].rot_err_deg for r in all_records]
        trans = [r[min(k, len(r) - 1)].trans_err_m for r in all_records]
        ratio = np.mean([0 <= s <= k for s in success_steps])
        rows.append(f"{k},{_fmt(float(np.mean(rot)))},{_fmt(float(np.mean(trans)))},{_fmt(float(ratio))}")
    return rows


def make_scene(scn: Scenario, out_dir: str | Path,
               scenario_path: Path | None = None) -> dict:
    """Bake the map, render ground-truth images along the trajectory, write everything."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_scenario(out_dir, scenario_path)
    field = build_field(scn)
    traj = build_trajectory(scn)
    if not traj:
        raise ConfigError("trajectory must contain at least one pose")

    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    for k, sample in enumerate(traj):
        img = render_image(field, sample.pose, scn.camera, scn.dataset_render,
                           streams.substream(scn.seed, streams.IMAGE, k))
        save_png(quantize_image(img), img_dir / f"frame_{k:04d}.png")
    save_trajectory(traj, out_dir / "trajectory.txt")

    from .fields import bake_voxels, save_voxels
    vox = bake_voxels(field, scn.bake_resolution)
    save_voxels(vox, out_dir / "scene.voxrf")

    manifest = {
        "seed": scn.seed,
        "frames": len(traj),
        "image_pattern": "images/frame_{:04d}.png",
        "trajectory": "trajectory.txt",
        "voxel_file": "scene.voxrf",
        "bake_resolution": list(scn.bake_resolution),
        "background": None if field.background is None else [float(v) for v in field.background],
    }
    import yaml
    (out_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    return manifest


def _load_dataset(scn: Scenario) -> tuple[list[TrajectorySample], list[np.ndarray]]:
    if not scn.dataset_dir:
        raise ConfigError("tracking requires dataset_dir pointing at a make-scene output")
    d = scn.base_dir / scn.dataset_dir
    traj = load_trajectory(d / "trajectory.txt")
    images = [load_png(d / "images" / f"frame_{k:04d}.png") for k in range(len(traj))]
    return traj, images


def run_track(scn: Scenario, out_dir: str | Path, *, no_anneal: bool = False,
              threads: int = 1, scenario_path: Path | None = None) -> dict:
    """Full filter loop over an image sequence with an odometry source.

    Per image the step CSV carries one post-prediction row (updates unchanged)
    followed by one row per update; the sawtooth lives in that pairing.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_scenario(out_dir, scenario_path)

    field = build_field(scn)
    traj, images = _load_dataset(scn)
    intr = scn.camera
    met = scn.metrics
    n_images = len(traj)

    summary_rows = []
    results = []
    for trial in range(met.trials):
        trial_rng = streams.substream(scn.seed, streams.TRIAL, trial, 0)
        filter_seed = streams.derive_base(scn.seed, streams.TRIAL, trial, 1)

        if scn.odometry.source == "perturbed_gt":
            segments = perturbed_gt_odometry(traj, scn.odometry.noise,
                                             streams.substream(scn.seed, streams.ODOMETRY, trial))
        elif scn.odometry.source == "file":
            segments = load_odometry(scn.base_dir / scn.odometry.file)
            if len(segments) < n_images - 1:
                raise ConfigError("odometry file has fewer segments than the trajectory")
        else:
            segments = None  # constant-velocity: derived from the filter's own estimates

        spec = _make_local_spec(scn, traj[0].pose, trial_rng)
        pset = init_local(spec, streams.substream(scn.seed, streams.INIT, trial))
        anneal_cfg = _anneal_config(scn, max(position_spread(pset), 1e-6))
        trace: list[StepTrace] = []
        ctx = FilterContext(field=field, intrinsics=intr, render_cfg=scn.render,
                            anneal_cfg=anneal_cfg, m_pixels=scn.filter.m_pixels,
                            seed=filter_seed, resampling=scn.filter.resampling,
                            updates_per_image=scn.filter.updates_per_image,
                            anneal_enabled=not no_anneal, threads=threads, trace=trace)

        estimates: list[Pose] = []
        records: list[StepRecord] = []
        post_pred_err: list[float] = []
        post_upd_err: list[float] = []
        cum_updates = 0
        cum_fp = 0
        for k in range(n_images):
            if k == 0:
                odom = Pose.identity()
            elif segments is not None:
                odom = segments[k - 1].relative
            elif len(estimates) >= 2:
                odom = constant_velocity_propagate(estimates[-1], estimates[-2])
            else:
                odom = Pose.identity()
            mark = len(trace)
            pset, est, _ = step(pset, odom, images[k], ctx)
            estimates.append(est)
            for t in trace[mark:]:
                rot_err, trans_err = _pose_errors(t.estimate, traj[k].pose)
                if t.phase == "predict":
                    records.append(StepRecord(k, cum_updates, rot_err, trans_err, t.spread,
                                              t.n_particles, t.wall_ms, cum_fp))
                    post_pred_err.append(trans_err)
                else:
                    cum_updates += 1
                    cum_fp += t.forward_passes
                    records.append(StepRecord(k, cum_updates, rot_err, trans_err, t.spread,
                                              t.n_particles, t.wall_ms, cum_fp))
            if ctx.updates_per_image > 0:
                post_upd_err.append(records[-1].trans_err_m)

        trial_dir = out_dir / f"trial_{trial:03d}"
        trial_dir.mkdir(exist_ok=True)
        _write_csv(trial_dir / "steps.csv", STEP_HEADER, [r.row() for r in records])
        save_trajectory([TrajectorySample(traj[k].timestamp, estimates[k])
                         for k in range(n_images)], trial_dir / "estimates.txt")

        final_rot, final_trans = _pose_errors(estimates[-1], traj[-1].pose)
        if segments is not None:
            open_loop = dead_reckon(traj[0].pose, segments)[-1]
            drift = float(np.linalg.norm(open_loop.translation - traj[-1].pose.translation))
        else:
            drift = float("nan")
        med_pred = float(np.median(post_pred_err)) if post_pred_err else float("nan")
        med_upd = float(np.median(post_upd_err)) if post_upd_err else float("nan")
        summary_rows.append(f"{trial},{filter_seed},{_fmt(final_rot)},{_fmt(final_trans)},"
                            f"{_fmt(drift)},{_fmt(med_pred)},{_fmt(med_upd)},{cum_fp}")
        results.append({"trial": trial, "final_rot_err_deg": final_rot,
                        "final_trans_err_m": final_trans, "odom_drift_m": drift,
                        "median_postpred_trans_m": med_pred,
                        "median_postupd_trans_m": med_upd,
                        "records": records, "estimates": estimates})

    _write_csv(out_dir / "summary.csv", TRACK_SUMMARY_HEADER, summary_rows)
    return {"trials": results, "out_dir": str(out_dir)}


def render_compare(scn: Scenario, run_dir: str | Path, out_dir: str | Path,
                   trial: int = 0) -> list[dict]:
    """Render images from a run's estimated poses next to the ground truth.

    Reuses the dataset image streams, so an estimate equal to the truth pose
    reproduces the dataset PNG bit for bit.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    est_path = run_dir / f"trial_{trial:03d}" / "estimates.txt"
    if not est_path.exists():
        raise FileNotFoundError(f"no estimates at {est_path}; run `track` first")
    estimates = load_trajectory(est_path)
    traj, images = _load_dataset(scn)
    if len(estimates) != len(traj):
        raise ConfigError("estimate count does not match the dataset trajectory")
    field = build_field(scn)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    results = []
    for k, est in enumerate(estimates):
        rendered = quantize_image(render_image(field, est.pose, scn.camera, scn.dataset_render,
                                               streams.substream(scn.seed, streams.IMAGE, k)))
        gt = quantize_image(images[k])
        pair = np.concatenate([gt, rendered], axis=1)
        save_png(pair, out_dir / f"pair_{k:04d}.png")
        mae = float(np.abs(gt.astype(float) - rendered.astype(float)).mean() / 255.0)
        rows.append(f"{k},{_fmt(mae)}")
        results.append({"frame": k, "mae": mae})
    _write_csv(out_dir / "mae.csv", "frame,mae", rows)
    return results
