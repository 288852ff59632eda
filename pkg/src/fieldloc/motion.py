"""Relative-motion sources for the prediction step.

Trajectory text format, one sample per line:

    timestamp tx ty tz qx qy qz qw

Odometry files use the same line format read as relative poses
(body_{t-1}-from-body_t); the first line is a timestamp anchor whose pose
must be identity, and segment k takes its dt from consecutive timestamps.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonMonotonicTimestamps, ParseError, TooShort
from .se3 import (NoiseParams, Pose, Rotation, exp_map, matrix_to_quat,
                  quat_to_matrix, sample_noise)


@dataclass(frozen=True)
class TrajectorySample:
    timestamp: float
    pose: Pose  # world-from-body


@dataclass(frozen=True)
class OdometrySegment:
    relative: Pose  # body_{t-1}-from-body_t
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("segment dt must be positive")


def perturbed_gt_odometry(traj: list[TrajectorySample], noise: NoiseParams,
                          rng: np.random.Generator) -> list[OdometrySegment]:
    """Relative poses X_{t-1}^-1 X_t, each right-perturbed by a sampled noise twist."""
    if len(traj) < 2:
        raise TooShort("need at least two trajectory samples")
    segments = []
    for prev, cur in zip(traj[:-1], traj[1:]):
        rel = prev.pose.inverse() @ cur.pose
        rel = rel @ exp_map(sample_noise(noise, rng))
        segments.append(OdometrySegment(rel, cur.timestamp - prev.timestamp))
    return segments


def constant_velocity_propagate(prev: Pose, prev2: Pose) -> Pose:
    """Predicted next relative motion assuming the last body-frame twist repeats."""
    return prev2.inverse() @ prev


def dead_reckon(start: Pose, segments: list[OdometrySegment]) -> list[Pose]:
    """Open-loop pose chain: start, start*rel_1, start*rel_1*rel_2, ..."""
    poses = [start]
    for seg in segments:
        poses.append(poses[-1] @ seg.relative)
    return poses


def _parse_pose_line(line: str, lineno: int) -> tuple[float, Pose]:
    parts = line.split()
    if len(parts) != 8:
        raise ParseError(f"expected 8 fields, got {len(parts)}", lineno)
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from exc
    ts, tx, ty, tz, qx, qy, qz, qw = vals
    qn = np.linalg.norm([qx, qy, qz, qw])
    if abs(qn - 1.0) > 1e-6:
        raise ParseError(f"quaternion norm {qn:.6f} != 1", lineno)
    rot = Rotation(quat_to_matrix(np.array([qx, qy, qz, qw])), check=False)
    return ts, Pose(rot, np.array([tx, ty, tz]))


def _read_pose_lines(path: str | Path) -> list[tuple[float, Pose]]:
    rows = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(_parse_pose_line(line, lineno))
    if not rows:
        raise ParseError(f"{path}: no pose lines")
    ts = [r[0] for r in rows]
    if any(b <= a for a, b in zip(ts[:-1], ts[1:])):
        raise NonMonotonicTimestamps(f"{path}: timestamps must be strictly increasing")
    return rows


def _pose_line(ts: float, pose: Pose) -> str:
    q = matrix_to_quat(pose.rotation.matrix)
    t = pose.translation
    fields = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
    return " ".join(f"{v:.12f}" for v in fields)


def load_trajectory(path: str | Path) -> list[TrajectorySample]:
    return [TrajectorySample(ts, pose) for ts, pose in _read_pose_lines(path)]


def save_trajectory(traj: list[TrajectorySample], path: str | Path) -> None:
    with open(path, "w") as f:
        for s in traj:
            f.write(_pose_line(s.timestamp, s.pose) + "\n")


def load_odometry(path: str | Path) -> list[OdometrySegment]:
    rows = _read_pose_lines(path)
    if len(rows) < 2:
        raise TooShort(f"{path}: need an anchor line plus at least one segment")
    if not rows[0][1].allclose(Pose.identity(), atol=1e-9):
        raise ParseError(f"{path}: first line is the timestamp anchor and must carry an identity pose")
    return [OdometrySegment(pose, ts - prev_ts)
            for (prev_ts, _), (ts, pose) in zip(rows[:-1], rows[1:])]


def save_odometry(segments: list[OdometrySegment], path: str | Path,
                  t0: float = 0.0) -> None:
    with open(path, "w") as f:
        f.write(_pose_line(t0, Pose.identity()) + "\n")
        ts = t0
        for seg in segments:
            ts += seg.dt
            f.write(_pose_line(ts, seg.relative) + "\n")
