"""SO(3)/SE(3) types, exponential/log maps, noise sampling, and rotation averaging.

Twist layout is rotation-first: delta = (rot, trans), matching the noise
covariance diag(sigma_r^2 I3, sigma_t^2 I3) used by the prediction step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi, NonConvergence

# Below this angle the Rodrigues/V coefficients use 4th-order series; the
# series is exact to double precision there, while the closed forms lose up
# to half their digits to cancellation in (1 - cos) and (1 - a/2b).
_SMALL_ANGLE = 1e-2
# Compositions between orthonormality re-projections (polar decomposition).
_REPROJECT_EVERY = 1000


def _hat(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """(sin t / t, (1-cos t)/t^2, (t-sin t)/t^3) with 4th-order Taylor near zero."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return (1.0 - t2 / 6.0 + t4 / 120.0,
                0.5 - t2 / 24.0 + t4 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0)
    s = np.sin(theta)
    t2 = theta * theta
    half = np.sin(0.5 * theta)
    # (1 - cos t)/t^2 written as 2 sin^2(t/2)/t^2: no cancellation
    return s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta)


def _vinv_coeff(theta: float) -> float:
    """Coefficient of W^2 in V^-1 = I - W/2 + d W^2."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    a, b, _ = _rodrigues_coeffs(theta)
    return (1.0 - a / (2.0 * b)) / (theta * theta)


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    a, b, _ = _rodrigues_coeffs(theta)
    hat = _hat(w)
    return np.eye(3) + a * hat + b * (hat @ hat)


def _v_matrix(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    _, b, c = _rodrigues_coeffs(theta)
    hat = _hat(w)
    return np.eye(3) + b * hat + c * (hat @ hat)


def _v_inverse(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    hat = _hat(w)
    return np.eye(3) - 0.5 * hat + _vinv_coeff(theta) * (hat @ hat)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) -> unit quaternions (..., 4) as (qx, qy, qz, qw), qw >= 0."""
    m = np.asarray(m, dtype=float)
    single = m.ndim == 2
    if single:
        m = m[None]
    n = m.shape[0]
    q = np.empty((n, 4))
    # Shepperd's method: branch on the largest of (trace, m00, m11, m22).
    trace = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    choice = np.argmax(np.stack([trace, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=0), axis=0)

    idx = choice == 0
    if np.any(idx):
        s = np.sqrt(trace[idx] + 1.0) * 2.0
        q[idx, 3] = 0.25 * s
        q[idx, 0] = (m[idx, 2, 1] - m[idx, 1, 2]) / s
        q[idx, 1] = (m[idx, 0, 2] - m[idx, 2, 0]) / s
        q[idx, 2] = (m[idx, 1, 0] - m[idx, 0, 1]) / s
    for axis, (j, k) in ((0, (1, 2)), (1, (2, 0)), (2, (0, 1))):
        idx = choice == axis + 1
        if not np.any(idx):
            continue
        s = np.sqrt(1.0 + m[idx, axis, axis] - m[idx, j, j] - m[idx, k, k]) * 2.0
        q[idx, axis] = 0.25 * s
        q[idx, 3] = (m[idx, k, j] - m[idx, j, k]) / s
        q[idx, j] = (m[idx, j, axis] + m[idx, axis, j]) / s
        q[idx, k] = (m[idx, k, axis] + m[idx, axis, k]) / s

    neg = q[:, 3] < 0
    q[neg] *= -1.0
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q[0] if single else q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) as (qx, qy, qz, qw) -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    if single:
        q = q[None]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - z * w)
    m[:, 0, 2] = 2 * (x * z + y * w)
    m[:, 1, 0] = 2 * (x * y + z * w)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - x * w)
    m[:, 2, 0] = 2 * (x * z - y * w)
    m[:, 2, 1] = 2 * (y * z + x * w)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def _so3_log_batch(m: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) for rotations (..., 3, 3); angle in [0, pi].

    Goes through quaternions, so it is stable at all angles including near pi
    (where the returned axis of a 180-degree rotation is a deterministic choice).
    """
    m = np.asarray(m, dtype=float)
    single = m.ndim == 2
    q = matrix_to_quat(m[None] if single else m)
    vec, w = q[:, :3], q[:, 3]
    n = np.linalg.norm(vec, axis=1)
    theta = 2.0 * np.arctan2(n, w)
    # theta / n, with the series 2/w (1 - n^2/(3 w^2)) for tiny n.
    safe_n = np.where(n < 1e-9, 1.0, n)
    scale = np.where(n < 1e-9, 2.0 / np.maximum(w, 1e-12) * (1.0 - n * n / 3.0), theta / safe_n)
    out = vec * scale[:, None]
    return out[0] if single else out


def _so3_log(m: np.ndarray) -> np.ndarray:
    return _so3_log_batch(m[None])[0]


def _exp_so3_batch(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for rotation vectors (n, 3) -> (n, 3, 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=1)
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    half = np.sin(0.5 * safe)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * half * half / (safe * safe))
    n = w.shape[0]
    hat = np.zeros((n, 3, 3))
    hat[:, 0, 1] = -w[:, 2]
    hat[:, 0, 2] = w[:, 1]
    hat[:, 1, 0] = w[:, 2]
    hat[:, 1, 2] = -w[:, 0]
    hat[:, 2, 0] = -w[:, 1]
    hat[:, 2, 1] = w[:, 0]
    hat2 = hat @ hat
    return np.eye(3)[None] + a[:, None, None] * hat + b[:, None, None] * hat2


def exp_se3_batch(rot: np.ndarray, trans: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched SE(3) exponential: twists (n, 3)+(n, 3) -> rotations (n, 3, 3), translations (n, 3)."""
    rot = np.asarray(rot, dtype=float)
    trans = np.asarray(trans, dtype=float)
    theta = np.linalg.norm(rot, axis=1)
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    half = np.sin(0.5 * safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * half * half / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (safe - np.sin(safe)) / (safe * safe * safe))
    r = _exp_so3_batch(rot)
    n = rot.shape[0]
    hat = np.zeros((n, 3, 3))
    hat[:, 0, 1] = -rot[:, 2]
    hat[:, 0, 2] = rot[:, 1]
    hat[:, 1, 0] = rot[:, 2]
    hat[:, 1, 2] = -rot[:, 0]
    hat[:, 2, 0] = -rot[:, 1]
    hat[:, 2, 1] = rot[:, 0]
    v = np.eye(3)[None] + b[:, None, None] * hat + c[:, None, None] * (hat @ hat)
    return r, np.einsum("nij,nj->ni", v, trans)


class Rotation:
    """A 3x3 rotation matrix.

    Immutable.  Long composition chains are re-projected onto SO(3) via polar
    decomposition every _REPROJECT_EVERY products to bound numerical drift.
    """

    __slots__ = ("_m", "_age")

    def __init__(self, matrix: np.ndarray, *, check: bool = True, _age: int = 0):
        m = np.array(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if check:
            err = np.linalg.norm(m.T @ m - np.eye(3))
            if err > 1e-6 or abs(np.linalg.det(m) - 1.0) > 1e-6:
                raise ValueError(f"matrix is not a rotation (orthonormality error {err:.2e})")
        m.setflags(write=False)
        self._m = m
        self._age = _age

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3), check=False)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Rotation":
        return cls(matrix)

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValueError("axis must be nonzero")
        return cls(_so3_exp(axis / norm * angle), check=False)

    @classmethod
    def about_x(cls, angle: float) -> "Rotation":
        return cls.from_axis_angle(np.array([1.0, 0.0, 0.0]), angle)

    @classmethod
    def about_y(cls, angle: float) -> "Rotation":
        return cls.from_axis_angle(np.array([0.0, 1.0, 0.0]), angle)

    @classmethod
    def about_z(cls, angle: float) -> "Rotation":
        return cls.from_axis_angle(np.array([0.0, 0.0, 1.0]), angle)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        m = self._m @ other._m
        age = self._age + other._age + 1
        if age >= _REPROJECT_EVERY:
            u, _, vt = np.linalg.svd(m)
            m = u @ vt
            age = 0
        return Rotation(m, check=False, _age=age)

    def inverse(self) -> "Rotation":
        return Rotation(self._m.T, check=False, _age=self._age)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        """Rotate a single (3,) vector or an (n, 3) stack."""
        vec = np.asarray(vec, dtype=float)
        if vec.ndim == 1:
            return self._m @ vec
        return vec @ self._m.T

    def allclose(self, other: "Rotation", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self._m, other._m, atol=atol))

    def __repr__(self) -> str:
        return f"Rotation({np.array2string(self._m, precision=6)})"


class Pose:
    """Rigid transform: rotation plus translation in meters."""

    __slots__ = ("_rotation", "_translation")

    def __init__(self, rotation: Rotation, translation: np.ndarray):
        t = np.array(translation, dtype=float).reshape(3)
        t.setflags(write=False)
        self._rotation = rotation
        self._translation = t

    @property
    def rotation(self) -> Rotation:
        return self._rotation

    @property
    def translation(self) -> np.ndarray:
        return self._translation

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        return cls(Rotation(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self._rotation.matrix
        m[:3, 3] = self._translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self._rotation @ other._rotation,
                    self._rotation.apply(other._translation) + self._translation)

    def inverse(self) -> "Pose":
        rinv = self._rotation.inverse()
        return Pose(rinv, -rinv.apply(self._translation))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self._rotation.apply(pts) + self._translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (self._rotation.allclose(other._rotation, atol=atol)
                and bool(np.allclose(self._translation, other._translation, atol=atol)))

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self._translation, precision=6)})"


@dataclass(frozen=True)
class Twist:
    """Tangent-space element: axis-angle rotation part (rad) and translation part (m)."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.array(self.rot, dtype=float).reshape(3))
        object.__setattr__(self, "trans", np.array(self.trans, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.rot)) and np.all(np.isfinite(self.trans))):
            raise ValueError("twist entries must be finite")

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True)
class NoiseParams:
    """Isotropic zero-mean Gaussian noise std-devs: sigma_r (rad), sigma_t (m)."""

    sigma_r: float
    sigma_t: float

    def __post_init__(self):
        if self.sigma_r < 0 or self.sigma_t < 0:
            raise ValueError("noise std-devs must be non-negative")


def exp_map(delta: Twist) -> Pose:
    """SE(3) exponential: Rodrigues rotation plus V-matrix translation coupling."""
    r = _so3_exp(delta.rot)
    t = _v_matrix(delta.rot) @ delta.trans
    return Pose(Rotation(r, check=False), t)


def log_map(pose: Pose) -> Twist:
    """Inverse of exp_map on the canonical branch (rotation angle < pi).

    Raises AngleNearPi when the rotation angle is within 1e-6 of pi, where the
    log is not unique.
    """
    w = _so3_log(pose.rotation.matrix)
    if np.linalg.norm(w) > np.pi - 1e-6:
        raise AngleNearPi("rotation angle within 1e-6 of pi")
    rho = _v_inverse(w) @ pose.translation
    return Twist(w, rho)


def sample_noise(params: NoiseParams, rng: np.random.Generator) -> Twist:
    """One zero-mean Gaussian twist draw; rotation components first."""
    rot = rng.normal(0.0, params.sigma_r, 3) if params.sigma_r > 0 else np.zeros(3)
    trans = rng.normal(0.0, params.sigma_t, 3) if params.sigma_t > 0 else np.zeros(3)
    return Twist(rot, trans)


def sample_noise_batch(params: NoiseParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """n noise twists as (rot (n,3), trans (n,3)); rotation block drawn first."""
    rot = rng.normal(0.0, params.sigma_r, (n, 3)) if params.sigma_r > 0 else np.zeros((n, 3))
    trans = rng.normal(0.0, params.sigma_t, (n, 3)) if params.sigma_t > 0 else np.zeros((n, 3))
    return rot, trans


def rotation_geodesic_deg(a: Rotation, b: Rotation) -> float:
    """Geodesic angle between two rotations, in degrees, clamped to [0, 180]."""
    c = (np.trace(a.matrix.T @ b.matrix) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_average(rotations: list[Rotation], weights: np.ndarray) -> Rotation:
    """Weighted geodesic-L2 mean (Karcher mean) by iterative tangent-space averaging.

    Starts from the highest-weight rotation; iterates R <- R exp(sum_i w_i log(R^T R_i))
    until the update norm drops below 1e-10, at most 100 iterations.  Raises
    NonConvergence if the cap is hit with update norm still above 1e-6.
    """
    if len(rotations) == 0:
        raise ValueError("need at least one rotation")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(rotations),):
        raise ValueError("weights must match rotations")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("weights must be non-negative and sum to 1")

    mats = np.stack([r.matrix for r in rotations])
    r = mats[int(np.argmax(w))].copy()
    update = np.inf
    for _ in range(100):
        logs = _so3_log_batch(np.einsum("ji,njk->nik", r, mats))
        mean = w @ logs
        update = float(np.linalg.norm(mean))
        r = r @ _so3_exp(mean)
        if update < 1e-10:
            return Rotation(r, check=False)
    if update > 1e-6:
        raise NonConvergence(f"rotation averaging stalled with update norm {update:.2e}")
    return Rotation(r, check=False)
