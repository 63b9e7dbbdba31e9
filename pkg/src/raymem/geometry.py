"""Rigid-body math: SE(3) poses, unit rays, exp/log maps and closed-form alignment.

Rotations are held as unit quaternions in ``(x, y, z, w)`` order, matching the
TUM and g2o text formats. Twists are ordered ``(rho, phi)``: translational part
first, rotational part second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateCorrespondenceError, GeometryError, LogSingularityError

LOG_SINGULARITY_MARGIN = 1e-6
_SMALL_ANGLE = 1e-5


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def unit(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return ``v`` normalized to unit length.

    Raises GeometryError for zero-length or non-finite input.
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not math.isfinite(n) or n == 0.0:
        raise GeometryError(f"cannot normalize vector {v.tolist()}")
    return v / n


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if not math.isfinite(n) or n == 0.0:
        raise GeometryError("invalid quaternion")
    # leave already-unit input untouched so text round trips are exact
    if abs(n - 1.0) > 1e-12:
        q = q / n
    return -q if q[3] < 0.0 else q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
            [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
            [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; the input is projected onto SO(3) first."""
    R = np.asarray(R, dtype=np.float64)
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return _canonical(np.array(q))


def rotvec_to_quat(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    if theta < _SMALL_ANGLE:
        # sin(x/2)/x series
        k = 0.5 - theta * theta / 48.0
        return _canonical(np.array([*(k * phi), math.cos(0.5 * theta)]))
    k = math.sin(0.5 * theta) / theta
    return _canonical(np.array([*(k * phi), math.cos(0.5 * theta)]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    v = np.asarray(q[:3], dtype=np.float64)
    w = float(q[3])
    s = float(np.linalg.norm(v))
    theta = 2.0 * math.atan2(s, w)
    if s < 1e-12:
        return 2.0 * v / w
    return (theta / s) * v


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t. Immutable."""

    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _frozen(_canonical(self.quat)))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("non-finite translation")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Sequence[float] = (0.0, 0.0, 0.0)) -> Pose:
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def trans(cls, x: float, y: float, z: float) -> Pose:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def rot_z(cls, angle: float, t: Sequence[float] = (0.0, 0.0, 0.0)) -> Pose:
        return cls(np.array([0.0, 0.0, math.sin(0.5 * angle), math.cos(0.5 * angle)]), np.asarray(t, float))

    @classmethod
    def from_tum(cls, values: Sequence[float]) -> Pose:
        """Build from ``tx ty tz qx qy qz qw``."""
        v = [float(x) for x in values]
        if len(v) != 7:
            raise GeometryError(f"expected 7 pose values, got {len(v)}")
        return cls(np.array(v[3:]), np.array(v[:3]))

    def to_tum(self) -> list[float]:
        return [*self.translation.tolist(), *self.quat.tolist()]

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def yaw(self) -> float:
        R = self.rotation
        return math.atan2(R[1, 0], R[0, 0])

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.quat[:3])), abs(float(self.quat[3])))

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def inverse(self) -> Pose:
        return inverse(self)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return transform_point(self, x)

    def isclose(self, other: Pose, atol: float = 1e-9) -> bool:
        dq = min(np.abs(self.quat - other.quat).max(), np.abs(self.quat + other.quat).max())
        return bool(dq <= atol and np.abs(self.translation - other.translation).max() <= atol)

    def __repr__(self) -> str:
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        return f"Pose(t=[{t}], q=[{q}])"


@dataclass(frozen=True, eq=False)
class Twist:
    """se(3) tangent coordinates."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", _frozen(np.asarray(self.rho, float).reshape(3)))
        object.__setattr__(self, "phi", _frozen(np.asarray(self.phi, float).reshape(3)))
        if not (np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.phi))):
            raise GeometryError("non-finite twist")

    @classmethod
    def from_vector(cls, xi: Sequence[float]) -> Twist:
        xi = np.asarray(xi, dtype=np.float64)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


def compose(a: Pose, b: Pose) -> Pose:
    """a∘b: apply b first, then a."""
    q = _qmul(a.quat, b.quat)
    t = a.rotation @ b.translation + a.translation
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    qi = np.array([-p.quat[0], -p.quat[1], -p.quat[2], p.quat[3]])
    Ri = quat_to_matrix(qi)
    return Pose(qi, -(Ri @ p.translation))


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    """R x + t for a single point (3,) or an array of points (N, 3)."""
    x = np.asarray(x, dtype=np.float64)
    return x @ p.rotation.T + p.translation


def rotate_dir(p: Pose, r: np.ndarray) -> np.ndarray:
    """R r, renormalized so the result stays unit length."""
    r = np.asarray(r, dtype=np.float64) @ p.rotation.T
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    return r / n


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    W = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return np.eye(3) + (1 - math.cos(theta)) / t2 * W + (theta - math.sin(theta)) / (t2 * theta) * W @ W


def _left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    W = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    t2 = theta * theta
    c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / t2
    return np.eye(3) - 0.5 * W + c * W @ W


def log_map(p: Pose) -> Twist:
    angle = p.angle()
    if angle >= math.pi - LOG_SINGULARITY_MARGIN:
        raise LogSingularityError(angle)
    phi = quat_to_rotvec(p.quat)
    rho = _left_jacobian_inv(phi) @ p.translation
    return Twist(rho, phi)


def exp_map(t: Twist) -> Pose:
    return Pose(rotvec_to_quat(t.phi), _left_jacobian(t.phi) @ t.rho)


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint for (rho, phi) ordering."""
    R = p.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = hat(p.translation) @ R
    A[3:, 3:] = R
    return A


def rigid_align(src: Sequence | np.ndarray, dst: Sequence | np.ndarray) -> Pose:
    """Least-squares rigid transform P minimizing sum ||P src_i - dst_i||^2.

    Uses the SVD of the cross-covariance with a determinant sign fix. No scale.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateCorrespondenceError(f"length mismatch {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateCorrespondenceError(f"{len(src)} points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    if S[0] == 0.0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateCorrespondenceError("rank-deficient cross-covariance")
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_d - R @ mu_s
    return Pose.from_rt(R, t)
