"""Minimal SO(3)/SE(3)/Sim(3) toolkit: skew operators, exp/log maps, transforms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


class InvalidRotationError(ValueError):
    """Raised when a matrix expected to be a rotation is not one."""


def skew(w) -> np.ndarray:
    """Cross-product matrix: skew(w) @ x == cross(w, x)."""
    w = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def skew_batch(w: np.ndarray) -> np.ndarray:
    """Batched skew: (..., 3) -> (..., 3, 3)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula with 2nd-order Taylor fallback for tiny angles."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _check_rotation(R: np.ndarray, tol: float = 1e-6) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation must be a finite 3x3 matrix")
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol or np.linalg.det(R) < 0.0:
        raise InvalidRotationError(f"matrix is not a rotation (orthonormality error {err:.3e})")


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> axis-angle vector, valid for angles < pi."""
    R = np.asarray(R, dtype=float)
    _check_rotation(R)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        # w = sin(theta)*axis; theta/sin(theta) ~ 1 + theta^2/6
        return w * (1.0 + theta * theta / 6.0)
    if theta > np.pi - 1e-5:
        # near pi the off-diagonal difference vanishes; recover axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        if axis[k] <= 0.0:
            raise InvalidRotationError("degenerate rotation near pi")
        for i in range(3):
            if i != k and A[k, i] < 0.0:
                axis[i] = -axis[i]
        axis = axis / np.linalg.norm(axis)
        # sign of axis is ambiguous at exactly pi; pick the one matching w
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return theta * axis
    return w * (theta / np.sin(theta))


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * K + b * (K @ K)


@dataclass
class Pose:
    """Rigid transform: x_world = R @ x + t. No validation on construction."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


@dataclass
class Twist:
    """se(3) coordinates: rho (translational) and phi (rotational, radians)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).reshape(3)
        self.phi = np.asarray(self.phi, dtype=float).reshape(3)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])


def se3_exp(t: Twist) -> Pose:
    R = so3_exp(t.phi)
    V = _left_jacobian(t.phi)
    return Pose(R, V @ t.rho)


def se3_log(p: Pose) -> Twist:
    phi = so3_log(p.R)
    V = _left_jacobian(phi)
    rho = np.linalg.solve(V, p.t)
    return Twist(rho, phi)


def transform_point(p: Pose, x) -> np.ndarray:
    return p.transform(x)


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos_theta = np.clip((np.trace(Ra.T @ Rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos_theta)))


def slerp(Ra: np.ndarray, Rb: np.ndarray, alpha: float) -> np.ndarray:
    """Geodesic interpolation between rotations, alpha in [0, 1]."""
    return Ra @ so3_exp(alpha * so3_log(Ra.T @ Rb))


@dataclass
class Sim3:
    """Similarity transform: x -> scale * R @ x + t."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError("Sim3 scale must be positive")
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(1.0, np.eye(3), np.zeros(3))

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.scale * (x @ self.R.T) + self.t


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> quaternion (qx, qy, qz, qw), Shepperd's method."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    return q / np.linalg.norm(q)


def quat_to_rotation(q) -> np.ndarray:
    """Quaternion (qx, qy, qz, qw) -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix by polar decomposition (synthesis-side only)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt
