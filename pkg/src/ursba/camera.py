"""Pinhole camera with a rolling-shutter per-row motion model.

The per-row pose is first order in the row readout time u:
    R(u) = (I + skew(omega * u)) @ R0,   t(u) = t0 + v * u
with u = row * readout (seconds). The rotation is deliberately NOT
re-orthonormalized: the optimizer and the epipolar test rely on this exact
linear form. With v = omega = 0 every row sees pose0 bitwise, which is the
global-shutter case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import Pose, skew_batch

# Camera-frame pixel directions are ((px-cx)/fx, (py-cy)/fy, 1), i.e. the
# image plane sits at unit depth. cone_sphere_radius is then called with
# focal parameter f = 1 and the pixel disc radius in plane units.
UNIT_PLANE_FOCAL = 1.0


@dataclass
class Intrinsics:
    """Pinhole intrinsics plus the per-row readout time in seconds."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    readout: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.readout < 0:
            raise ValueError("readout must be non-negative")

    @property
    def disc_radius(self) -> float:
        """Radius of the pixel-footprint disc on the unit-depth plane."""
        return float(np.sqrt((1.0 / self.fx) * (1.0 / self.fy) / np.pi))

    def pixel_dir(self, px, py) -> np.ndarray:
        """Camera-frame direction(s) through pixel centers, unnormalized."""
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        return np.stack(
            [(px - self.cx) / self.fx, (py - self.cy) / self.fy, np.ones_like(px)],
            axis=-1,
        )


@dataclass
class RsFrame:
    """Per-image motion unknowns: first-row pose, linear and angular velocity."""

    frame_id: int
    pose0: Pose
    v: np.ndarray = None
    omega: np.ndarray = None

    def __post_init__(self):
        self.v = np.zeros(3) if self.v is None else np.asarray(self.v, dtype=float).reshape(3)
        self.omega = (
            np.zeros(3) if self.omega is None else np.asarray(self.omega, dtype=float).reshape(3)
        )

    def copy(self) -> "RsFrame":
        return RsFrame(self.frame_id, self.pose0.copy(), self.v.copy(), self.omega.copy())

    def static_copy(self) -> "RsFrame":
        """Same first-row pose with zeroed velocities (global-shutter twin)."""
        return RsFrame(self.frame_id, self.pose0.copy(), np.zeros(3), np.zeros(3))


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    disc_radius: float


def row_time(intr: Intrinsics, row) -> np.ndarray:
    return np.asarray(row, dtype=float) * intr.readout


def row_pose(frame: RsFrame, intr: Intrinsics, row: float) -> Pose:
    """First-order pose of one image row; returns pose0 exactly when static."""
    u = float(row) * intr.readout
    R = (np.eye(3) + skew_batch(frame.omega * u)) @ frame.pose0.R
    t = frame.pose0.t + frame.v * u
    return Pose(R, t)


def row_rotations(frame: RsFrame, u: np.ndarray) -> np.ndarray:
    """Batched (I + skew(omega*u)) @ R0 for row times u: (n,) -> (n, 3, 3)."""
    S = skew_batch(frame.omega[None, :] * u[:, None])
    return (np.eye(3)[None] + S) @ frame.pose0.R[None]


def pixel_ray(frame: RsFrame, intr: Intrinsics, px: float, py: float) -> Ray:
    """World-space ray through one pixel center under the row-pose model."""
    pose = row_pose(frame, intr, py)
    d_cam = intr.pixel_dir(px, py)
    return Ray(origin=pose.t.copy(), dir=pose.R @ d_cam, disc_radius=intr.disc_radius)


def cone_sphere_radius(t, d, f: float, r_dot: float):
    """Radius of the sphere inscribed in the pixel cone at distance t along d.

    The cone apex is the camera center, its half-width at the image plane is
    the pixel disc radius r_dot, and f is the focal distance of that plane.
    """
    d = np.asarray(d, dtype=float)
    dnorm = np.linalg.norm(d, axis=-1)
    if np.any(dnorm < f * (1.0 - 1e-12)):
        raise ValueError("direction norm must be >= focal length")
    radial = np.sqrt(np.maximum(dnorm * dnorm - f * f, 0.0))
    denom = np.sqrt((radial - r_dot) ** 2 + f * f)
    return np.asarray(t, dtype=float) * f * r_dot / denom


def project_pinhole(intr: Intrinsics, x_cam: np.ndarray):
    """Camera-frame points -> pixel coordinates and depths. (n,3) in."""
    z = x_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intr.fx * x_cam[..., 0] / z + intr.cx
        py = intr.fy * x_cam[..., 1] / z + intr.cy
    return px, py, z


def in_bounds(intr: Intrinsics, px, py) -> np.ndarray:
    return (
        (px >= -0.5) & (px < intr.width - 0.5) & (py >= -0.5) & (py < intr.height - 0.5)
    )


def rs_project_points(
    frame: RsFrame,
    intr: Intrinsics,
    X: np.ndarray,
    max_iters: int = 50,
    tol: float = 1e-6,
):
    """Project world points into a rolling-shutter frame.

    Fixed-point iteration on the row coordinate: start from the global-shutter
    projection at pose0, then re-project with the pose of the current row
    estimate until the row moves by less than `tol`. Returns (px, py, valid);
    valid is False where the iteration failed to converge, depth was
    non-positive, or the pixel landed outside the image.

    Uses the exact inverse of the (non-orthonormal) first-order row rotation,
    so converged projections are exactly consistent with the forward model.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    n = X.shape[0]

    R0, t0 = frame.pose0.R, frame.pose0.t
    x_cam = (X - t0) @ R0  # R0^T (X - t0), orthonormal pose0
    px, py, z = project_pinhole(intr, x_cam)
    valid = z > 1e-9
    py = np.where(valid, py, 0.0)

    converged = np.zeros(n, dtype=bool)
    for _ in range(max_iters):
        active = valid & ~converged
        if not np.any(active):
            break
        u = py[active] * intr.readout
        R = row_rotations(frame, u)
        t = t0[None, :] + frame.v[None, :] * u[:, None]
        x_cam = np.linalg.solve(R, (X[active] - t)[..., None])[..., 0]
        z = x_cam[:, 2]
        ok = z > 1e-9
        npx, npy, _ = project_pinhole(intr, x_cam)
        step = np.abs(npy - py[active])
        px[active] = np.where(ok, npx, px[active])
        py[active] = np.where(ok, npy, py[active])
        idx = np.flatnonzero(active)
        valid[idx[~ok]] = False
        converged[idx[ok & (step < tol)]] = True

    # one consistency pass with the pose of the solved row
    good = valid & converged
    if np.any(good):
        u = py[good] * intr.readout
        R = row_rotations(frame, u)
        t = t0[None, :] + frame.v[None, :] * u[:, None]
        x_cam = np.linalg.solve(R, (X[good] - t)[..., None])[..., 0]
        npx, npy, z = project_pinhole(intr, x_cam)
        px[good] = npx
        py[good] = npy
        valid[np.flatnonzero(good)[z <= 1e-9]] = False

    valid &= converged & in_bounds(intr, px, py)
    if single:
        return px[0], py[0], bool(valid[0])
    return px, py, valid


def rs_project(frame: RsFrame, intr: Intrinsics, X):
    """Single-point rolling-shutter projection; None if it fails."""
    px, py, ok = rs_project_points(frame, intr, np.asarray(X, dtype=float))
    return (float(px), float(py)) if ok else None
