"""Trajectory and image metrics: Sim(3)-aligned ATE, PSNR, SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .lie import Pose, Sim3, rotation_angle_deg

PSNR_CAP_DB = 99.0


class DegenerateTrajectoryError(ValueError):
    """Trajectory geometry too degenerate for similarity alignment."""


@dataclass
class Trajectory:
    """Ordered (frame id, pose) list; ids must be unique."""

    poses: list  # list of (id, Pose)

    def __post_init__(self):
        ids = [fid for fid, _ in self.poses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate frame ids in trajectory")

    def ids(self) -> list:
        return [fid for fid, _ in self.poses]

    def positions(self) -> np.ndarray:
        return np.array([p.t for _, p in self.poses])

    def rotations(self) -> np.ndarray:
        return np.array([p.R for _, p in self.poses])

    def sorted_by_id(self) -> "Trajectory":
        return Trajectory(sorted(self.poses, key=lambda ip: ip[0]))


@dataclass
class AteReport:
    trans_rmse: float
    rot_rmse_deg: float
    per_frame_trans: np.ndarray
    per_frame_rot_deg: np.ndarray
    sim3: Sim3


def _paired(est: Trajectory, gt: Trajectory):
    if set(est.ids()) != set(gt.ids()):
        raise ValueError("trajectories must share the same frame id set")
    est_s, gt_s = est.sorted_by_id(), gt.sorted_by_id()
    return est_s, gt_s


def sim3_align(est: Trajectory, gt: Trajectory) -> Sim3:
    """Closed-form similarity minimizing sum |s R p_est + t - p_gt|^2 (Umeyama)."""
    est_s, gt_s = _paired(est, gt)
    P = est_s.positions()
    Q = gt_s.positions()
    if P.shape[0] < 3:
        raise DegenerateTrajectoryError("need at least 3 poses to align")
    mu_p = P.mean(axis=0)
    mu_q = Q.mean(axis=0)
    Pc = P - mu_p
    Qc = Q - mu_q
    var_p = (Pc ** 2).sum() / P.shape[0]
    cov = Qc.T @ Pc / P.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    if var_p < 1e-15 or D[1] < 1e-12 * max(D[0], 1e-300):
        raise DegenerateTrajectoryError("positions are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_p)
    if s <= 0:
        raise DegenerateTrajectoryError("non-positive fitted scale")
    t = mu_q - s * R @ mu_p
    return Sim3(s, R, t)


def ate_rmse(est: Trajectory, gt: Trajectory) -> AteReport:
    """Align est to gt with a Sim(3), then RMSE of residual translations/rotations."""
    sim3 = sim3_align(est, gt)
    est_s, gt_s = _paired(est, gt)
    aligned_pos = sim3.apply(est_s.positions())
    d_trans = np.linalg.norm(aligned_pos - gt_s.positions(), axis=1)
    d_rot = np.array([
        rotation_angle_deg(gt_rot, sim3.R @ est_rot)
        for est_rot, gt_rot in zip(est_s.rotations(), gt_s.rotations())
    ])
    return AteReport(
        trans_rmse=float(np.sqrt(np.mean(d_trans ** 2))),
        rot_rmse_deg=float(np.sqrt(np.mean(d_rot ** 2))),
        per_frame_trans=d_trans,
        per_frame_rot_deg=d_rot,
        sim3=sim3,
    )


def _check_images(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio on [0,1] images, capped at 99 dB."""
    a, b = _check_images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on [0,1] images.

    Color images are averaged over channels.
    """
    a, b = _check_images(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], k1, k2) for c in range(a.shape[2])]))
    win = _gaussian_window()
    c1 = k1 ** 2
    c2 = k2 ** 2
    mu_a = convolve(a, win, mode="reflect")
    mu_b = convolve(b, win, mode="reflect")
    var_a = convolve(a * a, win, mode="reflect") - mu_a ** 2
    var_b = convolve(b * b, win, mode="reflect") - mu_b ** 2
    cov = convolve(a * b, win, mode="reflect") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_structure(a: np.ndarray, b: np.ndarray, k2: float = 0.03) -> float:
    """Mean of the structure/contrast term alone (used by fixtures)."""
    a, b = _check_images(a, b)
    win = _gaussian_window()
    c2 = k2 ** 2
    mu_a = convolve(a, win, mode="reflect")
    mu_b = convolve(b, win, mode="reflect")
    var_a = convolve(a * a, win, mode="reflect") - mu_a ** 2
    var_b = convolve(b * b, win, mode="reflect") - mu_b ** 2
    cov = convolve(a * b, win, mode="reflect") - mu_a * mu_b
    return float(np.mean((2 * cov + c2) / (var_a + var_b + c2)))
