"""Ground-truth factory: analytic scenes, trajectories, RS/GS synthesis.

Scenes are sums of emissive Gaussian blobs (optionally plus a smoothly
textured background slab) with closed-form color and density, so images can
be ray-marched exactly and correspondences can be generated by projecting
known 3D surface points. By default the rolling-shutter synthesis uses the
same first-order row-pose model as the optimizer, which keeps the epipolar
residuals of generated matches at round-off level; an exact-exponential
rotation flag exists to measure the model mismatch instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .camera import Intrinsics, RsFrame, row_rotations, rs_project_points
from .field import Aabb
from .lie import Pose, skew_batch, so3_exp, so3_log
from .renderer import composite_batch


@dataclass
class GaussianBlob:
    center: np.ndarray
    radius: float
    color: np.ndarray
    peak: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if self.radius <= 0 or self.peak < 0:
            raise ValueError("blob radius must be positive and peak non-negative")

    def iso_radius(self) -> float:
        """Radius of the half-peak-density iso-surface."""
        return self.radius * math.sqrt(2.0 * math.log(2.0))


@dataclass
class TexturedSlab:
    """Gaussian-profile density slab at fixed z with a smooth color texture."""

    z_center: float
    thickness: float
    peak: float

    def density(self, x: np.ndarray) -> np.ndarray:
        return self.peak * np.exp(-0.5 * ((x[:, 2] - self.z_center) / self.thickness) ** 2)

    def color(self, x: np.ndarray) -> np.ndarray:
        u, v = x[:, 0], x[:, 1]
        r = 0.5 + 0.35 * np.sin(3.1 * u) * np.cos(2.3 * v)
        g = 0.5 + 0.35 * np.sin(2.2 * u + 1.1) * np.sin(2.9 * v)
        b = 0.5 + 0.35 * np.cos(2.7 * u) * np.sin(2.1 * v + 0.6)
        return np.stack([r, g, b], axis=1)


@dataclass
class AnalyticScene:
    blobs: list
    slab: TexturedSlab | None = None

    def sigma_color(self, x: np.ndarray):
        """Closed-form density and color at points x [n,3]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        sigma = np.zeros(n)
        weighted = np.zeros((n, 3))
        for blob in self.blobs:
            d2 = np.sum((x - blob.center) ** 2, axis=1)
            w = blob.peak * np.exp(-0.5 * d2 / blob.radius ** 2)
            sigma += w
            weighted += w[:, None] * blob.color
        if self.slab is not None:
            w = self.slab.density(x)
            sigma += w
            weighted += w[:, None] * self.slab.color(x)
        color = weighted / np.maximum(sigma, 1e-12)[:, None]
        return sigma, np.clip(color, 0.0, 1.0)


def scene_preset(name: str, rng: np.random.Generator | None = None) -> AnalyticScene:
    """Named analytic scenes: 'blobs' (textured desk) and 'bar' (vertical rod)."""
    rng = rng if rng is not None else np.random.default_rng(7)
    if name == "blobs":
        palette = np.array([
            [0.91, 0.29, 0.24], [0.20, 0.59, 0.86], [0.18, 0.80, 0.44],
            [0.95, 0.77, 0.06], [0.61, 0.35, 0.71], [0.90, 0.49, 0.13],
            [0.26, 0.71, 0.81], [0.93, 0.51, 0.93], [0.52, 0.76, 0.26],
            [0.80, 0.36, 0.36], [0.36, 0.42, 0.75], [0.75, 0.75, 0.75],
        ])
        blobs = []
        for c in palette:
            center = rng.uniform([-0.95, -0.75, -0.45], [0.95, 0.75, 0.55])
            radius = rng.uniform(0.13, 0.30)
            peak = rng.uniform(10.0, 28.0)
            blobs.append(GaussianBlob(center, radius, c, peak))
        return AnalyticScene(blobs, TexturedSlab(z_center=0.95, thickness=0.07, peak=30.0))
    if name == "bar":
        ys = np.linspace(-0.85, 0.85, 13)
        blobs = [GaussianBlob([0.0, y, 0.0], 0.085, [0.95, 0.92, 0.35], 45.0) for y in ys]
        return AnalyticScene(blobs, None)
    raise ValueError(f"unknown scene preset: {name!r}")


def scene_aabb(name: str) -> Aabb:
    if name == "bar":
        return Aabb([-1.2, -1.2, -0.8], [1.2, 1.2, 0.8])
    return Aabb([-1.35, -1.1, -0.8], [1.35, 1.1, 1.35])


def lookat_pose(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose: camera +z toward target, +y down-image."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=float), fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), position)


def finite_difference_motion(poses: list[Pose], frame_dt: float):
    """Per-frame world linear/angular velocity via central differences."""
    n = len(poses)
    pos = np.array([p.t for p in poses])
    v = np.empty((n, 3))
    w = np.empty((n, 3))
    for k in range(n):
        a, b = max(k - 1, 0), min(k + 1, n - 1)
        span = (b - a) * frame_dt
        v[k] = (pos[b] - pos[a]) / span
        w[k] = so3_log(poses[b].R @ poses[a].R.T) / span
    return v, w


@dataclass
class TrajectorySpec:
    """Ground-truth motion: first-row poses with per-frame velocities."""

    frames: list            # RsFrame, capture order, ids 0..n-1
    frame_dt: float
    target: np.ndarray


def line_sweep_trajectory(n_frames: int, start=(-1.05, 0.12, -2.45), end=(1.05, -0.08, -2.3),
                          target=(0.0, 0.0, 0.2), wiggle_amp: float = 0.05,
                          frame_dt: float = 1.0) -> TrajectorySpec:
    """Lateral sweep with gentle vertical wiggle, always looking at the scene."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    s = np.linspace(0.0, 1.0, n_frames)
    positions = start[None] + s[:, None] * (end - start)[None]
    positions[:, 1] += wiggle_amp * np.sin(2.1 * np.pi * s)
    positions[:, 2] += 0.6 * wiggle_amp * np.cos(1.7 * np.pi * s)
    poses = [lookat_pose(p, target) for p in positions]
    v, w = finite_difference_motion(poses, frame_dt)
    frames = [RsFrame(k, poses[k], v[k], w[k]) for k in range(n_frames)]
    return TrajectorySpec(frames=frames, frame_dt=frame_dt, target=np.asarray(target, dtype=float))


def trajectory_preset(name: str, n_frames: int) -> TrajectorySpec:
    """Motion presets named by rolling-shutter severity (see readout_for_shear)."""
    if name not in ("slow", "medium", "fast"):
        raise ValueError(f"unknown trajectory preset: {name!r}")
    return line_sweep_trajectory(n_frames)


TRAJ_TARGET_SHEAR_PX = {"slow": 1.5, "medium": 3.0, "fast": 6.0}


def readout_for_shear(traj: TrajectorySpec, intr_fx: float, height: int,
                      target_shear_px: float) -> float:
    """Readout (s/row) that makes the top-to-bottom image shear ~target pixels."""
    speeds = [np.linalg.norm(f.v) for f in traj.frames]
    speed = float(np.median(speeds))
    if speed <= 0:
        return 0.0
    depth = float(np.median([np.linalg.norm(traj.target - f.pose0.t) for f in traj.frames]))
    return target_shear_px * depth / (intr_fx * speed * height)


def default_intrinsics(width: int = 64, height: int = 64, readout: float = 0.0) -> Intrinsics:
    f = 1.1 * width  # ~49 deg horizontal field of view
    return Intrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height, readout=readout)


def _rs_rays(frame: RsFrame, intr: Intrinsics, px: np.ndarray, py: np.ndarray,
             exact_rotation: bool = False):
    u = py * intr.readout
    d_cam = intr.pixel_dir(px, py)
    if exact_rotation:
        rows = np.unique(py)
        R_by_row = {r: so3_exp(frame.omega * r * intr.readout) @ frame.pose0.R for r in rows}
        d_world = np.stack([R_by_row[r] for r in py]) @ d_cam[..., None]
        d_world = d_world[..., 0]
    else:
        m = d_cam @ frame.pose0.R.T
        d_world = m + np.cross(frame.omega[None, :] * u[:, None], m)
    origin = frame.pose0.t[None, :] + frame.v[None, :] * u[:, None]
    return origin, d_world


def render_analytic(scene: AnalyticScene, frame: RsFrame, intr: Intrinsics,
                    near: float, far: float, n_samples: int = 160,
                    background=(0.0, 0.0, 0.0), exact_rotation: bool = False,
                    chunk_rows: int = 16) -> np.ndarray:
    """Ray-march the closed-form scene with midpoint sampling."""
    h, w = intr.height, intr.width
    bg = np.asarray(background, dtype=float)
    img = np.empty((h, w, 3))
    cols = np.arange(w, dtype=float)
    edges = np.linspace(near, far, n_samples + 1)
    t = (edges[:-1] + edges[1:]) / 2.0
    dt = np.empty_like(t)
    dt[:-1] = t[1:] - t[:-1]
    dt[-1] = far - t[-1]
    for row0 in range(0, h, chunk_rows):
        rows = np.arange(row0, min(row0 + chunk_rows, h), dtype=float)
        pxg, pyg = np.meshgrid(cols, rows)
        px, py = pxg.reshape(-1), pyg.reshape(-1)
        origin, d_world = _rs_rays(frame, intr, px, py, exact_rotation)
        x = origin[:, None, :] + t[None, :, None] * d_world[:, None, :]
        sigma, color = scene.sigma_color(x.reshape(-1, 3))
        n = px.shape[0]
        dnorm = np.linalg.norm(d_world, axis=1)
        delta = dt[None, :] * dnorm[:, None]
        out, _, _, _ = composite_batch(
            color.reshape(n, -1, 3), sigma.reshape(n, -1), delta, bg
        )
        img[row0:row0 + len(rows)] = out.reshape(len(rows), w, 3)
    return img


def render_pair(scene: AnalyticScene, frame: RsFrame, intr: Intrinsics,
                near: float, far: float, n_samples: int = 160,
                background=(0.0, 0.0, 0.0), exact_rotation: bool = False):
    """(rolling-shutter image, global-shutter image) with identical sampling."""
    rs = render_analytic(scene, frame, intr, near, far, n_samples, background, exact_rotation)
    gs = render_analytic(scene, frame.static_copy(), intr, near, far, n_samples,
                         background, exact_rotation)
    return rs, gs


def perturb_poses(frames: list[RsFrame], sigma_trans: float, sigma_rot_rad: float,
                  rng: np.random.Generator) -> list[RsFrame]:
    """Add Gaussian translation noise and random-axis rotation noise to pose0."""
    if sigma_trans < 0 or sigma_rot_rad < 0:
        raise ValueError("noise levels must be non-negative")
    out = []
    for f in frames:
        g = f.copy()
        g.pose0.t = g.pose0.t + rng.normal(0.0, sigma_trans, 3)
        angle = rng.normal(0.0, sigma_rot_rad)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        g.pose0.R = so3_exp(angle * axis) @ g.pose0.R
        out.append(g)
    return out


def corrupt_frame(frame: RsFrame, trans: float, rot_rad: float,
                  rng: np.random.Generator) -> RsFrame:
    """Gross single-frame corruption: fixed-magnitude random offset/rotation."""
    g = frame.copy()
    d = rng.normal(size=3)
    g.pose0.t = g.pose0.t + trans * d / np.linalg.norm(d)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    g.pose0.R = so3_exp(rot_rad * axis) @ g.pose0.R
    return g


def sample_surface_points(scene: AnalyticScene, n_points: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Points on the blobs' half-peak iso-surfaces, spread over all blobs."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    pts = np.empty((n_points, 3))
    n_blobs = len(scene.blobs)
    for i in range(n_points):
        blob = scene.blobs[i % n_blobs]
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        pts[i] = blob.center + blob.iso_radius() * d
    return pts


def generate_matches(scene: AnalyticScene, frames: list[RsFrame], intr: Intrinsics,
                     n_points: int = 300, noise_px: float = 0.5,
                     outlier_frac: float = 0.05, rng: np.random.Generator | None = None,
                     view_sigma_deg: float = 4.0):
    """Synthetic pairwise correspondences from projected shared surface points.

    A point matched across a frame pair must project in-bounds in both frames;
    pairs additionally survive an appearance-locality test with acceptance
    probability exp(-(angle/view_sigma)^2) on the viewpoint angle subtended at
    the point, which makes match counts decay with baseline the way learned
    matchers do. Detection noise is drawn once per (point, frame) so both
    sides of different pairs reuse the same noisy keypoint; outlier_frac of
    each pair's matches are replaced by uniform random pixels.

    Returns (matches, counts): matches maps (i, j) with i < j to an [m, 4]
    array of (col_i, row_i, col_j, row_j); counts holds the per-pair tallies.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = sample_surface_points(scene, n_points, rng)
    F = len(frames)

    px = np.empty((F, n_points))
    py = np.empty((F, n_points))
    valid = np.empty((F, n_points), dtype=bool)
    for k, f in enumerate(frames):
        px[k], py[k], valid[k] = rs_project_points(f, intr, pts)

    noise = rng.normal(0.0, noise_px, size=(F, n_points, 2)) if noise_px > 0 else np.zeros((F, n_points, 2))
    centers = np.stack([f.pose0.t for f in frames])
    view_sigma = math.radians(view_sigma_deg)

    matches = {}
    counts = {}
    for i in range(F):
        for j in range(i + 1, F):
            co = valid[i] & valid[j]
            if view_sigma_deg < 180.0:
                di = centers[i][None, :] - pts
                dj = centers[j][None, :] - pts
                cosang = np.sum(di * dj, axis=1) / (
                    np.linalg.norm(di, axis=1) * np.linalg.norm(dj, axis=1)
                )
                ang = np.arccos(np.clip(cosang, -1.0, 1.0))
                keep_p = np.exp(-((ang / view_sigma) ** 2))
                co = co & (rng.random(n_points) < keep_p)
            idx = np.flatnonzero(co)
            if idx.size == 0:
                continue
            rec = np.stack([
                px[i, idx] + noise[i, idx, 0], py[i, idx] + noise[i, idx, 1],
                px[j, idx] + noise[j, idx, 0], py[j, idx] + noise[j, idx, 1],
            ], axis=1)
            if outlier_frac > 0:
                n_out = int(round(outlier_frac * rec.shape[0]))
                if n_out > 0:
                    sel = rng.choice(rec.shape[0], size=n_out, replace=False)
                    rec[sel, 2] = rng.uniform(0, intr.width - 1, n_out)
                    rec[sel, 3] = rng.uniform(0, intr.height - 1, n_out)
            key = (frames[i].frame_id, frames[j].frame_id)
            matches[key] = rec
            counts[key] = rec.shape[0]
    return matches, counts


def rescale_motion(frames: list[RsFrame], factor: float) -> list[RsFrame]:
    """Scale every frame's velocities; pose0 stays put."""
    if factor < 0:
        raise ValueError("motion factor must be non-negative")
    out = []
    for f in frames:
        g = f.copy()
        g.v = g.v * factor
        g.omega = g.omega * factor
        out.append(g)
    return out


def measure_column_shear(img: np.ndarray, min_mass: float = 0.05):
    """Total top-to-bottom column drift of the dominant bright structure.

    Fits a line to per-row intensity centroids; returns slope * (rows - 1),
    i.e. the horizontal displacement in pixels across the image.
    """
    gray = img.mean(axis=2) if img.ndim == 3 else img
    h, w = gray.shape
    cols = np.arange(w)
    mass = gray.sum(axis=1)
    rows = np.flatnonzero(mass > min_mass)
    if rows.size < 2:
        raise ValueError("no dominant structure to measure")
    centroid = (gray[rows] * cols[None, :]).sum(axis=1) / mass[rows]
    slope, _ = np.polyfit(rows.astype(float), centroid, 1)
    return float(slope * (h - 1))
