"""Cone/ray sampling, transmittance compositing, and image synthesis.

Rolling-shutter rendering builds one ray per pixel using the per-row pose of
that pixel's row; global-shutter rendering runs the identical path with the
frame velocities zeroed, which makes the two modes bitwise equal for static
frames. The backward pass chains pixel-color gradients through compositing
and the field into gradients for the field parameters and for each frame's
first-row pose (as a local left-multiplied twist), linear velocity, and
angular velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .camera import Intrinsics, Ray, RsFrame, cone_sphere_radius, UNIT_PLANE_FOCAL
from .field import RadianceField


@dataclass
class RenderConfig:
    near: float
    far: float
    n_samples: int = 64
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    stratified: bool = False

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.n_samples < 1:
            raise ValueError("need at least one sample per ray")
        self.background = np.asarray(self.background, dtype=float).reshape(3)


@dataclass
class RaySamples:
    distances: np.ndarray
    deltas: np.ndarray
    radii: np.ndarray


@dataclass
class RenderedPixel:
    color: np.ndarray
    opacity: float
    weights: np.ndarray | None = None


def sample_distances(near: float, far: float, k: int, n_rays: int,
                     stratified: bool, rng: np.random.Generator | None):
    """Per-ray sample distances in [near, far]: (t [n,k], dt [n,k])."""
    edges = np.linspace(near, far, k + 1)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        xi = rng.random((n_rays, k))
    else:
        xi = np.full((n_rays, k), 0.5)
    width = (far - near) / k
    t = edges[:-1][None, :] + xi * width
    dt = np.empty_like(t)
    dt[:, :-1] = t[:, 1:] - t[:, :-1]
    dt[:, -1] = far - t[:, -1]
    return t, dt


def sample_ray(ray: Ray, near: float, far: float, k: int,
               stratified: bool = False, rng: np.random.Generator | None = None) -> RaySamples:
    """Sample one ray; radii come from the cone-sphere rule."""
    t, dt = sample_distances(near, far, k, 1, stratified, rng)
    radii = cone_sphere_radius(t[0], ray.dir, UNIT_PLANE_FOCAL, ray.disc_radius)
    return RaySamples(distances=t[0], deltas=dt[0], radii=radii)


def composite_batch(rgb: np.ndarray, sigma: np.ndarray, delta: np.ndarray,
                    background: np.ndarray):
    """Transmittance-weighted compositing: rgb [n,k,3], sigma/delta [n,k]."""
    s = sigma * delta
    cum = np.cumsum(s, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((s.shape[0], 1)), cum[:, :-1]], axis=1))
    alpha = -np.expm1(-s)
    weights = trans * alpha
    opacity = weights.sum(axis=1)
    color = np.einsum("nk,nkc->nc", weights, rgb) + (1.0 - opacity)[:, None] * background
    cache = (rgb, sigma, delta, trans, alpha, weights, background)
    return color, opacity, weights, cache


def composite_backward(cache, dcolor: np.ndarray):
    """Backward of composite_batch: returns (drgb, dsigma, ddelta)."""
    rgb, sigma, delta, trans, alpha, weights, background = cache
    drgb = weights[..., None] * dcolor[:, None, :]
    # d(color)/d(w_i) = rgb_i - background
    dw = np.einsum("nkc,nc->nk", rgb - background[None, None, :], dcolor)
    # dw_j/ds_i = T_{i+1} for j==i, -w_j for j>i
    t_next = trans * (1.0 - alpha)
    dww = dw * weights
    suffix = np.cumsum(dww[:, ::-1], axis=1)[:, ::-1] - dww
    ds = dw * t_next - suffix
    return drgb, ds * delta, ds * sigma


def composite(samples, background) -> RenderedPixel:
    """Single-ray compositing over (color, sigma, delta) triples."""
    if len(samples) == 0:
        bg = np.asarray(background, dtype=float)
        return RenderedPixel(color=bg.copy(), opacity=0.0, weights=np.zeros(0))
    rgb = np.array([np.asarray(s[0], dtype=float) for s in samples])[None]
    sigma = np.array([float(s[1]) for s in samples])[None]
    delta = np.array([float(s[2]) for s in samples])[None]
    if np.any(sigma < 0.0) or np.any(delta < 0.0):
        raise ValueError("sigma and delta must be non-negative")
    color, opacity, weights, _ = composite_batch(
        rgb, sigma, delta, np.asarray(background, dtype=float)
    )
    return RenderedPixel(color=color[0], opacity=float(opacity[0]), weights=weights[0])


def stack_frames(frames: list[RsFrame]) -> dict[str, np.ndarray]:
    return {
        "R0": np.stack([f.pose0.R for f in frames]),
        "t0": np.stack([f.pose0.t for f in frames]),
        "v": np.stack([f.v for f in frames]),
        "w": np.stack([f.omega for f in frames]),
    }


def render_rays(field: RadianceField, frames: list[RsFrame], fi: np.ndarray,
                px: np.ndarray, py: np.ndarray, intr: Intrinsics, cfg: RenderConfig,
                rng: np.random.Generator | None = None, footprint_scale: float = 1.0,
                want_record: bool = False):
    """Render a batch of pixels under the rolling-shutter row-pose model.

    fi holds per-ray indices into `frames`; px/py are full-resolution pixel
    coordinates (fractional allowed, e.g. centers of downsampled pixels with
    footprint_scale matching the downsample factor).
    """
    fa = stack_frames(frames)
    fi = np.asarray(fi)
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    n = px.shape[0]
    k = cfg.n_samples

    u = py * intr.readout
    d_cam = intr.pixel_dir(px, py)
    m = np.einsum("nij,nj->ni", fa["R0"][fi], d_cam)
    wu = fa["w"][fi] * u[:, None]
    d_world = m + np.cross(wu, m)
    origin = fa["t0"][fi] + fa["v"][fi] * u[:, None]
    dnorm = np.linalg.norm(d_world, axis=1)

    t, dt = sample_distances(cfg.near, cfg.far, k, n, cfg.stratified, rng)
    delta = dt * dnorm[:, None]

    r_dot = intr.disc_radius * footprint_scale
    radial = np.sqrt(np.maximum(dnorm * dnorm - 1.0, 0.0))
    denom = np.sqrt((radial - r_dot) ** 2 + 1.0)
    r_s = t * (r_dot / denom)[:, None]

    x = origin[:, None, :] + t[..., None] * d_world[:, None, :]
    d_rep = np.repeat(d_world, k, axis=0)
    rgb, sigma, frec = field.query(x.reshape(-1, 3), r_s.reshape(-1), d_rep)
    color, opacity, weights, ccache = composite_batch(
        rgb.reshape(n, k, 3), sigma.reshape(n, k), delta, cfg.background
    )
    if not want_record:
        return color
    record = {
        "field": field, "n_frames": len(frames), "fi": fi, "u": u, "m": m,
        "wu": wu, "d_world": d_world, "dnorm": dnorm, "t0": fa["t0"],
        "t": t, "dt": dt, "r_dot": r_dot, "radial": radial, "denom": denom,
        "r_s": r_s, "frec": frec, "ccache": ccache, "k": k,
    }
    return color, record


@dataclass
class RenderGrads:
    """Per-batch gradients: field trainables plus per-frame motion unknowns."""

    base: np.ndarray             # mipmap base [3, res, res, C]
    mlp: dict[str, np.ndarray]
    twist: np.ndarray            # [F, 6] local tangent (rho, phi) of pose0
    v: np.ndarray                # [F, 3]
    omega: np.ndarray            # [F, 3]


def render_backward(record, dcolor: np.ndarray) -> RenderGrads:
    """Chain pixel-color gradients down to field and frame parameters."""
    field: RadianceField = record["field"]
    n, k = dcolor.shape[0], record["k"]
    drgb, dsigma, ddelta = composite_backward(record["ccache"], dcolor)
    fgrads = field.query_backward(
        record["frec"], drgb.reshape(-1, 3), dsigma.reshape(-1)
    )
    dx = fgrads["dx"].reshape(n, k, 3)
    dr = fgrads["dr"].reshape(n, k)
    dd = fgrads["dd"].reshape(n, k, 3).sum(axis=1)

    t = record["t"]
    g_o = dx.sum(axis=1)
    g_dw = np.einsum("nk,nkc->nc", t, dx) + dd

    # r_s = t * r_dot / denom(|d|);  delta = dt * |d|
    denom, radial, r_dot = record["denom"], record["radial"], record["r_dot"]
    ddenom = -(dr * record["r_s"]).sum(axis=1) / denom
    dradial = ddenom * (radial - r_dot) / denom
    dnorm = record["dnorm"]
    ddnorm = (ddelta * record["dt"]).sum(axis=1)
    safe = radial > 1e-12
    ddnorm += np.where(safe, dradial * dnorm / np.where(safe, radial, 1.0), 0.0)
    g_dw += (record["d_world"] / dnorm[:, None]) * ddnorm[:, None]

    # d_world = m + wu x m;  origin = t0 + v u;  m = R0 d_cam
    m, wu, u, fi = record["m"], record["wu"], record["u"], record["fi"]
    g_m = g_dw - np.cross(wu, g_dw)
    g_phi_ray = np.cross(m, g_m) + np.cross(record["t0"][fi], g_o)

    F = record["n_frames"]
    twist = np.zeros((F, 6))
    g_v = np.zeros((F, 3))
    g_w = np.zeros((F, 3))
    np.add.at(twist[:, :3], fi, g_o)
    np.add.at(twist[:, 3:], fi, g_phi_ray)
    np.add.at(g_v, fi, u[:, None] * g_o)
    np.add.at(g_w, fi, u[:, None] * np.cross(m, g_dw))
    return RenderGrads(base=fgrads["base"], mlp=fgrads["mlp"], twist=twist,
                       v=g_v, omega=g_w)


def render_image(field: RadianceField, frame: RsFrame, intr: Intrinsics,
                 cfg: RenderConfig, mode: str = "rs", chunk_rows: int = 16) -> np.ndarray:
    """Render a full image; mode 'gs' zeroes the frame velocities."""
    if mode not in ("rs", "gs"):
        raise ValueError(f"unknown render mode: {mode!r}")
    f = frame if mode == "rs" else frame.static_copy()
    h, w = intr.height, intr.width
    img = np.empty((h, w, 3))
    cols = np.arange(w, dtype=float)
    for row0 in range(0, h, chunk_rows):
        rows = np.arange(row0, min(row0 + chunk_rows, h), dtype=float)
        px, py = np.meshgrid(cols, rows)
        colors = render_rays(
            field, [f], np.zeros(px.size, dtype=int),
            px.reshape(-1), py.reshape(-1), intr, cfg,
        )
        img[row0:row0 + len(rows)] = colors.reshape(len(rows), w, 3)
    return img
