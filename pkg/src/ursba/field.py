"""Trainable scene representation: three feature-plane mipmap stacks + MLP.

A query point is normalized into the scene box, projected onto the XY/XZ/YZ
planes, and bilinearly sampled from two adjacent mipmap levels selected from
the cone-sphere radius of the sample. The concatenated plane features plus a
sinusoidal view-direction encoding feed a 2-hidden-layer perceptron that
outputs color (sigmoid) and density (softplus).

Every forward entry point has a matching exact reverse-mode backward that
returns gradients for all trainables and for the query position, radius and
direction; the latter carry photometric gradients onward to pose/velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ
LN2 = float(np.log(2.0))


@dataclass
class Aabb:
    """Axis-aligned scene box used to normalize query positions to [0,1]^3."""

    bmin: np.ndarray
    bmax: np.ndarray

    def __post_init__(self):
        self.bmin = np.asarray(self.bmin, dtype=float).reshape(3)
        self.bmax = np.asarray(self.bmax, dtype=float).reshape(3)
        if not np.all(self.bmin < self.bmax):
            raise ValueError("box min must be strictly below max")

    @property
    def extent(self) -> np.ndarray:
        return self.bmax - self.bmin


@dataclass
class FieldSample:
    color: np.ndarray
    sigma: float


def _box_down(T: np.ndarray) -> np.ndarray:
    """2x2 box-filter downscale over the two leading spatial axes."""
    r, c = T.shape[0], T.shape[1]
    pr, pc = (r + 1) // 2, (c + 1) // 2
    out = np.zeros((pr, pc) + T.shape[2:], dtype=T.dtype)
    cnt = np.zeros((pr, pc) + (1,) * (T.ndim - 2))
    for dr in (0, 1):
        for dc in (0, 1):
            sub = T[dr::2, dc::2]
            out[: sub.shape[0], : sub.shape[1]] += sub
            cnt[: sub.shape[0], : sub.shape[1]] += 1.0
    return out / cnt


def _box_down_backward(grad_out: np.ndarray, in_shape) -> np.ndarray:
    """Adjoint of _box_down for an input of spatial shape in_shape."""
    r, c = in_shape[0], in_shape[1]
    cnt = np.zeros(grad_out.shape[:2] + (1,) * (grad_out.ndim - 2))
    for dr in (0, 1):
        for dc in (0, 1):
            sr, sc = len(range(dr, r, 2)), len(range(dc, c, 2))
            cnt[:sr, :sc] += 1.0
    g = grad_out / cnt
    grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
    for dr in (0, 1):
        for dc in (0, 1):
            sr, sc = len(range(dr, r, 2)), len(range(dc, c, 2))
            grad_in[dr::2, dc::2] += g[:sr, :sc]
    return grad_in


def derive_levels(base: np.ndarray, n_levels: int) -> list[np.ndarray]:
    """Mipmap pyramid: level i+1 is the 2x2 box average of level i."""
    levels = [base]
    for _ in range(n_levels):
        levels.append(_box_down(levels[-1]))
    return levels


def cascade_level_grads(level_grads: list[np.ndarray], shapes: list[tuple]) -> np.ndarray:
    """Pull gradients on every pyramid level back onto the base level."""
    g = level_grads[-1]
    for lev in range(len(level_grads) - 2, -1, -1):
        g = level_grads[lev] + _box_down_backward(g, shapes[lev])
    return g


class PlaneMipmaps:
    """Three trainable plane stacks (XY, XZ, YZ), each a mipmap pyramid.

    Only the base level holds parameters; coarser levels are derived and
    cached, and gradients on them cascade back onto the base.
    """

    def __init__(self, base_res: int = 64, channels: int = 8, n_levels: int = 4,
                 rng: np.random.Generator | None = None, init_scale: float = 1e-2):
        if base_res < 2 ** n_levels:
            raise ValueError("base resolution must be at least 2**n_levels")
        self.base_res = base_res
        self.channels = channels
        self.n_levels = n_levels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base = rng.uniform(-init_scale, init_scale, size=(3, base_res, base_res, channels))
        self.levels: list[np.ndarray] = []
        self.refresh()

    def refresh(self) -> None:
        """Recompute derived levels; call after every base-parameter update."""
        self.levels = derive_levels(np.moveaxis(self.base, 0, 2), self.n_levels)
        # stored as [res, res, 3, C] per level for contiguous per-plane gathers
        self.level_shapes = [lv.shape for lv in self.levels]

    def level_res(self, lev: int) -> int:
        return self.levels[lev].shape[0]


def _bilinear_setup(res: int, a: np.ndarray, b: np.ndarray):
    """Clamp-to-edge bilinear indices/weights for texel-center coordinates."""
    u = a * res - 0.5
    v = b * res - 0.5
    in_u = (u >= 0.0) & (u <= res - 1.0)
    in_v = (v >= 0.0) & (v <= res - 1.0)
    uc = np.clip(u, 0.0, res - 1.0)
    vc = np.clip(v, 0.0, res - 1.0)
    if res == 1:
        i0 = np.zeros_like(uc, dtype=np.int64)
        j0 = np.zeros_like(vc, dtype=np.int64)
        fu = np.zeros_like(uc)
        fv = np.zeros_like(vc)
        in_u = np.zeros_like(in_u)
        in_v = np.zeros_like(in_v)
    else:
        i0 = np.minimum(np.floor(uc), res - 2).astype(np.int64)
        j0 = np.minimum(np.floor(vc), res - 2).astype(np.int64)
        fu = uc - i0
        fv = vc - j0
    return i0, j0, fu, fv, in_u, in_v


def _bilinear_gather(T: np.ndarray, i0, j0, fu, fv) -> np.ndarray:
    """Sample T[res,res,C] at prepared indices/fractions: -> [n, C]."""
    if T.shape[0] == 1:
        return np.broadcast_to(T[0, 0], (i0.shape[0],) + T.shape[2:]).copy()
    i1 = np.minimum(i0 + 1, T.shape[0] - 1)
    j1 = np.minimum(j0 + 1, T.shape[1] - 1)
    t00 = T[i0, j0]
    t10 = T[i1, j0]
    t01 = T[i0, j1]
    t11 = T[i1, j1]
    wu = fu[:, None]
    wv = fv[:, None]
    return (
        (1 - wu) * (1 - wv) * t00 + wu * (1 - wv) * t10
        + (1 - wu) * wv * t01 + wu * wv * t11
    )


@dataclass
class _PlaneTap:
    """Per-sample bilinear taps of one plane at one blended mip slot."""

    lev: np.ndarray        # int level id per sample
    i0: np.ndarray
    j0: np.ndarray
    fu: np.ndarray
    fv: np.ndarray
    in_u: np.ndarray
    in_v: np.ndarray
    value: np.ndarray      # [n, C] sampled features


class Mlp:
    """Two-hidden-layer perceptron; outputs rgb (sigmoid) and density (softplus)."""

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, in_dim: int, hidden: int = 64,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        self.in_dim = in_dim
        self.hidden = hidden
        if zero_init:
            self.W1 = np.zeros((in_dim, hidden))
            self.W2 = np.zeros((hidden, hidden))
            self.W3 = np.zeros((hidden, 4))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.W1 = rng.uniform(-1, 1, (in_dim, hidden)) * np.sqrt(6.0 / in_dim)
            self.W2 = rng.uniform(-1, 1, (hidden, hidden)) * np.sqrt(6.0 / hidden)
            self.W3 = rng.uniform(-1, 1, (hidden, 4)) * np.sqrt(6.0 / hidden)
        self.b1 = np.zeros(hidden)
        self.b2 = np.zeros(hidden)
        self.b3 = np.zeros(4)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name in self.PARAM_NAMES:
            setattr(self, name, params[name])

    def forward(self, x: np.ndarray):
        z1 = x @ self.W1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.W2 + self.b2
        h2 = np.maximum(z2, 0.0)
        out = h2 @ self.W3 + self.b3
        cache = (x, h1, h2)
        return out, cache

    def backward(self, cache, dout: np.ndarray):
        x, h1, h2 = cache
        grads = {
            "W3": h2.T @ dout,
            "b3": dout.sum(axis=0),
        }
        dh2 = (dout @ self.W3.T) * (h2 > 0.0)
        grads["W2"] = h1.T @ dh2
        grads["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ self.W2.T) * (h1 > 0.0)
        grads["W1"] = x.T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        dx = dh1 @ self.W1.T
        return grads, dx


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.where(z > 0, z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def dir_encoding(d_unit: np.ndarray, n_freqs: int = 4):
    """Raw direction plus sin/cos at octave frequencies: [n,3] -> [n, 3+6F]."""
    feats = [d_unit]
    for k in range(n_freqs):
        s = (2.0 ** k) * d_unit
        feats.append(np.sin(s))
        feats.append(np.cos(s))
    return np.concatenate(feats, axis=-1)


def dir_encoding_backward(d_unit: np.ndarray, denc: np.ndarray, n_freqs: int = 4):
    dd = denc[:, :3].copy()
    col = 3
    for k in range(n_freqs):
        f = 2.0 ** k
        s = f * d_unit
        dd += denc[:, col:col + 3] * f * np.cos(s)
        col += 3
        dd -= denc[:, col:col + 3] * f * np.sin(s)
        col += 3
    return dd


def dir_encoding_dim(n_freqs: int = 4) -> int:
    return 3 + 6 * n_freqs


class RadianceField:
    """Tri-plane mipmap encoding + MLP with full reverse-mode gradients."""

    def __init__(self, aabb: Aabb, base_res: int = 64, channels: int = 8,
                 n_levels: int = 4, hidden: int = 64, n_freqs: int = 4,
                 rng: np.random.Generator | None = None, zero_init_mlp: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.aabb = aabb
        self.n_freqs = n_freqs
        self.mipmaps = PlaneMipmaps(base_res, channels, n_levels, rng=rng)
        if zero_init_mlp:
            self.mipmaps.base[:] = 0.0
            self.mipmaps.refresh()
        in_dim = 3 * channels + dir_encoding_dim(n_freqs)
        self.mlp = Mlp(in_dim, hidden, rng=rng, zero_init=zero_init_mlp)
        # half the (axis-averaged) world size of one base-level texel
        self.r_base = 0.5 * float(np.mean(aabb.extent)) / base_res

    @property
    def n_levels(self) -> int:
        return self.mipmaps.n_levels

    def encode(self, x: np.ndarray, r: np.ndarray):
        """Tri-plane mipmap features for positions x and cone radii r.

        Returns (features [n, 3C], record) where the record carries everything
        the backward pass needs.
        """
        mm = self.mipmaps
        n = x.shape[0]
        raw = (x - self.aabb.bmin) / self.aabb.extent
        x_norm = np.clip(raw, 0.0, 1.0)
        norm_mask = (raw > 0.0) & (raw < 1.0)

        log_l = np.log2(np.maximum(r, 1e-300) / self.r_base)
        l = np.clip(log_l, 0.0, float(mm.n_levels))
        l_mask = (log_l > 0.0) & (log_l < float(mm.n_levels))
        l0 = np.floor(l).astype(np.int64)
        l0 = np.minimum(l0, mm.n_levels - 1) if mm.n_levels > 0 else l0
        l1 = l0 + (1 if mm.n_levels > 0 else 0)
        frac = l - l0

        taps = []  # [plane][slot] -> _PlaneTap
        feats = np.empty((n, 3 * mm.channels))
        for p, (ax_a, ax_b) in enumerate(PLANE_AXES):
            a = x_norm[:, ax_a]
            b = x_norm[:, ax_b]
            slot_vals = []
            plane_taps = []
            for slot_levels in (l0, l1):
                value = np.empty((n, mm.channels))
                i0 = np.empty(n, dtype=np.int64)
                j0 = np.empty(n, dtype=np.int64)
                fu = np.empty(n)
                fv = np.empty(n)
                in_u = np.empty(n, dtype=bool)
                in_v = np.empty(n, dtype=bool)
                for lev in range(mm.n_levels + 1):
                    sel = slot_levels == lev
                    if not np.any(sel):
                        continue
                    res = mm.level_res(lev)
                    si0, sj0, sfu, sfv, siu, siv = _bilinear_setup(res, a[sel], b[sel])
                    value[sel] = _bilinear_gather(mm.levels[lev][:, :, p, :], si0, sj0, sfu, sfv)
                    i0[sel], j0[sel], fu[sel], fv[sel] = si0, sj0, sfu, sfv
                    in_u[sel], in_v[sel] = siu, siv
                plane_taps.append(_PlaneTap(slot_levels, i0, j0, fu, fv, in_u, in_v, value))
                slot_vals.append(value)
            w = frac[:, None]
            feats[:, p * mm.channels:(p + 1) * mm.channels] = (
                (1.0 - w) * slot_vals[0] + w * slot_vals[1]
            )
            taps.append(plane_taps)

        record = {
            "x_norm": x_norm, "norm_mask": norm_mask,
            "r": r, "l_mask": l_mask, "frac": frac, "taps": taps,
        }
        return feats, record

    def encode_backward(self, record, dfeat: np.ndarray):
        """Gradients of encode: returns (base_grad, dx, dr)."""
        mm = self.mipmaps
        n = dfeat.shape[0]
        frac = record["frac"]
        taps = record["taps"]
        x_norm_grad = np.zeros((n, 3))
        dl = np.zeros(n)
        level_grads = [np.zeros(s) for s in mm.level_shapes]

        for p, (ax_a, ax_b) in enumerate(PLANE_AXES):
            dplane = dfeat[:, p * mm.channels:(p + 1) * mm.channels]
            lo, hi = taps[p]
            dl += np.sum(dplane * (hi.value - lo.value), axis=1)
            for tap, w in ((lo, 1.0 - frac), (hi, frac)):
                dvalue = dplane * w[:, None]
                for lev in range(mm.n_levels + 1):
                    sel = tap.lev == lev
                    if not np.any(sel):
                        continue
                    res = mm.level_res(lev)
                    T = mm.levels[lev][:, :, p, :]
                    i0, j0 = tap.i0[sel], tap.j0[sel]
                    fu, fv = tap.fu[sel], tap.fv[sel]
                    dv = dvalue[sel]
                    if res == 1:
                        np.add.at(level_grads[lev][:, :, p, :], (0, 0), dv.sum(axis=0))
                        continue
                    i1 = np.minimum(i0 + 1, res - 1)
                    j1 = np.minimum(j0 + 1, res - 1)
                    wu, wv = fu[:, None], fv[:, None]
                    G = level_grads[lev][:, :, p, :]
                    np.add.at(G, (i0, j0), (1 - wu) * (1 - wv) * dv)
                    np.add.at(G, (i1, j0), wu * (1 - wv) * dv)
                    np.add.at(G, (i0, j1), (1 - wu) * wv * dv)
                    np.add.at(G, (i1, j1), wu * wv * dv)
                    # d/d(texture coordinate), clamp-masked
                    t00, t10, t01, t11 = T[i0, j0], T[i1, j0], T[i0, j1], T[i1, j1]
                    du = np.sum(dv * ((1 - wv) * (t10 - t00) + wv * (t11 - t01)), axis=1)
                    dvc = np.sum(dv * ((1 - wu) * (t01 - t00) + wu * (t11 - t10)), axis=1)
                    du *= tap.in_u[sel] * res
                    dvc *= tap.in_v[sel] * res
                    idx = np.flatnonzero(sel)
                    np.add.at(x_norm_grad[:, ax_a], idx, du)
                    np.add.at(x_norm_grad[:, ax_b], idx, dvc)

        base_grad = cascade_level_grads(level_grads, mm.level_shapes)
        base_grad = np.moveaxis(base_grad, 2, 0)  # back to [3, res, res, C]
        dx = x_norm_grad * record["norm_mask"] / self.aabb.extent
        dr = np.where(record["l_mask"], dl / (np.maximum(record["r"], 1e-300) * LN2), 0.0)
        return base_grad, dx, dr

    def query(self, x: np.ndarray, r: np.ndarray, d: np.ndarray):
        """Field forward: positions, radii, (unnormalized) view directions.

        Returns (rgb [n,3], sigma [n], record).
        """
        feats, enc_rec = self.encode(x, r)
        dn = np.linalg.norm(d, axis=-1, keepdims=True)
        d_unit = d / dn
        enc_d = dir_encoding(d_unit, self.n_freqs)
        mlp_in = np.concatenate([feats, enc_d], axis=1)
        out, mlp_cache = self.mlp.forward(mlp_in)
        rgb = _sigmoid(out[:, :3])
        sigma = _softplus(out[:, 3])
        record = {
            "enc": enc_rec, "mlp": mlp_cache, "rgb": rgb,
            "z_sigma": out[:, 3], "d_unit": d_unit, "dn": dn[:, 0],
        }
        return rgb, sigma, record

    def query_backward(self, record, drgb: np.ndarray, dsigma: np.ndarray):
        """Backward of query: grads for trainables and for (x, r, d)."""
        rgb = record["rgb"]
        dout = np.empty((drgb.shape[0], 4))
        dout[:, :3] = drgb * rgb * (1.0 - rgb)
        dout[:, 3] = dsigma * _sigmoid(record["z_sigma"])
        mlp_grads, dmlp_in = self.mlp.backward(record["mlp"], dout)
        nfeat = 3 * self.mipmaps.channels
        base_grad, dx, dr = self.encode_backward(record["enc"], dmlp_in[:, :nfeat])
        dd_unit = dir_encoding_backward(record["d_unit"], dmlp_in[:, nfeat:], self.n_freqs)
        # through the normalization d_unit = d / |d|
        d_unit = record["d_unit"]
        dn = record["dn"][:, None]
        dd = (dd_unit - d_unit * np.sum(d_unit * dd_unit, axis=1, keepdims=True)) / dn
        return {"base": base_grad, "mlp": mlp_grads, "dx": dx, "dr": dr, "dd": dd}

    def query_one(self, x, r: float, d) -> FieldSample:
        rgb, sigma, _ = self.query(
            np.asarray(x, dtype=float)[None], np.array([r], dtype=float),
            np.asarray(d, dtype=float)[None],
        )
        return FieldSample(color=rgb[0], sigma=float(sigma[0]))

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {"mipmaps.base": self.mipmaps.base}
        for name, arr in self.mlp.params().items():
            out[f"mlp.{name}"] = arr
        return out
