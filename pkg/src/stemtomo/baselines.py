"""Classical voxel-grid reconstructions: WBP, SIRT and explicit TV descent.

WBP and SIRT operate on line integrals, so noisy transmittances are first
mapped through -ln(clamp(e, 1e-6)); nonpositive pixels are counted and
reported with a warning. The tilt axis is the image vertical, which makes
the system separable: a sparse per-tilt operator acts on (x, z) slices
while a single row-interpolation matrix mixes y.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse

from .core import (ConfigError, Geometry, TiltSeries, TrainingError,
                   ValidationError, VolumeGrid, cube_grid_params,
                   rays_for_batch, rng_from)
from .noiseflow import (FlowParams, clone_flow, flow_axpy, log_prob,
                        log_prob_backward)
from .optics import QuadratureConfig

_CLAMP_EPS = 1e-6


def log_projections(ts: TiltSeries) -> np.ndarray:
    """-ln of the transmittances, clamped below at 1e-6.

    Emits one warning counting the clamped pixels; noisy stacks routinely
    contain a few nonpositive values.
    """
    e = np.asarray(ts.images, dtype=np.float64)
    n_bad = int(np.count_nonzero(e < _CLAMP_EPS))
    if n_bad:
        warnings.warn(f"clamped {n_bad} nonpositive transmittance pixels",
                      RuntimeWarning, stacklevel=2)
    return -np.log(np.maximum(e, _CLAMP_EPS))


# --------------------------------------------------------------------------
# separable projection system
# --------------------------------------------------------------------------

def _row_interp_matrix(n_out, coords, origin, spacing, n_grid):
    """Sparse (n_out, n_grid) linear-interpolation matrix; zero outside."""
    f = (np.asarray(coords, dtype=np.float64) - origin) / spacing
    i0 = np.floor(f).astype(np.int64)
    w1 = f - i0
    rows, cols, vals = [], [], []
    for idx, w in ((i0, 1.0 - w1), (i0 + 1, w1)):
        ok = (idx >= 0) & (idx < n_grid) & (w != 0)
        rows.append(np.nonzero(ok)[0])
        cols.append(idx[ok])
        vals.append(w[ok])
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_out, n_grid)).tocsr()


class Projector:
    """Sparse line-integral operator for a tilt series over a voxel grid.

    ``slice_ops[t]`` maps a flattened (nx, nz) slice to the ``width``
    detector columns of tilt t (bilinear footprints sampled at half-voxel
    steps); ``y_op`` maps the ny grid rows to the ``height`` detector rows.
    """

    def __init__(self, geom: Geometry, dims):
        dims = tuple(int(d) for d in dims)
        self.geom = geom
        self.dims = dims
        self.spacing, self.origin = cube_grid_params(dims)
        nx, ny, nz = dims
        step = 0.5 * self.spacing
        px = np.arange(geom.width)
        v_rows = (np.arange(geom.height) + 0.5 - 0.5 * geom.height) * geom.pixel_spacing
        self.y_op = _row_interp_matrix(geom.height, v_rows, self.origin[1],
                                       self.spacing, ny)
        self.slice_ops = []
        for t in range(len(geom.angles_deg)):
            tilts = np.full(geom.width, t)
            origins, dirs, tn, tf = rays_for_batch(
                geom, tilts, px, np.full(geom.width, (geom.height - 1) // 2))
            span = tf - tn
            n_s = max(1, int(np.ceil(span.max() / step))) if span.size else 1
            fr = (np.arange(n_s) + 0.5) / n_s
            t_par = tn[:, None] + span[:, None] * fr
            dt = (span / n_s)[:, None]
            x = origins[:, None, 0] + t_par * dirs[:, None, 0]
            z = origins[:, None, 2] + t_par * dirs[:, None, 2]
            fx = (x - self.origin[0]) / self.spacing
            fz = (z - self.origin[2]) / self.spacing
            ix0 = np.floor(fx).astype(np.int64)
            iz0 = np.floor(fz).astype(np.int64)
            wx1 = fx - ix0
            wz1 = fz - iz0
            rows_t, cols_t, vals_t = [], [], []
            for ix, wx in ((ix0, 1.0 - wx1), (ix0 + 1, wx1)):
                for iz, wz in ((iz0, 1.0 - wz1), (iz0 + 1, wz1)):
                    w = wx * wz * np.broadcast_to(dt, wx.shape)
                    ok = (ix >= 0) & (ix < nx) & (iz >= 0) & (iz < nz) & (w != 0)
                    r = np.broadcast_to(px[:, None], wx.shape)[ok]
                    rows_t.append(r)
                    cols_t.append(ix[ok] * nz + iz[ok])
                    vals_t.append(w[ok])
            op = sparse.coo_matrix(
                (np.concatenate(vals_t),
                 (np.concatenate(rows_t), np.concatenate(cols_t))),
                shape=(geom.width, nx * nz)).tocsr()
            self.slice_ops.append(op)

    def _to_slices(self, vol: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        return np.asarray(vol, dtype=np.float64).transpose(0, 2, 1).reshape(nx * nz, ny)

    def _from_slices(self, x2: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        return x2.reshape(nx, nz, ny).transpose(0, 2, 1)

    def forward(self, vol: np.ndarray) -> np.ndarray:
        """Line integrals of a (nx, ny, nz) grid: (n_tilts, height, width)."""
        x2 = self._to_slices(vol)
        yt = self.y_op.T
        out = np.empty((len(self.slice_ops), self.geom.height, self.geom.width))
        for t, op in enumerate(self.slice_ops):
            out[t] = ((op @ x2) @ yt).T
        return out

    def backward(self, projections: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`forward`."""
        acc = np.zeros((self.dims[0] * self.dims[2], self.dims[1]))
        for t, op in enumerate(self.slice_ops):
            acc += op.T @ (projections[t].T @ self.y_op)
        return self._from_slices(acc)

    def row_sums(self) -> np.ndarray:
        """Row sums of the full system, shape (n_tilts, height, width)."""
        rs_y = np.asarray(self.y_op.sum(axis=1)).reshape(-1)
        out = np.empty((len(self.slice_ops), self.geom.height, self.geom.width))
        for t, op in enumerate(self.slice_ops):
            rs_t = np.asarray(op.sum(axis=1)).reshape(-1)
            out[t] = np.outer(rs_y, rs_t)
        return out

    def col_sums(self) -> np.ndarray:
        """Column sums of the full system, shape dims."""
        cs_y = np.asarray(self.y_op.sum(axis=0)).reshape(-1)
        cs_xz = np.zeros(self.dims[0] * self.dims[2])
        for op in self.slice_ops:
            cs_xz += np.asarray(op.sum(axis=0)).reshape(-1)
        return self._from_slices(np.outer(cs_xz, cs_y))


# --------------------------------------------------------------------------
# weighted back-projection
# --------------------------------------------------------------------------

def _ramp_hann(n_pad, pixel_spacing, cutoff_frac):
    f = np.fft.fftfreq(n_pad, d=pixel_spacing)
    f_c = cutoff_frac * 0.5 / pixel_spacing
    h = np.abs(f) * (0.5 + 0.5 * np.cos(np.pi * f / f_c))
    h[np.abs(f) > f_c] = 0.0
    return h


def filter_projections(proj: np.ndarray, pixel_spacing, cutoff_frac=1.0) -> np.ndarray:
    """Ramp-filter rows of (..., width) line integrals, Hann rolloff."""
    if not 0 < cutoff_frac <= 1.0:
        raise ValidationError("cutoff_frac must lie in (0, 1]",
                              cutoff_frac=cutoff_frac)
    w = proj.shape[-1]
    n_pad = 1 << max(3, int(np.ceil(np.log2(2 * w))))
    h = _ramp_hann(n_pad, pixel_spacing, cutoff_frac)
    spec = np.fft.fft(proj, n=n_pad, axis=-1) * h
    return np.fft.ifft(spec, axis=-1).real[..., :w]


def _angular_weights(angles_deg) -> np.ndarray:
    a = np.radians(np.asarray(angles_deg, dtype=np.float64))
    if a.size < 2:
        return np.ones_like(a)
    w = np.empty_like(a)
    w[1:-1] = 0.5 * (a[2:] - a[:-2])
    w[0] = a[1] - a[0]
    w[-1] = a[-1] - a[-2]
    return w


def wbp(ts: TiltSeries, dims, cutoff_frac=1.0) -> VolumeGrid:
    """Filtered back-projection of -ln transmittance onto a voxel grid.

    Per-tilt 1D ramp (Hann rolloff, cutoff ``cutoff_frac`` x Nyquist)
    along the detector axis perpendicular to the tilt axis, then
    back-projection weighted by the local angular spacing.
    """
    if ts.n_tilts < 2:
        raise ValidationError("back-projection needs at least 2 tilts",
                              n_tilts=ts.n_tilts)
    dims = tuple(int(d) for d in dims)
    geom = Geometry.of(ts)
    q = filter_projections(log_projections(ts), ts.pixel_spacing, cutoff_frac)
    w_ang = _angular_weights(ts.angles_deg)
    spacing, origin = cube_grid_params(dims)
    nx, ny, nz = dims
    gx = origin[0] + spacing * np.arange(nx)
    gy = origin[1] + spacing * np.arange(ny)
    gz = origin[2] + spacing * np.arange(nz)
    out = np.zeros((ny, nx * nz))
    xs = np.repeat(gx, nz)
    zs = np.tile(gz, nx)
    vf = gy / ts.pixel_spacing - 0.5 + 0.5 * ts.height
    j0 = np.floor(vf).astype(np.int64)
    wv = vf - j0
    for t in range(ts.n_tilts):
        a = np.radians(ts.angles_deg[t])
        uf = (xs * np.cos(a) + zs * np.sin(a)) / ts.pixel_spacing - 0.5 + 0.5 * ts.width
        i0 = np.floor(uf).astype(np.int64)
        wu = uf - i0
        rows = np.zeros((ny, ts.width))
        for j, w in ((j0, 1.0 - wv), (j0 + 1, wv)):
            ok = (j >= 0) & (j < ts.height)
            rows[ok] += w[ok, None] * q[t, j[ok], :]
        vals = np.zeros((ny, nx * nz))
        for i, w in ((i0, 1.0 - wu), (i0 + 1, wu)):
            ok = (i >= 0) & (i < ts.width)
            vals[:, ok] += w[ok] * rows[:, i[ok]]
        out += w_ang[t] * vals
    vol = out.T.reshape(nx, nz, ny).transpose(0, 2, 1)
    return VolumeGrid(data=vol, spacing=spacing, origin=origin)


# --------------------------------------------------------------------------
# SIRT
# --------------------------------------------------------------------------

def sirt(ts: TiltSeries, dims, iterations) -> VolumeGrid:
    """Simultaneous iterative reconstruction on -ln transmittances.

    x <- x + C * A^T (R * (y - A x)) from zero init, with R and C the
    reciprocal row and column sums of the system matrix (zero where the
    sums vanish). Returns the iterate after ``iterations`` steps.
    """
    if int(iterations) < 1:
        raise ValidationError("iterations must be >= 1", iterations=iterations)
    dims = tuple(int(d) for d in dims)
    geom = Geometry.of(ts)
    proj = Projector(geom, dims)
    y = log_projections(ts)
    with np.errstate(divide="ignore"):
        r_w = 1.0 / proj.row_sums()
        c_w = 1.0 / proj.col_sums()
    r_w[~np.isfinite(r_w)] = 0.0
    c_w[~np.isfinite(c_w)] = 0.0
    x = np.zeros(dims)
    for _ in range(int(iterations)):
        residual = y - proj.forward(x)
        x = x + c_w * proj.backward(r_w * residual)
    return VolumeGrid(data=x, spacing=proj.spacing, origin=proj.origin)


def sirt_residual_norms(ts: TiltSeries, dims, iterations) -> np.ndarray:
    """Projection residual L2 norm before each of ``iterations`` updates."""
    dims = tuple(int(d) for d in dims)
    proj = Projector(Geometry.of(ts), dims)
    y = log_projections(ts)
    with np.errstate(divide="ignore"):
        r_w = 1.0 / proj.row_sums()
        c_w = 1.0 / proj.col_sums()
    r_w[~np.isfinite(r_w)] = 0.0
    c_w[~np.isfinite(c_w)] = 0.0
    x = np.zeros(dims)
    norms = []
    for _ in range(int(iterations)):
        residual = y - proj.forward(x)
        norms.append(float(np.linalg.norm(residual)))
        x = x + c_w * proj.backward(r_w * residual)
    return np.asarray(norms)


# --------------------------------------------------------------------------
# explicit voxel reconstruction
# --------------------------------------------------------------------------

@dataclass
class ExplicitReconConfig:
    dims: tuple = (48, 48, 48)
    loss: str = "l2"
    tv_lambda: float | None = None   # None picks 0.02 (l2) or 2.0 (mle)
    lr: float = 0.01
    flow_lr: float = 0.0             # > 0 refines the flow by SGD alongside the grid
    iterations: int = 2000
    batch_rays: int = 2048
    seed: int = 0
    quadrature: QuadratureConfig = dc_field(
        default_factory=lambda: QuadratureConfig(n_samples=64, stratified=True))

    def resolved_lambda(self) -> float:
        if self.tv_lambda is not None:
            return float(self.tv_lambda)
        return 2.0 if self.loss == "mle" else 0.02

    def validate(self):
        bad = []
        if len(tuple(self.dims)) != 3 or any(int(d) < 2 for d in self.dims):
            bad.append("dims")
        if self.loss not in ("l2", "mle"):
            bad.append("loss")
        if self.tv_lambda is not None and not self.tv_lambda >= 0:
            bad.append("tv_lambda")
        if not self.lr > 0:
            bad.append("lr")
        if not self.flow_lr >= 0:
            bad.append("flow_lr")
        if int(self.iterations) < 0:
            bad.append("iterations")
        if int(self.batch_rays) < 1:
            bad.append("batch_rays")
        if bad:
            raise ConfigError("invalid explicit reconstruction configuration",
                              fields=bad)
        self.quadrature.validate()


class GridField:
    """Trilinear density defined by a voxel grid, zero outside the grid."""

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        self.spacing, self.origin = cube_grid_params(self.dims)

    def forward(self, grid, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        f = (p - np.asarray(self.origin)) / self.spacing
        i0 = np.floor(f).astype(np.int64)
        w1 = f - i0
        vals = np.zeros(p.shape[0])
        cache = []
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    idx = i0 + (dx, dy, dz)
                    w = (np.where(dx, w1[:, 0], 1 - w1[:, 0])
                         * np.where(dy, w1[:, 1], 1 - w1[:, 1])
                         * np.where(dz, w1[:, 2], 1 - w1[:, 2]))
                    ok = np.all((idx >= 0) & (idx < self.dims), axis=1)
                    w = np.where(ok, w, 0.0)
                    idx = np.where(ok[:, None], idx, 0)
                    vals += w * grid[idx[:, 0], idx[:, 1], idx[:, 2]]
                    cache.append((idx, w))
        return vals, cache

    def backward(self, cache, upstream):
        grad = np.zeros(self.dims)
        up = np.asarray(upstream, dtype=np.float64).reshape(-1)
        for idx, w in cache:
            np.add.at(grad, (idx[:, 0], idx[:, 1], idx[:, 2]), w * up)
        return grad


def tv_value_and_subgrad(grid: np.ndarray):
    """Mean anisotropic total variation and a subgradient of it."""
    g = np.zeros_like(grid)
    total = 0.0
    n = grid.size
    for ax in range(3):
        d = np.diff(grid, axis=ax)
        total += float(np.abs(d).sum())
        s = np.sign(d) / n
        lead = [slice(None)] * 3
        lag = [slice(None)] * 3
        lead[ax] = slice(1, None)
        lag[ax] = slice(None, -1)
        g[tuple(lead)] += s
        g[tuple(lag)] -= s
    return total / n, g


def explicit_recon(ts: TiltSeries, cfg: ExplicitReconConfig,
                   flow: FlowParams | None = None) -> VolumeGrid:
    """Gradient descent on a voxel grid with TV regularisation.

    Renders rays through the trilinearly interpolated grid with the same
    absorption model as the implicit pipeline; the data term is L2 or,
    with a flow, the negative conditional log-likelihood. The flow stays
    fixed unless cfg.flow_lr > 0, in which case it is refined in place of
    the caller's copy by plain SGD while Adam updates the grid. Iterates
    are clipped to [0, 1] after each step. Zero iterations returns the
    zero grid.
    """
    cfg.validate()
    if cfg.loss == "mle" and flow is None:
        raise ValidationError("mle loss needs a fitted flow")
    if flow is not None and cfg.flow_lr > 0:
        flow = clone_flow(flow)
    dims = tuple(int(d) for d in cfg.dims)
    geom = Geometry.of(ts)
    gf = GridField(dims)
    lam = cfg.resolved_lambda()
    rng = rng_from(cfg.seed, "explicit")
    x = np.zeros(dims)
    m = np.zeros(dims)
    v = np.zeros(dims)
    b1, b2, eps = 0.9, 0.999, 1e-8
    s = cfg.quadrature.n_samples
    for it in range(1, int(cfg.iterations) + 1):
        tilts = rng.integers(0, ts.n_tilts, size=cfg.batch_rays)
        px = rng.integers(0, ts.width, size=cfg.batch_rays)
        py = rng.integers(0, ts.height, size=cfg.batch_rays)
        e_hat = ts.images[tilts, py, px].astype(np.float64)
        origins, dirs, tn, tf = rays_for_batch(geom, tilts, px, py)
        span = tf - tn
        fr = ((np.arange(s) + rng.random((cfg.batch_rays, s))) / s
              if cfg.quadrature.stratified
              else np.broadcast_to((np.arange(s) + 0.5) / s, (cfg.batch_rays, s)))
        t_par = tn[:, None] + span[:, None] * fr
        pts = origins[:, None, :] + t_par[..., None] * dirs[:, None, :]
        dt = span / s
        sigma, cache = gf.forward(x, pts.reshape(-1, 3))
        e = np.exp(-np.sum(sigma.reshape(-1, s), axis=1) * dt)
        r = e_hat - e
        if cfg.loss == "mle":
            lp, fcache = log_prob(flow, r, e, with_cache=True)
            data_loss = float(-np.mean(lp))
            fgrads, d_res, d_cond = log_prob_backward(
                flow, fcache, np.full(r.size, -1.0 / r.size))
            d_e = -d_res + d_cond
            if cfg.flow_lr > 0:
                flow_axpy(flow, fgrads, -cfg.flow_lr)
        else:
            data_loss = float(np.mean(r * r))
            d_e = r * (-2.0 / r.size)
        if not np.isfinite(data_loss):
            raise TrainingError("explicit reconstruction diverged", iteration=it)
        up = np.repeat(d_e * (-dt) * e, s)
        grad = gf.backward(cache, up)
        if lam > 0:
            _, tv_g = tv_value_and_subgrad(x)
            grad += lam * tv_g
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        x = x - cfg.lr * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps)
        np.clip(x, 0.0, 1.0, out=x)
    return VolumeGrid(data=x, spacing=gf.spacing, origin=gf.origin)
