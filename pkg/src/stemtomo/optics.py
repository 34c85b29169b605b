"""Electron transport: absorption-only transmittance plus a defocus blur model.

Transmittance along a ray is exp(-sum sigma(r(t_i)) dt) with midpoint (or
stratified) quadrature. Out-of-focus tilts blur the image plane with a
normalized Gaussian whose width grows with residual tilt and with distance
from the tilt axis; width zero degenerates to a Dirac kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (Geometry, NumericError, Ray, TiltSeries, ValidationError,
                   rays_for_pixels, rng_from)

# pixels per chunk in full-image renders; a fixed constant so chunk layout
# (and therefore any per-chunk RNG stream) never depends on the machine
RENDER_CHUNK = 4096


@dataclass
class QuadratureConfig:
    """Sampling of the transmittance line integral."""

    n_samples: int = 128
    stratified: bool = False
    jitter_seed: int = 0

    def validate(self):
        if int(self.n_samples) < 2:
            raise ValidationError("quadrature needs at least 2 samples",
                                  n_samples=self.n_samples)
        self.n_samples = int(self.n_samples)


@dataclass
class DefocusConfig:
    """Gaussian defocus kernel; sigma = strength_c * tan(|beta|) * d."""

    enabled: bool = False
    strength_c: float = 0.0
    n_mc_samples: int = 1

    def validate(self):
        if self.strength_c < 0:
            raise ValidationError("defocus strength must be nonnegative",
                                  strength_c=self.strength_c)
        if int(self.n_mc_samples) < 1:
            raise ValidationError("defocus needs at least 1 Monte Carlo sample",
                                  n_mc_samples=self.n_mc_samples)
        self.n_mc_samples = int(self.n_mc_samples)


# --------------------------------------------------------------------------
# transmittance
# --------------------------------------------------------------------------

def _sample_fracs(n, n_rays, stratified, rng):
    """Per-sample fractional positions in [0, 1), shape (n_rays, n)."""
    base = (np.arange(n, dtype=np.float64) + 0.5) / n
    if not stratified:
        return np.broadcast_to(base, (n_rays, n))
    u = rng.random((n_rays, n))
    return (np.arange(n, dtype=np.float64) + u) / n


def transmittance_batch(density_fn, origins, direction, t_near, t_far, q,
                        rng=None, return_cache=False):
    """Vectorised transmittance for rays sharing one direction.

    ``density_fn`` maps (m, 3) points to (m,) densities. Returns E with
    shape (n_rays,); with ``return_cache`` also (sigma, dt, ts) for the
    exact per-sample gradient dE/dsigma_i = -dt * E.
    """
    q.validate()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    t_near = np.asarray(t_near, dtype=np.float64).reshape(n_rays)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(n_rays)
    if rng is None and q.stratified:
        rng = rng_from(q.jitter_seed, "quadrature")
    fr = _sample_fracs(q.n_samples, n_rays, q.stratified, rng)
    span = t_far - t_near
    ts = t_near[:, None] + span[:, None] * fr
    pts = origins[:, None, :] + ts[..., None] * np.asarray(direction, dtype=np.float64)
    sigma = np.asarray(density_fn(pts.reshape(-1, 3))).reshape(n_rays, q.n_samples)
    bad = ~np.isfinite(sigma)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NumericError("non-finite density sample",
                           position=[float(v) for v in pts[i, j]])
    dt = span / q.n_samples
    e = np.exp(-np.sum(sigma, axis=1, dtype=np.float64) * dt)
    if return_cache:
        return e, (sigma, dt, ts)
    return e


def transmittance(density_fn, ray: Ray, q: QuadratureConfig, rng=None) -> float:
    """Transmittance of a single clipped ray."""
    e = transmittance_batch(density_fn, ray.origin[None, :], ray.direction,
                            [ray.t_near], [ray.t_far], q, rng=rng)
    return float(e[0])


def transmittance_with_grad(density_fn, ray: Ray, q: QuadratureConfig, rng=None):
    """(E, dE/dsigma_i). The gradient is the exact identity -dt * E."""
    e, (sigma, dt, _) = transmittance_batch(
        density_fn, ray.origin[None, :], ray.direction, [ray.t_near], [ray.t_far],
        q, rng=rng, return_cache=True)
    grad = np.full(q.n_samples, -dt[0] * e[0])
    return float(e[0]), grad


# --------------------------------------------------------------------------
# defocus kernel
# --------------------------------------------------------------------------

def blur_sigma(beta_deg, d, strength_c):
    """Kernel width (model units) for residual tilt beta and axis distance d."""
    beta = np.abs(np.asarray(beta_deg, dtype=np.float64))
    if np.any(beta >= 90.0):
        raise ValidationError("residual angles must satisfy |beta| < 90 deg")
    return strength_c * np.tan(np.radians(beta)) * np.abs(np.asarray(d, dtype=np.float64))


def blur_weight(offset, beta_deg, d, strength_c) -> float:
    """Normalized 2-d Gaussian weight at an image-plane offset.

    Width zero is a Dirac kernel: weight 1 at offset (0, 0), else 0.
    """
    off = np.asarray(offset, dtype=np.float64).reshape(2)
    sig = float(blur_sigma(beta_deg, d, strength_c))
    if sig == 0.0:
        return 1.0 if off[0] == 0.0 and off[1] == 0.0 else 0.0
    r2 = float(off @ off)
    return math.exp(-0.5 * r2 / sig**2) / (2.0 * math.pi * sig**2)


def discrete_kernel(beta_deg, d, strength_c, pixel_spacing, truncate=3.0):
    """Pixel-sampled blur kernel, normalized to sum exactly to 1."""
    sig = float(blur_sigma(beta_deg, d, strength_c))
    sig_px = sig / pixel_spacing
    r = max(1, int(math.ceil(truncate * sig_px))) if sig_px > 0 else 0
    ax = np.arange(-r, r + 1, dtype=np.float64)
    if sig_px == 0.0:
        return np.ones((1, 1))
    gy, gx = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-0.5 * (gx**2 + gy**2) / sig_px**2)
    return k / k.sum()


def focus_ratio(geom: Geometry, strength_c, beta_deg=0.0) -> float:
    """pixel spacing over worst-case kernel width; inf when perfectly focused."""
    u_max = 0.5 * geom.width * geom.pixel_spacing
    d_s = float(blur_sigma(beta_deg, u_max, strength_c))
    if d_s == 0.0:
        return math.inf
    return geom.pixel_spacing / d_s


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def render_pixel(density_fn, geom: Geometry, tilt_index, px, py,
                 q: QuadratureConfig, defocus: DefocusConfig | None = None,
                 rng=None) -> float:
    """One pixel's clean value; with defocus, a Monte Carlo kernel average."""
    if defocus is None or not defocus.enabled:
        o, dirn, tn, tf = rays_for_pixels(geom, tilt_index, [px], [py])
        return float(transmittance_batch(density_fn, o, dirn, tn, tf, q, rng=rng)[0])
    defocus.validate()
    if rng is None:
        rng = rng_from(0, "render_pixel", tilt_index)
    u, _ = geom.pixel_uv(np.asarray(px), np.asarray(py))
    sig = float(blur_sigma(geom.residual_for(tilt_index), u, defocus.strength_c))
    n = defocus.n_mc_samples
    offsets = rng.normal(0.0, sig, size=(n, 2)) if sig > 0 else np.zeros((n, 2))
    o, dirn, tn, tf = rays_for_pixels(
        geom, tilt_index, np.full(n, px), np.full(n, py), offsets)
    e = transmittance_batch(density_fn, o, dirn, tn, tf, q, rng=rng)
    return float(e.mean())


def render_tilt(density_fn, geom: Geometry, tilt_index,
                q: QuadratureConfig, defocus: DefocusConfig | None = None,
                seed=0) -> np.ndarray:
    """Full image for one tilt, chunked so memory stays bounded.

    All randomness comes from streams keyed by (seed, tilt) so the result
    is independent of chunking or any parallel evaluation order.
    """
    h, w = geom.height, geom.width
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = xx.reshape(-1)
    py = yy.reshape(-1)
    n_px = px.size

    use_blur = defocus is not None and defocus.enabled
    n_mc = defocus.n_mc_samples if use_blur else 1
    if use_blur:
        defocus.validate()
        rng_off = rng_from(seed, "render", tilt_index, "offsets")
        u, _ = geom.pixel_uv(px, py)
        sig = blur_sigma(geom.residual_for(tilt_index), u, defocus.strength_c)
        offsets = rng_off.standard_normal((n_px, n_mc, 2)) * sig[:, None, None]
    else:
        offsets = None

    out = np.empty(n_px, dtype=np.float64)
    for lo in range(0, n_px, RENDER_CHUNK):
        hi = min(lo + RENDER_CHUNK, n_px)
        rep_px = np.repeat(px[lo:hi], n_mc)
        rep_py = np.repeat(py[lo:hi], n_mc)
        jit = offsets[lo:hi].reshape(-1, 2) if offsets is not None else None
        o, dirn, tn, tf = rays_for_pixels(geom, tilt_index, rep_px, rep_py, jit)
        rng_q = rng_from(seed, "render", tilt_index, "jitter", lo) if q.stratified else None
        e = transmittance_batch(density_fn, o, dirn, tn, tf, q, rng=rng_q)
        out[lo:hi] = e.reshape(-1, n_mc).mean(axis=1)
    return out.reshape(h, w)


def render_stack(density_fn, geom: Geometry, q: QuadratureConfig | None = None,
                 defocus: DefocusConfig | None = None, seed=0) -> TiltSeries:
    """Clean tilt series of the density under the given geometry."""
    q = q or QuadratureConfig()
    images = np.stack([
        render_tilt(density_fn, geom, t, q, defocus, seed=seed)
        for t in range(len(geom.angles_deg))
    ]).astype(np.float32)
    return TiltSeries(images=images, angles_deg=np.asarray(geom.angles_deg),
                      pixel_spacing=geom.pixel_spacing,
                      residual_angles_deg=None if geom.residual_angles_deg is None
                      else np.asarray(geom.residual_angles_deg))


def blur_stack(ts: TiltSeries, strength_c, truncate=3.0) -> TiltSeries:
    """Dense spatially varying defocus blur of an already rendered stack.

    The gather form of the kernel: each output pixel averages its
    neighbourhood with the Gaussian width of that pixel (width depends on
    the tilt's residual angle and the column's distance from the tilt
    axis). Used to synthesize out-of-focus data and as the reference the
    Monte Carlo path converges to.
    """
    h, w = ts.height, ts.width
    cols = np.arange(w)
    u = (cols + 0.5 - 0.5 * w) * ts.pixel_spacing
    out = np.empty_like(ts.images, dtype=np.float64)
    for t in range(ts.n_tilts):
        sig_px = blur_sigma(ts.residual_for(t), u, strength_c) / ts.pixel_spacing
        r = int(math.ceil(truncate * sig_px.max())) if sig_px.max() > 0 else 0
        if r == 0:
            out[t] = ts.images[t]
            continue
        img = np.pad(ts.images[t].astype(np.float64), r, mode="edge")
        num = np.zeros((h, w))
        den = np.zeros((h, w))
        var = sig_px**2
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                with np.errstate(divide="ignore", invalid="ignore"):
                    wcol = np.exp(-0.5 * (dx * dx + dy * dy) / var)
                wcol = np.where(var > 0, wcol, 1.0 if dx == 0 and dy == 0 else 0.0)
                patch = img[r + dy: r + dy + h, r + dx: r + dx + w]
                num += wcol[None, :] * patch
                den += wcol[None, :]
        out[t] = num / den
    return ts.with_images(out)
