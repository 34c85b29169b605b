"""Joint optimisation of the implicit field and the noise flow.

The MLE loss scores each rendered transmittance under the flow's
conditional residual density; gradients reach the field through both the
residual and the conditioner input, and reach the flow directly. Field
parameters take Adam-style moment updates, flow parameters plain SGD.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import field as field_mod
from . import noiseflow
from .core import (ConfigError, Geometry, TiltSeries, TrainingError,
                   ValidationError, VolumeGrid, rays_for_batch, rng_from)
from .field import FieldConfig, FieldParams
from .noiseflow import FlowConfig, FlowParams
from .optics import DefocusConfig, QuadratureConfig, blur_sigma

_LOSSES = ("mle", "l2", "l1")


@dataclass
class TrainConfig:
    loss: str = "mle"
    batch_rays: int = 1024
    iterations: int = 400000
    field_lr: float = 5e-5
    flow_lr: float = 5e-5
    flow_frozen: bool = False
    validate_every: int = 10000
    val_rays: int = 4096
    seed: int = 0
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    flow: FlowConfig | None = dc_field(default_factory=FlowConfig)
    quadrature: QuadratureConfig = dc_field(
        default_factory=lambda: QuadratureConfig(stratified=True))
    defocus: DefocusConfig = dc_field(default_factory=DefocusConfig)

    def validate(self):
        bad = []
        if self.loss not in _LOSSES:
            bad.append("loss")
        if int(self.iterations) < 0:
            bad.append("iterations")
        for name in ("batch_rays", "validate_every", "val_rays"):
            if int(getattr(self, name)) < 1:
                bad.append(name)
        for name in ("field_lr", "flow_lr"):
            if not getattr(self, name) > 0:
                bad.append(name)
        if self.loss == "mle" and self.flow is None:
            bad.append("flow")
        if bad:
            raise ConfigError("invalid training configuration", fields=bad)
        self.field.validate()
        if self.flow is not None:
            self.flow.validate()
        self.quadrature.validate()
        self.defocus.validate()


def config_echo(cfg) -> dict:
    d = asdict(cfg)

    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        if isinstance(x, (np.integer,)):
            return int(x)
        if isinstance(x, (np.floating,)):
            return float(x)
        return x

    return clean(d)


@dataclass
class RunReport:
    """Training record. ``wall_clock_s`` is informational only and never
    takes part in equality or determinism comparisons."""

    config: dict
    seed: int
    checkpoints: list
    best_iteration: int
    best_val_loss: float
    n_field_params: int
    n_flow_params: int
    wall_clock_s: float = dc_field(default=0.0, compare=False)

    def to_json(self, include_volatile=True) -> dict:
        out = {
            "config": self.config,
            "seed": int(self.seed),
            "checkpoints": self.checkpoints,
            "best_iteration": int(self.best_iteration),
            "best_val_loss": (float(self.best_val_loss)
                              if np.isfinite(self.best_val_loss) else None),
            "n_field_params": int(self.n_field_params),
            "n_flow_params": int(self.n_flow_params),
        }
        if include_volatile:
            out["wall_clock_s"] = float(self.wall_clock_s)
        return out

    def save(self, path, include_volatile=True):
        Path(path).write_text(
            json.dumps(self.to_json(include_volatile), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")


@dataclass
class TrainResult:
    field: FieldParams
    flow: FlowParams | None
    report: RunReport


# --------------------------------------------------------------------------
# batching and the differentiable render
# --------------------------------------------------------------------------

def sample_batch(ts: TiltSeries, n, rng):
    """Uniform pixels over all images: (tilt, px, py, observed value)."""
    tilts = rng.integers(0, ts.n_tilts, size=n)
    px = rng.integers(0, ts.width, size=n)
    py = rng.integers(0, ts.height, size=n)
    values = ts.images[tilts, py, px].astype(np.float64)
    return tilts, px, py, values


def render_batch(field_params: FieldParams, geom: Geometry, tilts, px, py,
                 q: QuadratureConfig, defocus: DefocusConfig, rng,
                 with_cache=False):
    """Differentiable transmittances of a mixed-tilt pixel batch.

    With defocus enabled each ray is jittered by the pixel's blur kernel
    (n_mc_samples draws, averaged), the training-time Monte Carlo
    estimate of the kernel integral.  Draws beyond the first come in
    antithetic pairs, which cuts the estimator variance without biasing
    the kernel average.
    """
    n = len(tilts)
    n_mc = defocus.n_mc_samples if defocus.enabled else 1
    if defocus.enabled:
        u_c = (np.asarray(px, dtype=np.float64) + 0.5 - 0.5 * geom.width) * geom.pixel_spacing
        res = np.asarray([geom.residual_for(t) for t in range(len(geom.angles_deg))])
        sig = blur_sigma(res[tilts], u_c, defocus.strength_c)
        half = rng.standard_normal((n, (n_mc + 1) // 2, 2))
        jitter = np.concatenate([half, -half], axis=1)[:, :n_mc]
        jitter = jitter * sig[:, None, None]
        rep = np.repeat(np.arange(n), n_mc)
        tilts_r, px_r, py_r = tilts[rep], np.asarray(px)[rep], np.asarray(py)[rep]
        origins, dirs, tn, tf = rays_for_batch(geom, tilts_r, px_r, py_r,
                                               jitter.reshape(-1, 2))
    else:
        origins, dirs, tn, tf = rays_for_batch(geom, tilts, px, py)
    n_rays = origins.shape[0]
    s = q.n_samples
    fr = ((np.arange(s) + rng.random((n_rays, s))) / s if q.stratified
          else np.broadcast_to((np.arange(s) + 0.5) / s, (n_rays, s)))
    span = tf - tn
    ts_par = tn[:, None] + span[:, None] * fr
    pts = origins[:, None, :] + ts_par[..., None] * dirs[:, None, :]
    dt = span / s
    sigma, cache = field_mod.forward_cached(field_params, pts.reshape(-1, 3))
    sigma = sigma.reshape(n_rays, s).astype(np.float64)
    e_rays = np.exp(-np.sum(sigma, axis=1) * dt)
    e = e_rays.reshape(n, n_mc).mean(axis=1)
    if not with_cache:
        return e
    return e, {"field_cache": cache, "dt": dt, "e_rays": e_rays,
               "n": n, "n_mc": n_mc, "n_samples": s}


def render_batch_backward(field_params, cache, d_e):
    """Field gradients given dLoss/dE per batch entry."""
    n_mc = cache["n_mc"]
    d_rays = np.repeat(np.asarray(d_e, dtype=np.float64) / n_mc, n_mc)
    upstream = (d_rays * (-cache["dt"]) * cache["e_rays"])[:, None]
    up = np.broadcast_to(upstream, (cache["e_rays"].size, cache["n_samples"]))
    return field_mod.backward(field_params, cache["field_cache"],
                              up.reshape(-1).astype(field_params.np_dtype))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def loss_lp(field_params, geom, batch, q, defocus, rng, p=2):
    """Mean |observed - rendered|^p with exact field gradients."""
    tilts, px, py, e_hat = batch
    e, cache = render_batch(field_params, geom, tilts, px, py, q, defocus, rng,
                            with_cache=True)
    r = e_hat - e
    n = r.size
    if p == 2:
        loss = float(np.mean(r * r))
        d_e = r * (-2.0 / n)
    elif p == 1:
        loss = float(np.mean(np.abs(r)))
        d_e = -np.sign(r) / n
    else:
        raise ValidationError("p must be 1 or 2", p=p)
    fgrads = render_batch_backward(field_params, cache, d_e)
    return loss, fgrads, {"e": e, "residual": r}


def loss_mle(field_params, flow_params, geom, batch, q, defocus, rng):
    """Mean negative conditional log-likelihood of the residuals.

    Returns (loss, field grads, flow grads, aux). The gradient into the
    rendered value combines the residual path (residual = observed -
    rendered) and the conditioner path.
    """
    tilts, px, py, e_hat = batch
    e, cache = render_batch(field_params, geom, tilts, px, py, q, defocus, rng,
                            with_cache=True)
    r = e_hat - e
    n = r.size
    lp, fl_cache = noiseflow.log_prob(flow_params, r, e, with_cache=True)
    loss = float(-np.mean(lp))
    upstream = np.full(n, -1.0 / n)
    flow_grads, d_res, d_cond = noiseflow.log_prob_backward(flow_params, fl_cache,
                                                            upstream)
    d_e = -d_res + d_cond
    fgrads = render_batch_backward(field_params, cache, d_e)
    return loss, fgrads, flow_grads, {"e": e, "residual": r}


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class Adam:
    """Adam moments for the field parameter lists."""

    def __init__(self, params: FieldParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = ([np.zeros_like(w) for w in params.weights],
                  [np.zeros_like(b) for b in params.biases])
        self.v = ([np.zeros_like(w) for w in params.weights],
                  [np.zeros_like(b) for b in params.biases])

    def step(self, params: FieldParams, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for arrs, gs, ms, vs in ((params.weights, grads[0], self.m[0], self.v[0]),
                                 (params.biases, grads[1], self.m[1], self.v[1])):
            for a, g, m, v in zip(arrs, gs, ms, vs):
                g = g.astype(a.dtype, copy=False)
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                a -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------

def _validation_loss(field_params, flow_params, geom, batch, q, loss_kind,
                     defocus=None, rng=None):
    """Deterministic validation score: midpoint quadrature; with defocus
    enabled the caller supplies a freshly reseeded rng so every checkpoint
    sees identical blur jitters."""
    tilts, px, py, e_hat = batch
    q_det = QuadratureConfig(n_samples=q.n_samples, stratified=False)
    e = render_batch(field_params, geom, tilts, px, py, q_det,
                     defocus or DefocusConfig(enabled=False), rng=rng)
    r = e_hat - e
    if loss_kind == "mle":
        return float(-np.mean(noiseflow.log_prob(flow_params, r, e)))
    if loss_kind == "l2":
        return float(np.mean(r * r))
    return float(np.mean(np.abs(r)))


def train(ts_train: TiltSeries, ts_val: TiltSeries, cfg: TrainConfig,
          flow_init: FlowParams | None = None) -> TrainResult:
    """Fit the field (and, for MLE, the flow) to a noisy tilt series.

    Checkpoints every ``validate_every`` iterations score a fixed
    validation ray subset; the best-scoring parameters are returned.
    Bit-deterministic for a fixed (config, seed).
    """
    cfg.validate()
    t0 = time.perf_counter()
    geom = Geometry.of(ts_train)
    geom_val = Geometry.of(ts_val)
    rng = rng_from(cfg.seed, "train")
    fieldp = field_mod.init_params(cfg.field, cfg.seed)
    flowp = None
    if cfg.loss == "mle":
        flowp = (noiseflow.clone_flow(flow_init) if flow_init is not None
                 else noiseflow.init_flow(cfg.flow, cfg.seed))
    adam = Adam(fieldp, cfg.field_lr)

    rng_val = rng_from(cfg.seed, "val_subset")
    n_val = min(cfg.val_rays, ts_val.n_tilts * ts_val.height * ts_val.width)
    val_batch = sample_batch(ts_val, n_val, rng_val)

    checkpoints = []
    best_iter = -1
    best_val = np.inf
    best_field = field_mod.clone(fieldp)
    best_flow = noiseflow.clone_flow(flowp) if flowp is not None else None
    ema = None

    for it in range(1, cfg.iterations + 1):
        batch = sample_batch(ts_train, cfg.batch_rays, rng)
        if cfg.loss == "mle":
            loss, fgrads, flgrads, _ = loss_mle(fieldp, flowp, geom, batch,
                                                cfg.quadrature, cfg.defocus, rng)
        else:
            loss, fgrads, _ = loss_lp(fieldp, geom, batch, cfg.quadrature,
                                      cfg.defocus, rng, p=2 if cfg.loss == "l2" else 1)
        if not np.isfinite(loss):
            raise TrainingError("training loss diverged", iteration=it)
        adam.step(fieldp, fgrads)
        if cfg.loss == "mle" and not cfg.flow_frozen:
            noiseflow.flow_axpy(flowp, flgrads, -cfg.flow_lr)
        ema = loss if ema is None else 0.99 * ema + 0.01 * loss
        if it % cfg.validate_every == 0 or it == cfg.iterations:
            vl = _validation_loss(fieldp, flowp, geom_val, val_batch,
                                  cfg.quadrature, cfg.loss, cfg.defocus,
                                  rng_from(cfg.seed, "val_render"))
            checkpoints.append({"iteration": it, "val_loss": float(vl),
                                "train_loss_ema": float(ema)})
            if vl < best_val:
                best_val = vl
                best_iter = it
                best_field = field_mod.clone(fieldp)
                if flowp is not None:
                    best_flow = noiseflow.clone_flow(flowp)

    report = RunReport(
        config=config_echo(cfg), seed=int(cfg.seed), checkpoints=checkpoints,
        best_iteration=best_iter, best_val_loss=float(best_val),
        n_field_params=int(cfg.field.n_params),
        n_flow_params=int(noiseflow.flow_flatten(flowp).size) if flowp is not None else 0,
        wall_clock_s=time.perf_counter() - t0)
    return TrainResult(field=best_field, flow=best_flow, report=report)


def reconstruct_volume(field_params: FieldParams, dims) -> VolumeGrid:
    """Density at the voxel centres of the cube-centred grid."""
    return field_mod.reconstruct_volume(field_params, dims)
