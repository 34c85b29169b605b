"""Conditional 1-d normalizing flow for signal-dependent residual noise.

Layers are radial transforms f(z) = z + beta * (z - z0) / (alpha + |z - z0|)
applied in the data-to-base direction, so evaluating a log-density is a
single forward pass and sampling pays the numeric inversion cost instead.
Positivity (alpha) and invertibility (beta > -alpha) are enforced through
softplus reparameterisations. The trailing layers are conditioned on the
clean signal through a tiny per-layer MLP; the leading layers hold their
parameters directly.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import (FileFormatError, NumericError, TrainingError, ValidationError,
                   rng_from)

_MAGIC = b"STFL"
_VERSION = 1
_LOG_2PI = float(np.log(2.0 * np.pi))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


@dataclass(frozen=True)
class FlowConfig:
    """Layer budget; the conditioned layers form the suffix of the stack."""

    n_layers: int = 8
    n_conditioned: int = 4
    cond_hidden: int = 16

    def validate(self):
        if self.n_layers < 1:
            raise ValidationError("flow needs at least one layer",
                                  n_layers=self.n_layers)
        if not 0 <= self.n_conditioned <= self.n_layers:
            raise ValidationError("n_conditioned must not exceed n_layers",
                                  n_conditioned=self.n_conditioned)
        if self.cond_hidden < 1:
            raise ValidationError("conditioner needs a positive hidden width",
                                  cond_hidden=self.cond_hidden)


@dataclass
class FlowParams:
    """Raw parameters. Unconditioned layers come first, matching the
    order in which the data-to-base pass applies them."""

    cfg: FlowConfig
    z0: np.ndarray        # (n_uncond,)
    a_raw: np.ndarray     # (n_uncond,)
    b_raw: np.ndarray     # (n_uncond,)
    cond: list            # per conditioned layer: [w1 (h,), b1 (h,), w2 (3, h), b2 (3,)]

    @property
    def n_uncond(self):
        return self.cfg.n_layers - self.cfg.n_conditioned


def init_flow(cfg: FlowConfig, seed=0) -> FlowParams:
    """Near-identity start: beta ~ 0 so training begins at an L2-like loss."""
    cfg.validate()
    rng = rng_from(seed, "flow_init")
    nu = cfg.n_layers - cfg.n_conditioned
    z0 = rng.normal(0.0, 0.05, size=nu)
    a_raw = np.zeros(nu)
    b_raw = np.zeros(nu)
    cond = []
    for _ in range(cfg.n_conditioned):
        w1 = rng.uniform(-np.sqrt(6.0), np.sqrt(6.0), size=cfg.cond_hidden)
        b1 = np.zeros(cfg.cond_hidden)
        w2 = rng.normal(0.0, 1e-2, size=(3, cfg.cond_hidden))
        b2 = np.zeros(3)
        cond.append([w1, b1, w2, b2])
    return FlowParams(cfg=cfg, z0=z0, a_raw=a_raw, b_raw=b_raw, cond=cond)


def identity_flow(n_layers=2) -> FlowParams:
    """Exact identity: beta == 0 on every (unconditioned) layer, so
    log_prob reduces to the standard normal and sampling returns the base
    draw unchanged."""
    cfg = FlowConfig(n_layers=n_layers, n_conditioned=0)
    nu = n_layers
    return FlowParams(cfg=cfg, z0=np.zeros(nu), a_raw=np.zeros(nu),
                      b_raw=np.zeros(nu), cond=[])


def clone_flow(p: FlowParams) -> FlowParams:
    return FlowParams(cfg=p.cfg, z0=p.z0.copy(), a_raw=p.a_raw.copy(),
                      b_raw=p.b_raw.copy(),
                      cond=[[a.copy() for a in layer] for layer in p.cond])


# --------------------------------------------------------------------------
# parameter resolution (conditioner forward)
# --------------------------------------------------------------------------

def _resolve_layers(params: FlowParams, e):
    """Per-layer (z0, alpha, beta) arrays broadcast over the batch.

    Returns a list of dicts carrying everything the backward pass needs.
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    n = e.shape[0]
    layers = []
    for k in range(params.n_uncond):
        a_raw = params.a_raw[k]
        b_raw = params.b_raw[k]
        alpha = float(softplus(a_raw))
        beta = -alpha + float(softplus(b_raw))
        layers.append({"kind": "uncond", "index": k,
                       "z0": np.full(n, params.z0[k]),
                       "alpha": np.full(n, alpha), "beta": np.full(n, beta),
                       "a_raw": np.full(n, a_raw), "b_raw": np.full(n, b_raw)})
    for j, (w1, b1, w2, b2) in enumerate(params.cond):
        pre1 = e[:, None] * w1[None, :] + b1[None, :]
        hid = np.maximum(pre1, 0.0)
        t = np.tanh(hid @ w2.T + b2[None, :])
        z0 = t[:, 0]
        a_raw = 2.0 * t[:, 1]
        b_raw = 2.0 * t[:, 2]
        alpha = softplus(a_raw)
        beta = -alpha + softplus(b_raw)
        layers.append({"kind": "cond", "index": j, "z0": z0, "alpha": alpha,
                       "beta": beta, "a_raw": a_raw, "b_raw": b_raw,
                       "pre1": pre1, "hid": hid, "t": t})
    return layers, e


def _clamp_condition(e):
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0.0) or np.any(e > 1.0):
        warnings.warn("conditioner input clamped to [0, 1]", RuntimeWarning,
                      stacklevel=3)
        e = np.clip(e, 0.0, 1.0)
    return e


# --------------------------------------------------------------------------
# forward / inverse / log-density
# --------------------------------------------------------------------------

def _layer_forward(layer, z):
    u = z - layer["z0"]
    denom = layer["alpha"] + np.abs(u)
    w = u / denom
    f = z + layer["beta"] * w
    fp = 1.0 + layer["beta"] * layer["alpha"] / denom**2
    return f, fp, {"z": z, "u": u, "denom": denom, "w": w, "fp": fp}


def layer_forward(z, z0, alpha_raw, beta_raw):
    """Single radial layer from raw parameters: (f(z), log f'(z))."""
    alpha = softplus(alpha_raw)
    beta = -alpha + softplus(beta_raw)
    layer = {"z0": np.asarray(z0, dtype=np.float64),
             "alpha": alpha, "beta": beta}
    f, fp, _ = _layer_forward(layer, np.asarray(z, dtype=np.float64))
    return f, np.log(fp)


def _layer_inverse(layer, y, tol=1e-10, max_iter=100):
    """Monotone solve of f(z) = y by bisection plus Newton polish."""
    y = np.asarray(y, dtype=np.float64)
    bmax = np.max(np.abs(layer["beta"])) if y.size else 0.0
    lo = y - bmax - 1e-9
    hi = y + bmax + 1e-9
    it = 0
    while it < max_iter - 8 and np.max(hi - lo) > 1e-8:
        mid = 0.5 * (lo + hi)
        fm, _, _ = _layer_forward(layer, mid)
        below = fm < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        it += 1
    z = 0.5 * (lo + hi)
    for _ in range(8):
        f, fp, _ = _layer_forward(layer, z)
        err = f - y
        if np.max(np.abs(err)) < tol:
            break
        z = z - err / fp
        it += 1
        if it >= max_iter:
            break
    f, _, _ = _layer_forward(layer, z)
    if np.max(np.abs(f - y)) >= tol:
        raise NumericError("radial layer inversion did not converge",
                           worst=float(np.max(np.abs(f - y))))
    return z


def layer_inverse(y, z0, alpha_raw, beta_raw):
    alpha = softplus(alpha_raw)
    beta = -alpha + softplus(beta_raw)
    layer = {"z0": np.asarray(z0, dtype=np.float64), "alpha": alpha, "beta": beta}
    return _layer_inverse(layer, y)


def log_prob(params: FlowParams, residual, e, with_cache=False):
    """Log-density of residuals conditioned on clean values e.

    Single data-to-base pass: standard-normal base log-density plus the
    accumulated log-derivatives. ``e`` outside [0, 1] is clamped with a
    warning.
    """
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    e = _clamp_condition(np.asarray(e).reshape(-1))
    if r.shape != e.shape:
        raise ValidationError("residuals and conditioners must align",
                              n_residuals=r.shape[0], n_conditioners=e.shape[0])
    layers, e = _resolve_layers(params, e)
    z = r
    ld = np.zeros_like(z)
    caches = []
    for layer in layers:
        f, fp, cache = _layer_forward(layer, z)
        ld = ld + np.log(fp)
        caches.append((layer, cache))
        z = f
    lp = -0.5 * z**2 - 0.5 * _LOG_2PI + ld
    if with_cache:
        return lp, {"caches": caches, "z_final": z, "e": e}
    return lp


def sample(params: FlowParams, e, rng) -> np.ndarray:
    """Draw residuals for conditioners e: base Gaussian pushed through the
    layer inverses in reverse order."""
    e = _clamp_condition(np.asarray(e).reshape(-1))
    layers, _ = _resolve_layers(params, e)
    z = rng.standard_normal(e.shape[0])
    for layer in reversed(layers):
        z = _layer_inverse(layer, z)
    return z


def nll(params: FlowParams, residual, e) -> float:
    return float(-np.mean(log_prob(params, residual, e)))


# --------------------------------------------------------------------------
# reverse-mode gradients
# --------------------------------------------------------------------------

def zero_flow_grads(params: FlowParams):
    return {"z0": np.zeros_like(params.z0),
            "a_raw": np.zeros_like(params.a_raw),
            "b_raw": np.zeros_like(params.b_raw),
            "cond": [[np.zeros_like(a) for a in layer] for layer in params.cond]}


def log_prob_backward(params: FlowParams, cache, upstream):
    """Gradients of sum_i upstream_i * log_prob_i.

    Returns (grads, d_residual, d_e) where d_e collects only the
    conditioner path; the caller owns the residual = data - clean chain.
    """
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    grads = zero_flow_grads(params)
    d_e = np.zeros_like(cache["e"])
    mu = g * (-cache["z_final"])
    for layer, lc in reversed(cache["caches"]):
        alpha, beta = layer["alpha"], layer["beta"]
        u, denom, fp, w = lc["u"], lc["denom"], lc["fp"], lc["w"]
        s = np.sign(u)
        inv_d2 = 1.0 / denom**2
        inv_d3 = inv_d2 / denom
        df_dz0 = -beta * alpha * inv_d2
        df_dalpha = -beta * u * inv_d2
        df_dbeta = w
        dld_dz = (-2.0 * beta * alpha * s * inv_d3) / fp
        dld_dz0 = (2.0 * beta * alpha * s * inv_d3) / fp
        dld_dalpha = (beta * (denom - 2.0 * alpha) * inv_d3) / fp
        dld_dbeta = (alpha * inv_d2) / fp
        g_z0 = mu * df_dz0 + g * dld_dz0
        g_alpha = mu * df_dalpha + g * dld_dalpha
        g_beta = mu * df_dbeta + g * dld_dbeta
        g_a_raw = (g_alpha - g_beta) * expit(layer["a_raw"])
        g_b_raw = g_beta * expit(layer["b_raw"])
        mu = mu * fp + g * dld_dz
        if layer["kind"] == "uncond":
            k = layer["index"]
            grads["z0"][k] += g_z0.sum()
            grads["a_raw"][k] += g_a_raw.sum()
            grads["b_raw"][k] += g_b_raw.sum()
        else:
            j = layer["index"]
            w1, b1, w2, b2 = params.cond[j]
            t = layer["t"]
            dt = np.stack([g_z0, 2.0 * g_a_raw, 2.0 * g_b_raw], axis=1)
            dpre2 = dt * (1.0 - t**2)
            grads["cond"][j][2] += dpre2.T @ layer["hid"]
            grads["cond"][j][3] += dpre2.sum(axis=0)
            dhid = dpre2 @ w2
            dpre1 = dhid * (layer["pre1"] > 0)
            grads["cond"][j][0] += dpre1.T @ cache["e"]
            grads["cond"][j][1] += dpre1.sum(axis=0)
            d_e += dpre1 @ w1
    return grads, mu, d_e


# --------------------------------------------------------------------------
# flat views (finite differences, SGD)
# --------------------------------------------------------------------------

def flow_flatten(params: FlowParams) -> np.ndarray:
    parts = [params.z0, params.a_raw, params.b_raw]
    for layer in params.cond:
        parts.extend(a.reshape(-1) for a in layer)
    return np.concatenate(parts) if parts else np.zeros(0)


def flow_unflatten(cfg: FlowConfig, vec) -> FlowParams:
    cfg.validate()
    vec = np.asarray(vec, dtype=np.float64)
    nu = cfg.n_layers - cfg.n_conditioned
    h = cfg.cond_hidden
    k = 0

    def take(n, shape=None):
        nonlocal k
        out = vec[k: k + n].copy()
        k += n
        return out if shape is None else out.reshape(shape)

    z0 = take(nu)
    a_raw = take(nu)
    b_raw = take(nu)
    cond = []
    for _ in range(cfg.n_conditioned):
        cond.append([take(h), take(h), take(3 * h, (3, h)), take(3)])
    if k != vec.size:
        raise ValidationError("flow parameter vector length mismatch",
                              expected=k, actual=int(vec.size))
    return FlowParams(cfg=cfg, z0=z0, a_raw=a_raw, b_raw=b_raw, cond=cond)


def flow_grads_flatten(grads) -> np.ndarray:
    parts = [grads["z0"], grads["a_raw"], grads["b_raw"]]
    for layer in grads["cond"]:
        parts.extend(a.reshape(-1) for a in layer)
    return np.concatenate(parts) if parts else np.zeros(0)


def flow_axpy(params: FlowParams, grads, scale) -> None:
    """In-place params += scale * grads (the plain SGD step)."""
    params.z0 += scale * grads["z0"]
    params.a_raw += scale * grads["a_raw"]
    params.b_raw += scale * grads["b_raw"]
    for layer, glayer in zip(params.cond, grads["cond"]):
        for a, ga in zip(layer, glayer):
            a += scale * ga


# --------------------------------------------------------------------------
# supervised fit and scalar baselines
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    iterations: int = 6000
    batch: int = 2048
    lr: float = 0.05
    lr_decay: float = 0.3           # applied at 70% and 90% of the run
    val_fraction: float = 0.15
    validate_every: int = 200
    seed: int = 0


def fit_supervised(e, residual, cfg: FitConfig | None = None,
                   init: FlowParams | None = None) -> FlowParams:
    """Minimise mean NLL of (residual | e) pairs with plain SGD.

    A fixed validation split is scored every ``validate_every`` steps and
    the best-scoring parameters are returned.
    """
    cfg = cfg or FitConfig()
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    if e.shape != r.shape or e.size < 4:
        raise ValidationError("need matching e/residual arrays with >= 4 pairs",
                              n_e=int(e.size), n_residual=int(r.size))
    rng = rng_from(cfg.seed, "flow_fit")
    perm = rng.permutation(e.size)
    n_val = max(1, int(cfg.val_fraction * e.size))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    ev, rv = e[val_idx], r[val_idx]
    et, rt = e[train_idx], r[train_idx]

    params = clone_flow(init) if init is not None else init_flow(cfg.flow, cfg.seed)
    best = clone_flow(params)
    best_nll = nll(params, rv, ev)
    lr = cfg.lr
    decay_at = {int(0.7 * cfg.iterations), int(0.9 * cfg.iterations)}
    for it in range(cfg.iterations):
        if it in decay_at:
            lr *= cfg.lr_decay
        idx = rng.integers(0, et.size, size=min(cfg.batch, et.size))
        lp, cache = log_prob(params, rt[idx], et[idx], with_cache=True)
        loss = -float(np.mean(lp))
        if not np.isfinite(loss):
            raise TrainingError("supervised flow fit diverged", iteration=it)
        grads, _, _ = log_prob_backward(params, cache, np.full(idx.size, -1.0 / idx.size))
        flow_axpy(params, grads, -lr)
        if (it + 1) % cfg.validate_every == 0:
            cur = nll(params, rv, ev)
            if cur < best_nll:
                best_nll = cur
                best = clone_flow(params)
    return best


@dataclass
class ScalarNoiseBaseline:
    """Closed-form reference noise models."""

    kind: str
    params: dict

    def sample(self, e, rng) -> np.ndarray:
        e = np.asarray(e, dtype=np.float64).reshape(-1)
        if self.kind == "gaussian":
            return rng.normal(self.params["mu"], np.sqrt(self.params["var"]), e.shape)
        lam = np.clip(e, 0.0, None) * self.params["rate"]
        counts = rng.poisson(lam)
        noisy = self.params["offset"] + self.params["gain"] * counts
        return noisy - e

    def log_prob(self, residual, e=None):
        """Pointwise log-density of residuals.

        The scaled-Poisson model is discrete; this returns its
        moment-matched normal approximation, good enough for overlays
        and rough NLL comparisons.
        """
        r = np.asarray(residual, dtype=np.float64)
        if self.kind == "gaussian":
            mu, var = self.params["mu"], self.params["var"]
            return -0.5 * (r - mu)**2 / var - 0.5 * np.log(2 * np.pi * var)
        e = np.asarray(e, dtype=np.float64)
        lam = np.clip(e, 0.0, None) * self.params["rate"]
        mean = self.params["offset"] + self.params["gain"] * lam - e
        var = np.maximum(self.params["gain"]**2 * lam, 1e-12)
        return -0.5 * (r - mean)**2 / var - 0.5 * np.log(2 * np.pi * var)

    def nll(self, residual, e=None) -> float:
        return float(-np.mean(self.log_prob(residual, e)))


def synthetic_residuals(e, rng, bias=0.10, sigma0=0.03, sigma1=0.09,
                        gamma_shape=2.0) -> np.ndarray:
    """Signal-dependent residual generator used to synthesize test data.

    residual = bias*(1-e) + (sigma0 + sigma1*(1-e)) * xi, with xi a
    standardized, negatively skewed Gamma variate. Both the offset and
    the spread grow as the signal attenuates, and the skew pulls the
    conditional median above the conditional mean, so no zero-mean
    symmetric (or count-statistics) model reproduces it.
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    g = rng.gamma(gamma_shape, 1.0, size=e.shape)
    xi = (gamma_shape - g) / np.sqrt(gamma_shape)
    return bias * (1.0 - e) + (sigma0 + sigma1 * (1.0 - e)) * xi


def fit_baseline(kind, e, residual, gain=None, offset=None) -> ScalarNoiseBaseline:
    """Gaussian MLE or Poisson (scaled counts) fit of residual noise.

    The Poisson model reads noisy = offset + gain * K with K ~
    Poisson(rate * clean). Unless supplied, gain and offset come from the
    variance-versus-mean (photon transfer) regression over clean-signal
    bins; the rate estimate is then the count-per-clean MLE.
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    if e.shape != r.shape or e.size < 2:
        raise ValidationError("need at least 2 (e, residual) pairs",
                              n=int(min(e.size, r.size)))
    if kind == "gaussian":
        mu = float(np.mean(r))
        var = float(np.mean((r - mu)**2))
        if var <= 0:
            var = 1e-12
        return ScalarNoiseBaseline(kind="gaussian", params={"mu": mu, "var": var})
    if kind != "poisson":
        raise ValidationError("baseline kind must be gaussian or poisson", kind=kind)
    noisy = e + r
    if gain is None:
        order = np.argsort(e)
        n_bins = min(20, max(2, e.size // 50))
        splits = np.array_split(order, n_bins)
        means = np.array([noisy[s].mean() for s in splits if s.size >= 2])
        vars = np.array([noisy[s].var() for s in splits if s.size >= 2])
        if means.size >= 2 and np.ptp(means) > 0:
            slope, intercept = np.polyfit(means, vars, 1)
        else:
            slope, intercept = 0.0, float(np.var(noisy))
        if slope <= 1e-9:  # variance not growing with signal: degenerate fit
            slope = max(float(np.var(noisy) / max(np.mean(noisy), 1e-9)), 1e-9)
            intercept = 0.0
        gain = float(slope)
        offset = float(-intercept / gain) if offset is None else offset
    if offset is None:
        offset = 0.0
    counts = np.clip((noisy - offset) / gain, 0.0, None)
    denom = float(np.sum(np.clip(e, 0.0, None)))
    rate = float(np.sum(counts) / denom) if denom > 0 else float(np.mean(counts))
    return ScalarNoiseBaseline(kind="poisson",
                               params={"rate": rate, "gain": float(gain),
                                       "offset": float(offset)})


# --------------------------------------------------------------------------
# on-disk format
# --------------------------------------------------------------------------

def save_flow(params: FlowParams, path) -> None:
    cfg = params.cfg
    header = json.dumps({"kind": "flow", "n_layers": cfg.n_layers,
                         "n_conditioned": cfg.n_conditioned,
                         "cond_hidden": cfg.cond_hidden}, sort_keys=True).encode()
    payload = np.ascontiguousarray(flow_flatten(params), dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        f.write(payload)


def load_flow(path) -> FlowParams:
    from pathlib import Path
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise FileFormatError("not a flow parameter file", path=str(path))
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != _VERSION:
        raise FileFormatError("unsupported flow parameter version", version=version)
    header = json.loads(buf[12: 12 + hlen].decode("utf-8"))
    cfg = FlowConfig(n_layers=int(header["n_layers"]),
                     n_conditioned=int(header["n_conditioned"]),
                     cond_hidden=int(header["cond_hidden"]))
    vec = np.frombuffer(buf[12 + hlen:], dtype="<f8")
    return flow_unflatten(cfg, vec)
