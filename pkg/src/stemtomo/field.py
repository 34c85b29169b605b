"""Implicit density field: positional encoding into a small MLP.

The network is a stack of ReLU layers of equal width with one skip
connection (the encoded input re-enters at a configurable depth) and a
sigmoid output, so densities always lie strictly inside (0, 1). Forward
and reverse passes are written out by hand; the reverse pass returns
exact parameter gradients that finite differences can be checked against.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import FileFormatError, ValidationError, VolumeGrid, cube_grid_params, rng_from

_MAGIC = b"STFD"
_VERSION = 1
_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal positional encoding with octave frequencies 2^l * pi."""

    n_freqs: int = 10
    include_input: bool = True

    @property
    def out_dim(self) -> int:
        return 3 * (2 * self.n_freqs + (1 if self.include_input else 0))

    def validate(self):
        if self.n_freqs < 1:
            raise ValidationError("encoding needs at least one frequency",
                                  n_freqs=self.n_freqs)


@dataclass(frozen=True)
class FieldConfig:
    encoding: EncodingConfig = EncodingConfig()
    width: int = 256
    n_hidden: int = 9
    skip_at: int | None = 4   # the encoded input re-enters this hidden layer
    dtype: str = "f32le"

    def validate(self):
        self.encoding.validate()
        if self.width < 1 or self.n_hidden < 1:
            raise ValidationError("width and n_hidden must be positive",
                                  width=self.width, n_hidden=self.n_hidden)
        if self.skip_at is not None and not 0 < self.skip_at < self.n_hidden:
            raise ValidationError("skip_at must lie strictly inside the hidden stack",
                                  skip_at=self.skip_at, n_hidden=self.n_hidden)
        if self.dtype not in _DTYPES:
            raise ValidationError("dtype must be f32le or f64le", dtype=self.dtype)

    def layer_shapes(self):
        """(fan_in, fan_out) of every weight matrix, output layer last."""
        d = self.encoding.out_dim
        shapes = []
        for i in range(self.n_hidden):
            fan_in = d if i == 0 else self.width
            if self.skip_at is not None and i == self.skip_at:
                fan_in = self.width + d
            shapes.append((fan_in, self.width))
        shapes.append((self.width, 1))
        return shapes

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_shapes())


@dataclass
class FieldParams:
    cfg: FieldConfig
    weights: list
    biases: list

    @property
    def np_dtype(self):
        return _DTYPES[self.cfg.dtype]


def encode(points, cfg: EncodingConfig) -> np.ndarray:
    """Componentwise [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin, cos] encoding."""
    cfg.validate()
    p = np.asarray(points)
    lead = p.shape[:-1]
    p = p.reshape(-1, 3)
    parts = [p] if cfg.include_input else []
    for l in range(cfg.n_freqs):
        arg = (2.0**l * np.pi) * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1).reshape(*lead, cfg.out_dim)


def init_params(cfg: FieldConfig, seed=0) -> FieldParams:
    """Fan-in uniform init (variance 2 / fan_in), zero biases."""
    cfg.validate()
    rng = rng_from(seed, "field_init")
    dt = _DTYPES[cfg.dtype]
    weights, biases = [], []
    for fan_in, fan_out in cfg.layer_shapes():
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dt))
        biases.append(np.zeros(fan_out, dtype=dt))
    return FieldParams(cfg=cfg, weights=weights, biases=biases)


def forward_cached(params: FieldParams, points):
    """(densities (n,), cache). Points are cast to the parameter dtype."""
    cfg = params.cfg
    dt = params.np_dtype
    pts = np.asarray(points, dtype=dt).reshape(-1, 3)
    enc = encode(pts, cfg.encoding).astype(dt, copy=False)
    h = enc
    pre = []     # pre-activations of hidden layers
    acts = []    # post-activation outputs of hidden layers
    for i in range(cfg.n_hidden):
        x = np.concatenate([h, enc], axis=1) if (cfg.skip_at is not None and i == cfg.skip_at) else h
        z = x @ params.weights[i] + params.biases[i]
        h = np.maximum(z, 0)
        pre.append(z)
        acts.append(h)
    z_out = (h @ params.weights[-1] + params.biases[-1]).reshape(-1)
    sig = expit(z_out)
    return sig, {"enc": enc, "pre": pre, "acts": acts, "sig": sig}


def density(params: FieldParams, points) -> np.ndarray:
    """Density in (0, 1), shape-preserving over the leading axes."""
    pts = np.asarray(points)
    lead = pts.shape[:-1]
    sig, _ = forward_cached(params, pts.reshape(-1, 3))
    return sig.reshape(lead)


def zero_grads(params: FieldParams):
    return ([np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases])


def backward(params: FieldParams, cache, upstream):
    """Parameter gradients of sum_i upstream_i * density_i.

    Returns (dweights, dbiases) matching the parameter lists. Gradients
    of a batch are the sums of per-point gradients.
    """
    cfg = params.cfg
    g = np.asarray(upstream, dtype=params.np_dtype).reshape(-1)
    sig = cache["sig"]
    enc = cache["enc"]
    dz_out = (g * sig * (1.0 - sig))[:, None]
    h_last = cache["acts"][-1]
    dws = [None] * (cfg.n_hidden + 1)
    dbs = [None] * (cfg.n_hidden + 1)
    dws[-1] = h_last.T @ dz_out
    dbs[-1] = dz_out.sum(axis=0)
    dh = dz_out @ params.weights[-1].T
    for i in range(cfg.n_hidden - 1, -1, -1):
        dz = dh * (cache["pre"][i] > 0)
        if i == 0:
            x = enc
        elif cfg.skip_at is not None and i == cfg.skip_at:
            x = np.concatenate([cache["acts"][i - 1], enc], axis=1)
        else:
            x = cache["acts"][i - 1]
        dws[i] = x.T @ dz
        dbs[i] = dz.sum(axis=0)
        if i > 0:
            dx = dz @ params.weights[i].T
            if cfg.skip_at is not None and i == cfg.skip_at:
                dx = dx[:, : cfg.width]
            dh = dx
    return dws, dbs


def density_backward(params: FieldParams, points, upstream):
    """Convenience wrapper: forward then exact reverse pass."""
    _, cache = forward_cached(params, np.asarray(points).reshape(-1, 3))
    return backward(params, cache, upstream)


# --------------------------------------------------------------------------
# parameter vector helpers (finite differences, optimizers)
# --------------------------------------------------------------------------

def flatten(params: FieldParams) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.reshape(-1))
        parts.append(b.reshape(-1))
    return np.concatenate(parts)


def unflatten(cfg: FieldConfig, vec) -> FieldParams:
    dt = _DTYPES[cfg.dtype]
    vec = np.asarray(vec, dtype=dt)
    weights, biases = [], []
    k = 0
    for fan_in, fan_out in cfg.layer_shapes():
        weights.append(vec[k: k + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        k += fan_in * fan_out
        biases.append(vec[k: k + fan_out].copy())
        k += fan_out
    if k != vec.size:
        raise ValidationError("parameter vector length mismatch",
                              expected=cfg.n_params, actual=int(vec.size))
    return FieldParams(cfg=cfg, weights=weights, biases=biases)


def flatten_grads(grads) -> np.ndarray:
    dws, dbs = grads
    parts = []
    for w, b in zip(dws, dbs):
        parts.append(np.asarray(w).reshape(-1))
        parts.append(np.asarray(b).reshape(-1))
    return np.concatenate(parts)


def clone(params: FieldParams) -> FieldParams:
    return FieldParams(cfg=params.cfg,
                       weights=[w.copy() for w in params.weights],
                       biases=[b.copy() for b in params.biases])


def as_density_fn(params: FieldParams):
    return lambda pts: density(params, pts)


def reconstruct_volume(params: FieldParams, dims, chunk=1 << 19) -> VolumeGrid:
    """Densities at voxel centres of the cube-centred grid."""
    dims = tuple(int(d) for d in dims)
    spacing, origin = cube_grid_params(dims)
    ax = [origin[i] + spacing * np.arange(dims[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = np.empty(pts.shape[0], dtype=np.float32)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        vals[lo:hi] = density(params, pts[lo:hi])
    return VolumeGrid(data=vals.reshape(dims), spacing=spacing, origin=origin)


# --------------------------------------------------------------------------
# on-disk format: magic, version, JSON architecture header, raw payload
# --------------------------------------------------------------------------

def save_params(params: FieldParams, path) -> None:
    cfg = params.cfg
    header = {
        "kind": "field",
        "encoding": {"n_freqs": cfg.encoding.n_freqs,
                     "include_input": cfg.encoding.include_input},
        "width": cfg.width,
        "n_hidden": cfg.n_hidden,
        "skip_at": cfg.skip_at,
        "dtype": cfg.dtype,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    dt = params.np_dtype
    payload = b"".join(np.ascontiguousarray(a, dtype=dt).tobytes()
                       for w, b in zip(params.weights, params.biases) for a in (w, b))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(hb)))
        f.write(hb)
        f.write(payload)


def load_params(path) -> FieldParams:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise FileFormatError("not a field parameter file", path=str(path))
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != _VERSION:
        raise FileFormatError("unsupported field parameter version", version=version)
    header = json.loads(buf[12: 12 + hlen].decode("utf-8"))
    cfg = FieldConfig(
        encoding=EncodingConfig(n_freqs=int(header["encoding"]["n_freqs"]),
                                include_input=bool(header["encoding"]["include_input"])),
        width=int(header["width"]), n_hidden=int(header["n_hidden"]),
        skip_at=None if header["skip_at"] is None else int(header["skip_at"]),
        dtype=header["dtype"])
    cfg.validate()
    dt = _DTYPES[cfg.dtype]
    vec = np.frombuffer(buf[12 + hlen:], dtype=dt)
    return unflatten(cfg, vec)
