"""Shared data model: density grids, tilt series, rays, seeded RNG streams, file I/O.

Conventions used throughout the package:

* The reconstruction volume lives in the cube ``[-1, 1]^3`` (model units).
* The tilt axis is the image vertical (y); the beam travels along +z at
  zero tilt and is rotated by ``-alpha`` about y for tilt angle ``alpha``.
* Volume payloads are little-endian float32, row-major with z fastest,
  i.e. a C-contiguous array of shape ``(nx, ny, nz)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class StemtomoError(Exception):
    """Base error with a machine-readable code and a detail mapping."""

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_json(self):
        return {"error": self.code, "message": self.message, "details": self.details}


class ValidationError(StemtomoError):
    code = "validation"


class ConfigError(StemtomoError):
    """Bad configuration. ``fields`` lists every violated entry."""

    code = "config"

    def __init__(self, message, fields=(), **details):
        super().__init__(message, fields=list(fields), **details)
        self.fields = list(fields)


class FileFormatError(StemtomoError):
    code = "io"


class NumericError(StemtomoError):
    code = "numeric"


class TrainingError(StemtomoError):
    code = "training"


# --------------------------------------------------------------------------
# seeding
# --------------------------------------------------------------------------

_U64 = 0xFFFFFFFFFFFFFFFF


def check_seed(seed) -> int:
    """Validate a 64-bit unsigned seed and return it as int.

    Accepts integer types only; a float seed is almost always a config
    mistake, so it is rejected instead of truncated.
    """
    try:
        s = operator.index(seed)
    except TypeError:
        raise ValidationError("seed must be an integer", seed=repr(seed)) from None
    if not 0 <= s <= _U64:
        raise ValidationError("seed must fit in 64 bits", seed=s)
    return s


def rng_from(seed, *tags) -> np.random.Generator:
    """Derived generator for stream (seed, *tags).

    Tags may be ints or short strings; strings are hashed so stream
    identity does not depend on the process hash seed. Identical
    (seed, tags) always yields an identical stream, which is what makes
    renders and training runs reproducible regardless of evaluation
    order.
    """
    entropy = [check_seed(seed)]
    for t in tags:
        if isinstance(t, str):
            t = int.from_bytes(hashlib.sha256(t.encode("utf-8")).digest()[:8], "little")
        entropy.append(int(t) & _U64)
    return np.random.default_rng(np.random.SeedSequence(entropy))


# --------------------------------------------------------------------------
# grid / tilt-series types
# --------------------------------------------------------------------------

def cube_grid_params(dims):
    """(spacing, origin) for a grid of ``dims`` voxels centred on the cube.

    Spacing is isotropic, chosen so the largest axis spans [-1, 1];
    origin is the centre of voxel (0, 0, 0).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValidationError("dims must be three positive ints", dims=dims)
    spacing = 2.0 / max(dims)
    origin = tuple(-0.5 * n * spacing + 0.5 * spacing for n in dims)
    return spacing, origin


def voxel_centers(dims, spacing=None, origin=None):
    """Voxel-centre coordinates, shape ``dims + (3,)``."""
    dims = tuple(int(d) for d in dims)
    if spacing is None or origin is None:
        spacing, origin = cube_grid_params(dims)
    ax = [origin[i] + spacing * np.arange(dims[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


@dataclass
class VolumeGrid:
    """Voxel grid of densities.

    ``data`` is float32 with shape (nx, ny, nz); C order makes z the
    fastest axis, matching the on-disk payload. ``origin`` is the
    coordinate of the centre of voxel (0, 0, 0), ``spacing`` the edge
    length of a voxel in model units.
    """

    data: np.ndarray
    spacing: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ValidationError("volume data must be 3-d", shape=list(a.shape))
        if not np.isfinite(a).all():
            raise ValidationError("volume data must be finite")
        self.data = np.ascontiguousarray(a, dtype=np.float32)
        self.spacing = float(self.spacing)
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValidationError("spacing must be positive", spacing=self.spacing)
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.origin) != 3:
            raise ValidationError("origin must be a 3-vector", origin=self.origin)

    @property
    def dims(self):
        return self.data.shape

    @classmethod
    def cube(cls, data):
        """Grid centred on the [-1, 1] cube (spacing from the largest axis)."""
        spacing, origin = cube_grid_params(np.shape(data))
        return cls(data=data, spacing=spacing, origin=origin)


@dataclass
class TiltSeries:
    """Single-axis tilt series. The tilt axis is the image vertical (y).

    ``images`` is (n_tilts, height, width) float32. ``angles_deg`` must be
    strictly increasing with every |angle| < 90. ``residual_angles_deg``
    holds optional per-tilt residual tilt used by the defocus model.
    Clean renders lie in (0, 1]; noisy stacks may leave that range.
    """

    images: np.ndarray
    angles_deg: np.ndarray
    pixel_spacing: float
    residual_angles_deg: np.ndarray | None = None

    def __post_init__(self):
        imgs = np.asarray(self.images)
        if imgs.ndim != 3:
            raise ValidationError("images must be (n, height, width)", shape=list(imgs.shape))
        if not np.isfinite(imgs).all():
            raise ValidationError("images must be finite")
        self.images = np.ascontiguousarray(imgs, dtype=np.float32)
        ang = np.asarray(self.angles_deg, dtype=np.float64).reshape(-1)
        if ang.shape[0] != imgs.shape[0]:
            raise ValidationError(
                "angle count must match image count",
                n_angles=int(ang.shape[0]), n_images=int(imgs.shape[0]))
        if ang.size and not np.all(np.diff(ang) > 0):
            raise ValidationError("angles must be strictly increasing")
        if ang.size and np.max(np.abs(ang)) >= 90.0:
            raise ValidationError("tilt angles must satisfy |angle| < 90 deg")
        self.angles_deg = ang
        self.pixel_spacing = float(self.pixel_spacing)
        if not (self.pixel_spacing > 0 and math.isfinite(self.pixel_spacing)):
            raise ValidationError("pixel_spacing must be positive",
                                  pixel_spacing=self.pixel_spacing)
        if self.residual_angles_deg is not None:
            res = np.asarray(self.residual_angles_deg, dtype=np.float64).reshape(-1)
            if res.shape[0] != imgs.shape[0]:
                raise ValidationError("residual angle count must match image count")
            if res.size and np.max(np.abs(res)) >= 90.0:
                raise ValidationError("residual angles must satisfy |beta| < 90 deg")
            self.residual_angles_deg = res

    @property
    def n_tilts(self):
        return self.images.shape[0]

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def residual_for(self, tilt_index) -> float:
        if self.residual_angles_deg is None:
            return 0.0
        return float(self.residual_angles_deg[tilt_index])

    def with_images(self, images) -> "TiltSeries":
        return TiltSeries(images=images, angles_deg=self.angles_deg.copy(),
                          pixel_spacing=self.pixel_spacing,
                          residual_angles_deg=None if self.residual_angles_deg is None
                          else self.residual_angles_deg.copy())


@dataclass
class Ray:
    """Parallel-beam ray, unit direction, clipped to the volume cube."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-12:
            raise ValidationError("ray direction must be unit length", norm=n)
        self.t_near = float(self.t_near)
        self.t_far = float(self.t_far)
        if not self.t_near <= self.t_far:
            raise ValidationError("t_near must not exceed t_far",
                                  t_near=self.t_near, t_far=self.t_far)


# --------------------------------------------------------------------------
# ray geometry
# --------------------------------------------------------------------------

def tilt_direction(angle_deg) -> np.ndarray:
    """Beam direction for a tilt angle: R_y(-alpha) applied to (0, 0, 1)."""
    a = math.radians(float(angle_deg))
    return np.array([-math.sin(a), 0.0, math.cos(a)], dtype=np.float64)


def clip_to_cube(origins, direction, lo=-1.0, hi=1.0):
    """Slab-clip rays against the cube. Returns (t_near, t_far) arrays.

    Rays that miss the cube get t_near == t_far == 0.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    tmin = np.full(o.shape[0], -np.inf)
    tmax = np.full(o.shape[0], np.inf)
    for ax in range(3):
        if abs(d[ax]) < 1e-300:
            miss = (o[:, ax] < lo) | (o[:, ax] > hi)
            tmin = np.where(miss, np.inf, tmin)
            continue
        t1 = (lo - o[:, ax]) / d[ax]
        t2 = (hi - o[:, ax]) / d[ax]
        tmin = np.maximum(tmin, np.minimum(t1, t2))
        tmax = np.minimum(tmax, np.maximum(t1, t2))
    miss = ~(tmin <= tmax)
    tmin = np.where(miss, 0.0, tmin)
    tmax = np.where(miss, 0.0, tmax)
    return tmin, tmax


@dataclass(frozen=True)
class Geometry:
    """Detector geometry shared by rendering and reconstruction."""

    width: int
    height: int
    pixel_spacing: float
    angles_deg: tuple
    residual_angles_deg: tuple | None = None

    @classmethod
    def of(cls, ts: TiltSeries) -> "Geometry":
        return cls(width=ts.width, height=ts.height,
                   pixel_spacing=ts.pixel_spacing,
                   angles_deg=tuple(float(a) for a in ts.angles_deg),
                   residual_angles_deg=None if ts.residual_angles_deg is None
                   else tuple(float(b) for b in ts.residual_angles_deg))

    def residual_for(self, tilt_index) -> float:
        if self.residual_angles_deg is None:
            return 0.0
        return float(self.residual_angles_deg[tilt_index])

    def pixel_uv(self, px, py, jitter=None):
        """Image-plane coordinates of pixel centres (+ optional jitter), model units."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        u = (px + 0.5 - 0.5 * self.width) * self.pixel_spacing
        v = (py + 0.5 - 0.5 * self.height) * self.pixel_spacing
        if jitter is not None:
            j = np.asarray(jitter, dtype=np.float64)
            u = u + j[..., 0]
            v = v + j[..., 1]
        return u, v


def rays_for_pixels(geom: Geometry, tilt_index, px, py, jitter=None):
    """Vectorised pixel rays for one tilt.

    Returns (origins (n, 3), direction (3,), t_near (n,), t_far (n,)).
    The parallel beam shares one direction per tilt; each origin is the
    rotated image-plane point of its (possibly jittered) pixel centre.
    """
    tilt_index = int(tilt_index)
    if not 0 <= tilt_index < len(geom.angles_deg):
        raise IndexError(f"tilt index {tilt_index} out of range")
    angle = float(geom.angles_deg[tilt_index])
    if abs(angle) >= 90.0:
        raise ValidationError("tilt angles must satisfy |angle| < 90 deg", angle=angle)
    px = np.asarray(px)
    py = np.asarray(py)
    if np.any(px < 0) or np.any(px >= geom.width) or np.any(py < 0) or np.any(py >= geom.height):
        raise IndexError("pixel index outside image")
    u, v = geom.pixel_uv(px, py, jitter)
    a = math.radians(angle)
    origins = np.stack([u * math.cos(a), v, u * math.sin(a)], axis=-1).reshape(-1, 3)
    direction = tilt_direction(angle)
    t_near, t_far = clip_to_cube(origins, direction)
    return origins, direction, t_near, t_far


def rays_for_batch(geom: Geometry, tilts, px, py, jitter=None):
    """Pixel rays for a mixed-tilt batch: one direction per ray.

    Returns (origins (n, 3), directions (n, 3), t_near (n,), t_far (n,)),
    slab-clipped like :func:`clip_to_cube` (misses collapse to 0-length).
    """
    ang = np.radians(np.asarray(geom.angles_deg, dtype=np.float64))[np.asarray(tilts)]
    u = (np.asarray(px, dtype=np.float64) + 0.5 - 0.5 * geom.width) * geom.pixel_spacing
    v = (np.asarray(py, dtype=np.float64) + 0.5 - 0.5 * geom.height) * geom.pixel_spacing
    if jitter is not None:
        j = np.asarray(jitter, dtype=np.float64)
        u = u + j[:, 0]
        v = v + j[:, 1]
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    origins = np.stack([u * cos_a, v, u * sin_a], axis=1)
    dirs = np.stack([-sin_a, np.zeros_like(ang), cos_a], axis=1)
    tmin = np.full(ang.shape, -np.inf)
    tmax = np.full(ang.shape, np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = origins[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-1.0 - o) / d
            t2 = (1.0 - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        zero = np.abs(d) < 1e-300
        inside = (o >= -1.0) & (o <= 1.0)
        lo = np.where(zero, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(zero, np.where(inside, np.inf, -np.inf), hi)
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    miss = ~(tmin <= tmax)
    tmin = np.where(miss, 0.0, tmin)
    tmax = np.where(miss, 0.0, tmax)
    return origins, dirs, tmin, tmax


def ray_for_pixel(geom: Geometry, tilt_index, px, py, jitter=(0.0, 0.0)) -> Ray:
    """Ray through one pixel centre plus jitter (image-plane model units)."""
    j = np.asarray(jitter, dtype=np.float64).reshape(1, 2)
    origins, direction, tn, tf = rays_for_pixels(
        geom, tilt_index, np.asarray([px]), np.asarray([py]), j)
    return Ray(origin=origins[0], direction=direction,
               t_near=float(tn[0]), t_far=float(tf[0]))


# --------------------------------------------------------------------------
# file I/O: .vol / .stk  (JSON sidecar + raw little-endian float32 payload)
# --------------------------------------------------------------------------

def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def _write_sidecar(path: Path, meta: dict):
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_sidecar(path: Path) -> dict:
    if not path.exists():
        raise FileFormatError("sidecar not found", path=str(path))
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FileFormatError("sidecar is not valid JSON", path=str(path), reason=str(e))


def _read_payload(raw_path: Path, sidecar: dict, n_expected: int, what: str) -> np.ndarray:
    if not raw_path.exists():
        raise FileFormatError("payload not found", path=str(raw_path))
    buf = raw_path.read_bytes()
    if sidecar.get("dtype") != "f32le":
        raise FileFormatError("unsupported payload dtype",
                              dtype=sidecar.get("dtype"), path=str(raw_path))
    if len(buf) != 4 * n_expected:
        raise FileFormatError(
            f"{what} payload size does not match sidecar dims",
            expected_bytes=4 * n_expected, actual_bytes=len(buf), path=str(raw_path))
    digest = sidecar.get("sha256")
    if digest is not None and digest != _sha256(buf):
        raise FileFormatError("payload checksum mismatch", path=str(raw_path))
    data = np.frombuffer(buf, dtype="<f4")
    if np.isnan(data).any():
        raise ValidationError(f"{what} payload contains NaN", path=str(raw_path))
    return data


def write_volume(grid: VolumeGrid, path) -> None:
    """Write ``path`` (JSON sidecar) and ``path + '.raw'`` (f32le payload)."""
    path = Path(path)
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    meta = {
        "dims": [int(d) for d in grid.dims],
        "spacing": grid.spacing,
        "origin": list(grid.origin),
        "dtype": "f32le",
        "sha256": _sha256(payload),
    }
    Path(str(path) + ".raw").write_bytes(payload)
    _write_sidecar(path, meta)


def read_volume(path) -> VolumeGrid:
    path = Path(path)
    meta = _read_sidecar(path)
    for key in ("dims", "spacing", "origin", "dtype"):
        if key not in meta:
            raise FileFormatError("sidecar missing key", key=key, path=str(path))
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FileFormatError("sidecar dims invalid", dims=list(dims), path=str(path))
    data = _read_payload(Path(str(path) + ".raw"), meta,
                         dims[0] * dims[1] * dims[2], "volume")
    return VolumeGrid(data=data.reshape(dims), spacing=float(meta["spacing"]),
                      origin=tuple(meta["origin"]))


def write_stack(ts: TiltSeries, path) -> None:
    """Write ``path`` (JSON sidecar) and ``path + '.raw'`` (f32le payload)."""
    path = Path(path)
    payload = np.ascontiguousarray(ts.images, dtype="<f4").tobytes()
    meta = {
        "angles_deg": [float(a) for a in ts.angles_deg],
        "pixel_spacing": ts.pixel_spacing,
        "width": int(ts.width),
        "height": int(ts.height),
        "n_images": int(ts.n_tilts),
        "dtype": "f32le",
        "sha256": _sha256(payload),
    }
    if ts.residual_angles_deg is not None:
        meta["residual_angles_deg"] = [float(b) for b in ts.residual_angles_deg]
    Path(str(path) + ".raw").write_bytes(payload)
    _write_sidecar(path, meta)


def read_stack(path) -> TiltSeries:
    path = Path(path)
    meta = _read_sidecar(path)
    for key in ("angles_deg", "pixel_spacing", "width", "height", "dtype"):
        if key not in meta:
            raise FileFormatError("sidecar missing key", key=key, path=str(path))
    w = int(meta["width"])
    h = int(meta["height"])
    angles = list(meta["angles_deg"])
    n = len(angles)
    if w < 1 or h < 1 or n < 1:
        raise FileFormatError("sidecar geometry invalid", path=str(path))
    if "n_images" in meta and int(meta["n_images"]) != n:
        raise ValidationError("angle count must match image count",
                              n_angles=n, n_images=int(meta["n_images"]), path=str(path))
    data = _read_payload(Path(str(path) + ".raw"), meta, n * h * w, "stack")
    return TiltSeries(images=data.reshape(n, h, w), angles_deg=np.asarray(angles),
                      pixel_spacing=float(meta["pixel_spacing"]),
                      residual_angles_deg=meta.get("residual_angles_deg"))
