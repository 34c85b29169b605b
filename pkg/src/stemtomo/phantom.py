"""Procedural ground-truth phantoms built from ellipsoidal shells.

A phantom is a list of rotated ellipsoidal shells (hollow membranes) plus
small solid ellipsoids standing in for dense particles. Densities combine
by maximum, so overlapping structures never exceed the densest member.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, ValidationError, VolumeGrid, cube_grid_params, rng_from


def rotation_from_euler(angles_rad) -> np.ndarray:
    """Rotation matrix R = Rz(c) @ Ry(b) @ Rx(a) for angles (a, b, c)."""
    a, b, c = (float(v) for v in angles_rad)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Shell:
    """One ellipsoidal component.

    ``thickness`` is the fraction of each radius occupied by the shell
    band; the inner ellipsoid has radii ``radii * (1 - thickness)``.
    Solid components fill their whole interior and ignore thickness.
    """

    center: tuple
    radii: tuple
    euler_rad: tuple = (0.0, 0.0, 0.0)
    thickness: float = 0.25
    density: float = 1.0
    solid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "radii", tuple(float(v) for v in self.radii))
        object.__setattr__(self, "euler_rad", tuple(float(v) for v in self.euler_rad))
        object.__setattr__(self, "thickness", float(self.thickness))
        object.__setattr__(self, "density", float(self.density))
        if len(self.center) != 3 or len(self.radii) != 3 or len(self.euler_rad) != 3:
            raise ValidationError("center, radii and euler_rad must be 3-vectors")
        if min(self.radii) <= 0:
            raise ValidationError("radii must be positive", radii=self.radii)
        if not self.solid and not 0.0 < self.thickness < 1.0:
            raise ValidationError("shell thickness must lie in (0, 1)",
                                  thickness=self.thickness)
        if not 0.0 < self.density <= 1.0:
            raise ValidationError("density must lie in (0, 1]", density=self.density)
        if max(abs(c) for c in self.center) + max(self.radii) > 1.0 + 1e-12:
            raise ValidationError("component must fit inside the [-1, 1] cube",
                                  center=self.center, radii=self.radii)

    def to_json(self):
        return {"center": list(self.center), "radii": list(self.radii),
                "euler_rad": list(self.euler_rad), "thickness": self.thickness,
                "density": self.density, "solid": self.solid}

    @classmethod
    def from_json(cls, d):
        return cls(center=tuple(d["center"]), radii=tuple(d["radii"]),
                   euler_rad=tuple(d.get("euler_rad", (0, 0, 0))),
                   thickness=float(d.get("thickness", 0.25)),
                   density=float(d["density"]), solid=bool(d.get("solid", False)))


@dataclass
class PhantomSpec:
    """Exact description of one phantom: components plus generating seed."""

    shells: list
    seed: int = 0

    def __post_init__(self):
        if not self.shells:
            raise ValidationError("phantom needs at least one component")
        sig = {(s.center, s.radii, s.euler_rad, s.thickness, s.density, s.solid)
               for s in self.shells}
        if len(sig) != len(self.shells):
            raise ValidationError("phantom components must be pairwise distinct")

    def to_json(self):
        return {"seed": int(self.seed), "shells": [s.to_json() for s in self.shells]}

    @classmethod
    def from_json(cls, d):
        return cls(shells=[Shell.from_json(s) for s in d["shells"]],
                   seed=int(d.get("seed", 0)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class PhantomConfig:
    """Sampling ranges for random phantom generation."""

    n_shells: tuple = (3, 5)
    radius_range: tuple = (0.25, 0.65)
    aspect_range: tuple = (0.55, 1.0)      # per-axis radius multiplier
    thickness_range: tuple = (0.12, 0.3)
    density_range: tuple = (0.35, 0.9)
    n_solids: tuple = (3, 6)
    solid_radius_range: tuple = (0.04, 0.1)
    solid_density_range: tuple = (0.7, 1.0)
    center_margin: float = 0.02
    seed: int = 0

    def validate(self):
        bad = []
        for name in ("n_shells", "radius_range", "aspect_range", "thickness_range",
                     "density_range", "n_solids", "solid_radius_range",
                     "solid_density_range"):
            lohi = getattr(self, name)
            if len(lohi) != 2 or lohi[0] > lohi[1]:
                bad.append(name)
        if self.n_shells[0] + self.n_solids[0] < 1:
            bad.append("n_shells")
        if self.radius_range[1] + self.center_margin > 1.0:
            bad.append("radius_range")
        if self.solid_radius_range[1] + self.center_margin > 1.0:
            bad.append("solid_radius_range")
        if not 0.0 < self.thickness_range[0] <= self.thickness_range[1] < 1.0:
            bad.append("thickness_range")
        if not 0.0 < self.density_range[0] <= self.density_range[1] <= 1.0:
            bad.append("density_range")
        if not 0.0 < self.solid_density_range[0] <= self.solid_density_range[1] <= 1.0:
            bad.append("solid_density_range")
        if bad:
            raise ConfigError("invalid phantom generation ranges", fields=sorted(set(bad)))


def generate_phantom(cfg: PhantomConfig) -> PhantomSpec:
    """Deterministic random phantom for (cfg, cfg.seed)."""
    cfg.validate()
    rng = rng_from(cfg.seed, "phantom")

    def draw(lo, hi):
        return float(rng.uniform(lo, hi))

    def draw_component(radius_range, density_range, solid):
        r_major = draw(*radius_range)
        radii = tuple(r_major * draw(*cfg.aspect_range) for _ in range(3))
        # keep the longest axis at the drawn major radius
        scale = r_major / max(radii)
        radii = tuple(r * scale for r in radii)
        limit = 1.0 - max(radii) - cfg.center_margin
        center = tuple(draw(-limit, limit) for _ in range(3))
        euler = tuple(draw(0.0, 2.0 * math.pi) for _ in range(3))
        return Shell(center=center, radii=radii, euler_rad=euler,
                     thickness=1.0 if solid else draw(*cfg.thickness_range),
                     density=draw(*density_range), solid=solid)

    shells = []
    for _ in range(int(rng.integers(cfg.n_shells[0], cfg.n_shells[1] + 1))):
        shells.append(draw_component(cfg.radius_range, cfg.density_range, solid=False))
    for _ in range(int(rng.integers(cfg.n_solids[0], cfg.n_solids[1] + 1))):
        shells.append(draw_component(cfg.solid_radius_range,
                                     cfg.solid_density_range, solid=True))
    return PhantomSpec(shells=shells, seed=cfg.seed)


def density_at(spec: PhantomSpec, points) -> np.ndarray:
    """Density at arbitrary points, shape-preserving over the leading axes.

    A point inside a shell band (or a solid interior) contributes that
    component's density; overlaps resolve to the maximum. Points outside
    the cube return 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    p = pts.reshape(-1, 3)
    out = np.zeros(p.shape[0], dtype=np.float64)
    inside_cube = np.max(np.abs(p), axis=1) <= 1.0
    for s in spec.shells:
        rot = rotation_from_euler(s.euler_rad)
        q = (p - np.asarray(s.center)) @ rot  # body frame: R^T (p - c)
        m_outer = np.einsum("ij,ij->i", q / np.asarray(s.radii), q / np.asarray(s.radii))
        hit = m_outer <= 1.0
        if not s.solid:
            inner = np.asarray(s.radii) * (1.0 - s.thickness)
            m_inner = np.einsum("ij,ij->i", q / inner, q / inner)
            hit &= m_inner >= 1.0
        np.maximum(out, np.where(hit, s.density, 0.0), out=out)
    out[~inside_cube] = 0.0
    return out.reshape(lead)


def density_fn(spec: PhantomSpec):
    """Closure with the (points) -> densities signature the renderer expects."""
    return lambda pts: density_at(spec, pts)


def rasterize(spec: PhantomSpec, dims, chunk=1 << 20) -> VolumeGrid:
    """Sample the phantom at voxel centres of a cube-centred grid."""
    dims = tuple(int(d) for d in dims)
    if any(d < 2 for d in dims):
        raise ValidationError("rasterize needs at least 2 voxels per axis", dims=dims)
    spacing, origin = cube_grid_params(dims)
    ax = [origin[i] + spacing * np.arange(dims[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = np.empty(pts.shape[0], dtype=np.float32)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        vals[lo:hi] = density_at(spec, pts[lo:hi])
    return VolumeGrid(data=vals.reshape(dims), spacing=spacing, origin=origin)
