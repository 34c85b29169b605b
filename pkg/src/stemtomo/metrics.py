"""Reconstruction and distribution metrics.

Reporting conventions: mean squared error is scaled by 100 and PSNR
always equals -10 * log10(mse_x100 / 100) for the same pair, an identity
every report is required to satisfy exactly. Structural dissimilarity is
(1 - SSIM) / 2 scaled by 10 (ordinal use). Distribution distances are
histogram based with shared binning over the union support.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .core import TiltSeries, ValidationError, VolumeGrid

_SSIM_WIN = 7
_SSIM_SIGMA = 1.5
_MIN_HIST_SAMPLES = 1000


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("metric inputs must share a shape",
                              a=list(a.shape), b=list(b.shape))
    return a, b


def mse_x100(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2) * 100.0)


def psnr_db(a, b) -> float:
    """-10 log10(MSE) against peak 1; identical inputs give +inf."""
    m = mse_x100(a, b) / 100.0
    if m == 0.0:
        return math.inf
    return -10.0 * math.log10(m)


def _gaussian_window(size=_SSIM_WIN, sigma=_SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b) -> float:
    """Mean SSIM with a 7x7 Gaussian window, dynamic range 1, interior only."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValidationError("ssim expects 2-d images", ndim=a.ndim)
    pad = _SSIM_WIN // 2
    if min(a.shape) < _SSIM_WIN:
        raise ValidationError("image smaller than the SSIM window",
                              shape=list(a.shape))
    win = _gaussian_window()
    c1 = (0.01) ** 2
    c2 = (0.03) ** 2

    def filt(x):
        return correlate(x, win, mode="constant")[pad:-pad, pad:-pad]

    mu_a = filt(a)
    mu_b = filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def dssim_x10(a, b) -> float:
    """(1 - SSIM) / 2, scaled by 10."""
    return 10.0 * (1.0 - ssim(a, b)) / 2.0


# --------------------------------------------------------------------------
# distribution distances
# --------------------------------------------------------------------------

def _shared_histograms(p_samples, q_samples, n_bins):
    p = np.asarray(p_samples, dtype=np.float64).reshape(-1)
    q = np.asarray(q_samples, dtype=np.float64).reshape(-1)
    if p.size < _MIN_HIST_SAMPLES or q.size < _MIN_HIST_SAMPLES:
        raise ValidationError("histogram distances need >= 1000 samples per arm",
                              n_p=int(p.size), n_q=int(q.size))
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if lo == hi:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, n_bins + 1)
    ph, _ = np.histogram(p, bins=edges)
    qh, _ = np.histogram(q, bins=edges)
    return ph / p.size, qh / q.size


def jsd(p_samples, q_samples, n_bins=64) -> float:
    """Jensen-Shannon divergence (natural log) between sample sets."""
    p, q = _shared_histograms(p_samples, q_samples, n_bins)
    m = 0.5 * (p + q)

    def kl(x, y):
        mask = x > 0
        return float(np.sum(x[mask] * np.log(x[mask] / y[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def bhattacharyya(p_samples, q_samples, n_bins=64):
    """(coefficient, distance): BC = sum sqrt(p q), distance = -ln BC.

    Disjoint supports give coefficient 0 and distance +inf.
    """
    p, q = _shared_histograms(p_samples, q_samples, n_bins)
    bc = float(np.sum(np.sqrt(p * q)))
    if bc <= 0.0:
        return 0.0, math.inf
    return bc, -math.log(bc)


# --------------------------------------------------------------------------
# evaluation report
# --------------------------------------------------------------------------

def align_offset(recon, truth) -> float:
    """Scalar shift minimising MSE of recon + shift against truth."""
    recon, truth = _pair(recon, truth)
    return float(truth.mean() - recon.mean())


def _metric_entry(recon, truth, with_dssim):
    m = mse_x100(recon, truth)
    p = math.inf if m == 0.0 else -10.0 * math.log10(m / 100.0)
    entry = {"psnr_db": p, "mse_x100": m}
    if with_dssim:
        entry["dssim_x10"] = dssim_x10(recon, truth)
    return entry


@dataclass
class MetricsReport:
    """Everything one evaluation emits; see to_json for the layout."""

    method: str
    offsets: dict = field(default_factory=dict)
    per_image: list | None = None
    mean_2d: dict | None = None
    vol_3d: dict | None = None
    loss_label: str = ""

    def check_identity(self, tol=1e-9):
        """PSNR must equal -10 log10(mse_x100 / 100) on every pair."""
        pairs = list(self.per_image or [])
        if self.mean_2d:
            pairs.append(self.mean_2d)
        if self.vol_3d:
            pairs.append(self.vol_3d)
        for entry in pairs:
            m = entry["mse_x100"]
            want = math.inf if m == 0.0 else -10.0 * math.log10(m / 100.0)
            got = entry["psnr_db"]
            if math.isinf(want) and math.isinf(got):
                continue
            if abs(want - got) > tol:
                raise ValidationError("psnr/mse consistency violated",
                                      psnr_db=got, mse_x100=m)

    def to_json(self):
        self.check_identity()
        return _sanitize({
            "method": self.method,
            "loss": self.loss_label,
            "offsets": self.offsets,
            "n_images": len(self.per_image) if self.per_image is not None else 0,
            "per_image": self.per_image,
            "mean_2d": self.mean_2d,
            "vol_3d": self.vol_3d,
        })

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def csv_row(self):
        m2 = self.mean_2d or {}
        v3 = self.vol_3d or {}
        return {
            "method": self.method,
            "loss": self.loss_label,
            "psnr2d_db": _fmt(m2.get("psnr_db")),
            "mse2d_x100": _fmt(m2.get("mse_x100")),
            "dssim2d_x10": _fmt(m2.get("dssim_x10")),
            "psnr3d_db": _fmt(v3.get("psnr_db")),
            "mse3d_x100": _fmt(v3.get("mse_x100")),
            "offset_volume": _fmt(self.offsets.get("volume")),
            "offset_images": _fmt(self.offsets.get("images")),
        }

    def save_csv(self, path, append=False):
        self.check_identity()
        path = Path(path)
        row = self.csv_row()
        exists = append and path.exists()
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(row.keys()))
            if not exists:
                writer.writeheader()
            writer.writerow(row)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def evaluate(method, recon_vol: VolumeGrid | None = None,
             truth_vol: VolumeGrid | None = None,
             recon_stack=None, truth_stack=None,
             align=True, loss_label="") -> MetricsReport:
    """Offset-aligned metrics for a volume pair and/or an image-stack pair.

    Alignment fits one scalar shift per domain (volume, images) and is
    applied identically whatever produced the reconstruction.
    """
    report = MetricsReport(method=method, loss_label=loss_label)
    if (recon_vol is None) != (truth_vol is None):
        raise ValidationError("volume evaluation needs both recon and truth")
    if (recon_stack is None) != (truth_stack is None):
        raise ValidationError("stack evaluation needs both recon and truth")
    if recon_vol is not None:
        r = recon_vol.data.astype(np.float64)
        t = truth_vol.data.astype(np.float64)
        off = align_offset(r, t) if align else 0.0
        report.offsets["volume"] = off
        report.vol_3d = _metric_entry(r + off, t, with_dssim=False)
    if recon_stack is not None:
        r = (recon_stack.images if isinstance(recon_stack, TiltSeries)
             else np.asarray(recon_stack)).astype(np.float64)
        t = (truth_stack.images if isinstance(truth_stack, TiltSeries)
             else np.asarray(truth_stack)).astype(np.float64)
        if r.shape != t.shape:
            raise ValidationError("stack shapes must match",
                                  recon=list(r.shape), truth=list(t.shape))
        off = align_offset(r, t) if align else 0.0
        report.offsets["images"] = off
        report.per_image = [
            _metric_entry(r[i] + off, t[i], with_dssim=True)
            for i in range(r.shape[0])
        ]
        mean_mse = float(np.mean([e["mse_x100"] for e in report.per_image]))
        mean_entry = {
            "psnr_db": math.inf if mean_mse == 0.0
            else -10.0 * math.log10(mean_mse / 100.0),
            "mse_x100": mean_mse,
            "dssim_x10": float(np.mean([e["dssim_x10"] for e in report.per_image])),
        }
        report.mean_2d = mean_entry
    report.check_identity()
    return report
