"""Report figures rendered to files next to the JSON/CSV outputs.

Everything uses the Agg backend; nothing here opens a window.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend pinned first)

from . import noiseflow
from .core import VolumeGrid


def save_eval_figure(report, recon: VolumeGrid, truth: VolumeGrid, path) -> None:
    """Central-slice triptych plus per-image PSNR bars for one method."""
    k = recon.dims[2] // 2
    r_sl = recon.data[:, :, k] + report.offsets["volume"]
    t_sl = truth.data[:, :, k]
    lim = max(1e-6, float(np.abs(r_sl - t_sl).max()))
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.2))
    for ax, img, title in ((axes[0], t_sl, "truth"),
                           (axes[1], r_sl, report.method),
                           (axes[2], r_sl - t_sl, "difference")):
        im = ax.imshow(img.T, origin="lower", cmap="magma" if title != "difference" else "coolwarm",
                       vmin=-lim if title == "difference" else 0.0,
                       vmax=lim if title == "difference" else 1.0)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    vals = [m["psnr_db"] for m in (report.per_image or [])]
    if vals:
        finite = [v for v in vals if np.isfinite(v)]
        top = max(finite) * 1.1 if finite else 1.0
        axes[3].bar(range(len(vals)), np.clip(vals, 0, top), color="#4878cf")
        axes[3].set_xlabel("test image")
        axes[3].set_ylabel("PSNR (dB)")
        axes[3].set_title("per-image 2D PSNR")
    else:
        axes[3].axis("off")
    fig.suptitle(f"{report.method}: 3D PSNR {report.vol_3d['psnr_db']:.2f} dB")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_noise_figure(e, residual, flow, path, baselines=(), n_bins=60) -> None:
    """Residual histograms in three conditioner bands with model overlays.

    ``baselines`` is a sequence of (label, ScalarNoiseBaseline).
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    residual = np.asarray(residual, dtype=np.float64).reshape(-1)
    edges = np.quantile(e, [0.0, 1 / 3, 2 / 3, 1.0])
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4), sharey=True)
    for ax, lo, hi in zip(axes, edges[:-1], edges[1:]):
        sel = (e >= lo) & (e <= hi)
        r_sel = residual[sel]
        if r_sel.size < 10:
            ax.axis("off")
            continue
        ax.hist(r_sel, bins=n_bins, density=True, color="#c0c0c0",
                label="observed")
        grid = np.linspace(r_sel.min(), r_sel.max(), 400)
        e_mid = np.full(grid.shape, float(np.median(e[sel])))
        ax.plot(grid, np.exp(noiseflow.log_prob(flow, grid, e_mid)),
                color="#d1495b", lw=1.8, label="flow")
        for label, model in baselines:
            ax.plot(grid, np.exp(model.log_prob(grid, e_mid)), lw=1.2,
                    ls="--", label=label)
        ax.set_title(f"E in [{lo:.2f}, {hi:.2f}]")
        ax.set_xlabel("residual")
    axes[0].set_ylabel("density")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_training_curve(report, path) -> None:
    """Validation loss against iteration, best checkpoint marked."""
    its = [c["iteration"] for c in report.checkpoints]
    vals = [c["val_loss"] for c in report.checkpoints]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    ax.plot(its, vals, marker="o", ms=3, color="#4878cf", label="validation")
    ax.plot([c["iteration"] for c in report.checkpoints],
            [c["train_loss_ema"] for c in report.checkpoints],
            color="#9aa0a6", lw=1.0, label="train (EMA)")
    ax.axvline(report.best_iteration, color="#d1495b", ls=":", lw=1.2,
               label=f"best @ {report.best_iteration}")
    ax.set_xlabel("iteration")
    ax.set_ylabel(report.config.get("loss", "loss"))
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
