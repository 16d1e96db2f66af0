"""Matplotlib figures for run reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import smoothed  # noqa: E402

golden = (np.sqrt(5) - 1.0) / 2.0
fig_width = 6.8
palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=palette),
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.0,
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "image.interpolation": "nearest",
}

ESTIMATORS = ("standard", "unbiased", "nearest", "first")


def _fig(nrows=1, ncols=1, height=None):
    with matplotlib.rc_context(params):
        h = height if height is not None else fig_width * golden / max(ncols, 1) * nrows
        return plt.subplots(nrows, ncols, figsize=(fig_width, h), squeeze=False)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(params):
        fig.savefig(path)
    plt.close(fig)
    return path


def loss_curves(history: list, path, beta: float = 0.99) -> Path:
    """Smoothed total loss and its terms against the iteration index."""
    fig, ax = _fig(1, 2, height=fig_width * golden * 0.5)
    it = np.array([r["iteration"] for r in history])
    total = np.array([r["total"] for r in history])
    ax[0, 0].plot(it, total, color="0.8", lw=0.5)
    ax[0, 0].plot(it, smoothed(total, beta), color=palette[0])
    ax[0, 0].set_yscale("log")
    ax[0, 0].set_xlabel("iteration")
    ax[0, 0].set_ylabel("total loss")
    for key in ("rgb", "trans", "normal_prior", "normal_consistency", "flatten"):
        v = np.array([r.get(key, np.nan) for r in history], dtype=float)
        if np.isfinite(v).any():
            ax[0, 1].plot(it, smoothed(np.nan_to_num(v), beta), label=key)
    stages = [r["stage"] for r in history]
    if 2 in stages and 1 in stages:
        edge = it[stages.index(2)]
        for a in ax[0]:
            a.axvline(edge, color="0.5", ls=":", lw=0.8)
    ax[0, 1].set_yscale("log")
    ax[0, 1].set_xlabel("iteration")
    ax[0, 1].legend(ncol=2)
    return _save(fig, path)


def depth_panels(maps: dict, truth: np.ndarray, path, footprint=None, span: float = 0.05) -> Path:
    """Signed error of each depth estimator against the analytic depth."""
    keys = [k for k in ESTIMATORS if k in maps]
    fig, ax = _fig(1, len(keys), height=fig_width / len(keys) * 1.15)
    im = None
    for a, k in zip(ax[0], keys):
        d = np.asarray(maps[k], dtype=float)
        err = np.where(d > 0, d - truth, np.nan)
        im = a.imshow(err, cmap="RdBu_r", vmin=-span, vmax=span)
        if footprint is not None:
            a.contour(footprint.astype(float), levels=[0.5], colors="k", linewidths=0.5)
        a.set_title(k)
        a.set_xticks([])
        a.set_yticks([])
    cb = fig.colorbar(im, ax=ax[0].tolist(), shrink=0.8, pad=0.02)
    cb.set_label("depth error [m]")
    return _save(fig, path)


def dilemma_bars(rows: list, path, dt: float = 0.003) -> Path:
    """Mean and max absolute error per estimator, log scale, with the window width marked."""
    fig, ax = _fig(1, 1, height=fig_width * golden * 0.6)
    a = ax[0, 0]
    names = [r["estimator"] for r in rows]
    x = np.arange(len(rows))
    floor = 1e-9
    a.bar(x - 0.18, [max(r["mean_abs"], floor) for r in rows], 0.36, label="mean |err|")
    a.bar(x + 0.18, [max(r["max_abs"], floor) for r in rows], 0.36, label="max |err|")
    a.axhline(dt, color="k", ls="--", lw=0.8, label="window width")
    a.set_xticks(x)
    a.set_xticklabels(names)
    a.set_yscale("log")
    a.set_ylabel("error [m]")
    a.legend()
    return _save(fig, path)


def image_strip(images: dict, path) -> Path:
    """Row of RGB images with titles."""
    fig, ax = _fig(1, len(images), height=fig_width / max(len(images), 1) * 1.1)
    for a, (title, img) in zip(ax[0], images.items()):
        a.imshow(np.clip(img, 0, 1))
        a.set_title(title)
        a.axis("off")
    return _save(fig, path)


def mesh_error_hist(dist_pred: np.ndarray, dist_gt: np.ndarray, path, tau: float = 0.005) -> Path:
    """Histograms of nearest-vertex distances in both directions."""
    fig, ax = _fig(1, 1, height=fig_width * golden * 0.6)
    a = ax[0, 0]
    hi = max(4 * tau, float(np.percentile(np.concatenate([dist_pred, dist_gt]), 99)))
    bins = np.linspace(0, hi, 60)
    a.hist(np.minimum(dist_pred, hi), bins, histtype="step", label="pred to gt")
    a.hist(np.minimum(dist_gt, hi), bins, histtype="step", label="gt to pred")
    a.axvline(tau, color="k", ls="--", lw=0.8)
    a.set_xlabel("nearest vertex distance [m]")
    a.set_ylabel("count")
    a.legend()
    return _save(fig, path)
