"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def figsize(width=6.0, ratio=None):
    ratio = ratio or (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _smooth(values, window):
    values = np.asarray(values, dtype=float)
    if len(values) < window or window < 2:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_log(rows, path, window=50) -> Path:
    """Moving-average CT / matching / total losses against iteration k."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        ks = np.array([r["k"] for r in rows])
        for key, label in (("ct_loss", "CT"), ("dtm_loss", "matching"), ("total", "total")):
            vals = [r[key] for r in rows]
            if not any(vals):
                continue
            sm = _smooth(vals, window)
            ax.plot(ks[len(ks) - len(sm):], sm, label=label, lw=1.0)
        stage2 = [r["k"] for r in rows if r["stage"] == "DTM"]
        if stage2:
            ax.axvline(stage2[0], color="0.5", ls=":", lw=0.8)
        ax.set_xlabel("iteration k")
        ax.set_ylabel(f"loss ({window}-it moving avg)")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return save(fig, path)


def plot_eval(rows, path, samples=None) -> Path:
    """Per-image PSNR of the model against bicubic, plus an optional sample strip.

    ``samples`` is a list of ``(lr_up, sr, hr)`` uint8 HWC arrays.
    """
    with plt.rc_context(RC):
        n_strip = min(len(samples or []), 4)
        fig = plt.figure(figsize=figsize(7.0, 0.9 if n_strip else 0.6))
        grid = fig.add_gridspec(2 if n_strip else 1, max(n_strip * 3, 1))
        ax = fig.add_subplot(grid[0, :])
        base = np.array([r["bicubic_psnr"] for r in rows])
        model = np.array([r["psnr"] for r in rows])
        ax.scatter(base, model, s=10, alpha=0.7)
        lo, hi = min(base.min(), model.min()), max(base.max(), model.max())
        ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("bicubic PSNR (dB)")
        ax.set_ylabel("one-step SR PSNR (dB)")
        ax.set_title(f"mean gain {np.mean(model - base):+.2f} dB over {len(rows)} images")
        for i in range(n_strip):
            for j, (img, label) in enumerate(zip(samples[i], ("bicubic", "SR", "HR"))):
                sub = fig.add_subplot(grid[1, 3 * i + j])
                sub.imshow(img, interpolation="nearest")
                sub.set_xticks([])
                sub.set_yticks([])
                if i == 0:
                    sub.set_title(label, fontsize=7)
        return save(fig, path)
