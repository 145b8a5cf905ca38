"""Report figures written with the Agg backend and fixed PNG metadata."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_curves(history, path):
    """Total and per-term training losses against step, log scale."""
    steps = np.array([r["step"] for r in history])
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("loss", "total"), ("l_sigma", "L_sigma"), ("l_depth", "L_D"), ("l_reg", "L_reg")):
        vals = np.array([float(r[key]) for r in history])
        if np.any(vals > 0):
            ax.plot(steps, np.where(vals > 0, vals, np.nan), label=label, lw=1)
    phase2 = [r["step"] for r in history if int(r["phase"]) == 2]
    if phase2:
        ax.axvline(phase2[0], color="0.5", ls="--", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def noise_sweep(rows, path):
    """Metric curves over injected noise level; ``rows`` are dicts with noise_cm and metric columns."""
    x = np.array([float(r["noise_cm"]) for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("chamfer_cm", "p2s_cm", "depth_l1"):
        y = [float(r[key]) if r.get(key) not in (None, "") else np.nan for r in rows]
        axes[0].plot(x, y, marker="o", label=key)
    axes[0].set_xlabel("noise std (cm)")
    axes[0].set_ylabel("cm")
    axes[0].legend()
    y = [float(r["iou"]) if r.get("iou") not in (None, "") else np.nan for r in rows]
    axes[1].plot(x, y, marker="o", color="C3")
    axes[1].set_xlabel("noise std (cm)")
    axes[1].set_ylabel("volumetric IoU")
    fig.tight_layout()
    _save(fig, path)


def depth_comparison(noisy, refined, gt, path, title=None):
    """Noisy input, refined and ground-truth depth side by side, with a centre-row profile."""
    rasters = [noisy, refined, gt]
    vals = [np.where(d.valid, d.values, np.nan) for d in rasters]
    finite = np.concatenate([v[np.isfinite(v)] for v in vals]) if any(np.isfinite(v).any() for v in vals) \
        else np.array([0.0, 1.0])
    lo, hi = np.percentile(finite, [1, 99])
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
    for ax, v, name in zip(axes, vals, ("noisy input", "refined", "ground truth")):
        im = ax.imshow(v, vmin=lo, vmax=hi, cmap="viridis")
        ax.set_title(name)
        ax.axis("off")
    fig.colorbar(im, ax=axes[:3].tolist(), shrink=0.8, label="depth (m)")
    row = vals[0].shape[0] // 2
    for v, name in zip(vals, ("noisy", "refined", "gt")):
        axes[3].plot(v[row], label=name, lw=1)
    axes[3].set_title("centre row")
    axes[3].set_xlabel("pixel")
    axes[3].legend()
    if title:
        fig.suptitle(title)
    _save(fig, path)
