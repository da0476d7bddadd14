"""Report figures rendered to PNG files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import median_by  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_losses(metrics, path, title: str = "training loss"):
    steps = [m.step for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [m.L for m in metrics], lw=0.8, label="L")
    ax.plot(steps, [m.L_c for m in metrics], lw=0.8, label="L_c")
    if any(m.L_s for m in metrics):
        ax.plot(steps, [m.L_s for m in metrics], lw=0.8, label="L_s")
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_sweep(rows, path):
    """Base and enhanced mIoU against the swept value (median over seeds)."""
    values = list(dict.fromkeys(r["value"] for r in rows))
    key = rows[0]["key"] if rows else "value"
    x = np.arange(len(values))
    base = [median_by(rows, "base_miou", value=v) for v in values]
    enh = [median_by(rows, "enhanced_miou", value=v) for v in values]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    w = 0.38
    ax.bar(x - w / 2, base, w, label="base CAM")
    ax.bar(x + w / 2, enh, w, label="enhanced")
    ax.set_xticks(x, values)
    ax.set_xlabel(key)
    ax.set_ylabel("pseudo-mask mIoU")
    ax.legend()
    return _save(fig, path)


def plot_fractions(rows, path):
    fracs = list(dict.fromkeys(r["fraction"] for r in rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for method in ("baseline", "rpnet"):
        ys = [median_by(rows, "miou", fraction=f, method=method) for f in fracs]
        ax.plot(range(len(fracs)), ys, marker="o", label=method)
    ax.set_xticks(range(len(fracs)), fracs)
    ax.set_xlabel("training fraction")
    ax.set_ylabel("pseudo-mask mIoU (median)")
    ax.legend()
    return _save(fig, path)


def plot_comparison(report, path):
    k = len(report.base.iou)
    x = np.arange(k)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, np.nan_to_num(report.base.iou), 0.4, label=f"base {report.base_miou:.3f}")
    ax.bar(x + 0.2, np.nan_to_num(report.enhanced.iou), 0.4, label=f"enhanced {report.enhanced_miou:.3f}")
    ax.set_xticks(x, ["bg"] + [str(i) for i in range(1, k)])
    ax.set_ylabel("IoU")
    ax.legend()
    return _save(fig, path)
