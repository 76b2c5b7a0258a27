"""Static matplotlib figures written next to the text outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import camera_basis  # noqa: E402

SCATTER_AZIMUTHS = (0.0, 120.0, 240.0)
STAGE_NAMES = ("sparse", "mid", "dense")

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}


def _project(points: np.ndarray, azimuth: float):
    right, up, back = camera_basis(azimuth)
    return points @ right, points @ up, points @ back


def _scatter(ax, points: np.ndarray, azimuth: float, half_width: float = 0.6) -> None:
    x, y, depth = _project(np.asarray(points), azimuth)
    order = np.argsort(depth, kind="stable")  # far points first
    size = max(0.2, 6.0 / np.sqrt(max(len(points), 1) / 256))
    ax.scatter(x[order], y[order], c=depth[order], s=size, cmap="viridis", linewidths=0)
    ax.set_xlim(-half_width, half_width)
    ax.set_ylim(-half_width, half_width)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])


def save_cloud_views(points: np.ndarray, path, title: str = "") -> Path:
    """One cloud from three fixed azimuths."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(SCATTER_AZIMUTHS), figsize=(7.5, 2.7))
        for ax, az in zip(axes, SCATTER_AZIMUTHS):
            _scatter(ax, points, az)
            ax.set_title(f"azimuth {az:.0f}")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def save_hierarchy(clouds: Sequence[np.ndarray], path, image: np.ndarray | None = None) -> Path:
    """Grid of every ladder stage (rows) from three azimuths (columns)."""
    ncols = len(SCATTER_AZIMUTHS) + (1 if image is not None else 0)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(len(clouds), ncols, figsize=(2.4 * ncols, 2.4 * len(clouds)),
                                 squeeze=False)
        for r, pts in enumerate(clouds):
            row = axes[r]
            if image is not None:
                if r == 0:
                    row[0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
                    row[0].set_title("input")
                row[0].axis("off")
                row = row[1:]
            for ax, az in zip(row, SCATTER_AZIMUTHS):
                _scatter(ax, pts, az)
                if r == 0:
                    ax.set_title(f"azimuth {az:.0f}")
            name = STAGE_NAMES[r] if r < len(STAGE_NAMES) else f"stage {r + 1}"
            row[0].set_ylabel(f"{name} ({len(pts)})")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def save_loss_curve(history: Sequence[tuple], path) -> Path:
    """Loss per step, one panel per training phase that has entries."""
    phases = [p for p in ("stage1", "stage2", "stage3", "finetune") if any(h[0] == p for h in history)]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, max(1, len(phases)), figsize=(3.2 * max(1, len(phases)), 2.8),
                                 squeeze=False)
        for ax, phase in zip(axes[0], phases):
            rows = [h for h in history if h[0] == phase]
            steps = [h[1] for h in rows]
            ax.plot(steps, [h[2] for h in rows], lw=0.8, color="k", label="total")
            if phase == "finetune":
                for k, name in ((3, "EMD sparse"), (4, "CD mid"), (5, "CD dense")):
                    ax.plot(steps, [h[k] for h in rows], lw=0.6, label=name)
                ax.legend(frameon=False)
            ax.set_yscale("log")
            ax.set_title(phase)
            ax.set_xlabel("step")
        axes[0][0].set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def save_report_figure(report, path) -> Path:
    """Per-category bars for scaled Chamfer and EMD."""
    cats = list(report.categories) + ["mean"]
    cd = [report.categories[c]["chamfer"] for c in report.categories] + [report.overall["chamfer"]]
    emd = [report.categories[c]["emd"] for c in report.categories] + [report.overall["emd"]]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.8))
        x = np.arange(len(cats))
        for ax, vals, name in ((axes[0], cd, "Chamfer (x100)"), (axes[1], emd, "EMD (x10)")):
            ax.bar(x, vals, color=["0.55"] * (len(cats) - 1) + ["0.2"])
            ax.set_xticks(x)
            ax.set_xticklabels(cats, rotation=40, ha="right")
            ax.set_title(name)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
