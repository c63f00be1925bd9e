"""Report figures.  Everything renders off-screen to PNG next to the CSV output."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}

# no Software/creation stamps so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def error_histogram(
    edges, counts, path, xlabel: str = "anchor error (mm)", ylabel: str = "slices", title: str | None = None
) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        edges = np.asarray(edges, dtype=float)
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="0.35", edgecolor="white", linewidth=0.4)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def training_curve(log: list, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [e["epoch"] for e in log]
        ax.plot(ep, [e["mean_loss"] for e in log], color="k", lw=1.2, label="loss")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean anchor loss")
        twin = ax.twinx()
        twin.plot(ep, [e["mean_anchor_error_mm"] for e in log], color="tab:red", lw=1.0, ls="--")
        twin.set_ylabel("anchor error (mm)", color="tab:red")
        fig.tight_layout()
        return _save(fig, path)


def reconstruction_curve(log: list, path, baseline_psnr: float | None = None) -> Path:
    """Mean NCC and (when available) PSNR per SVR iteration; iteration 0 is the splat."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = [e["iteration"] for e in log]
        ax.plot(it, [e["mean_ncc"] for e in log], "o-", color="k", ms=3, lw=1.0)
        ax.set_xlabel("SVR iteration")
        ax.set_ylabel("mean NCC")
        psnrs = [e.get("psnr_db") for e in log]
        if any(p is not None for p in psnrs):
            twin = ax.twinx()
            xs = [i for i, p in zip(it, psnrs) if p is not None]
            ys = [p for p in psnrs if p is not None]
            if baseline_psnr is not None:
                xs, ys = [0] + xs, [baseline_psnr] + ys
            twin.plot(xs, ys, "s--", color="tab:blue", ms=3, lw=1.0)
            twin.set_ylabel("PSNR (dB)", color="tab:blue")
        fig.tight_layout()
        return _save(fig, path)


def image_grid(images, path, cols: int = 8, titles=None) -> Path:
    images = list(images)
    rows = max(1, -(-len(images) // cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1), squeeze=False)
        for k, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if k < len(images):
                ax.imshow(images[k], cmap="gray", interpolation="nearest")
                if titles is not None:
                    ax.set_title(titles[k], fontsize=6)
        fig.tight_layout(pad=0.2)
        return _save(fig, path)
