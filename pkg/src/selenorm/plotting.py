"""Static report figures (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

# input / baseline / model / reference, in strip order
COLORS = {
    "degraded": "#d62728",
    "histogram_match": "#ff7f0e",
    "tone_balance": "#9467bd",
    "model": "#1f77b4",
    "reference": "#2ca02c",
}


def _color(label, i):
    return COLORS.get(label, f"C{i % 10}")


def histogram_overlay(path, images: dict, bins: int = 256, title: str = "") -> None:
    """Step histograms of several rasters on shared axes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        edges = np.linspace(0.0, 1.0, bins + 1)
        for i, (label, values) in enumerate(images.items()):
            h, _ = np.histogram(np.asarray(values).ravel(), bins=edges, density=True)
            ax.step(edges[:-1], h, where="post", lw=1.1, color=_color(label, i), label=label)
        ax.set_xlim(0, 1)
        ax.set_xlabel("normalized intensity")
        ax.set_ylabel("density")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def image_strip(path, images: dict, title: str = "") -> None:
    with plt.rc_context(STYLE):
        n = len(images)
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.9), squeeze=False)
        for ax, (label, values) in zip(axes[0], images.items()):
            ax.imshow(values, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_title(label)
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)


def loss_curves(path, history: list[dict]) -> None:
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        epochs = [r["epoch"] for r in history]
        for key in ("d_loss", "g_adv"):
            a1.plot(epochs, [r[key] for r in history], label=key)
        a1.set_xlabel("epoch")
        a1.set_title("adversarial terms")
        a1.legend(frameon=False)
        for key in ("total", "val_total"):
            a2.plot(epochs, [r[key] for r in history], label=key)
        a2.set_xlabel("epoch")
        a2.set_title("generator objective")
        a2.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def metric_bars(path, aggregates: dict, metric: str = "psnr_db") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        labels = list(aggregates)
        means = [aggregates[m][metric]["mean"] for m in labels]
        stds = [aggregates[m][metric]["std"] for m in labels]
        ax.bar(labels, means, yerr=stds, color=[_color(m, i) for i, m in enumerate(labels)], capsize=3)
        ax.set_ylabel(metric)
        ax.tick_params(axis="x", rotation=20)
        fig.savefig(path)
        plt.close(fig)
