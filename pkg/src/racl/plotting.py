"""Figures written next to the TSV/JSON outputs of ``train`` and ``eval``."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from racl.audio import PROVENANCE_ORDER  # noqa: E402

COLORS = {
    "bonafide": "#1f77b4",
    "spoof": "#d62728",
    "rec_bonafide": "#2ca02c",
    "rec_spoof": "#ff7f0e",
}

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "racl",
}


def figure(width=6.0, height=None, **kw):
    if height is None:
        height = width * (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(RC):
        return plt.subplots(figsize=(width, height), **kw)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(rows: list[dict], path):
    fig, axes = figure(9.0, 3.2, ncols=2)
    epochs = [r["epoch"] for r in rows]
    for split, ax in zip(("train", "dev"), axes):
        for comp, style in (("total", "-"), ("cls", "--"), ("std", ":"), ("enh", "-."), ("reg", ":")):
            ax.plot(epochs, [r[f"{split}_{comp}"] for r in rows], style, label=comp)
        ax.set_title(f"{split} loss")
        ax.set_xlabel("epoch")
    axes[0].legend(loc="best")
    return _save(fig, path)


def plot_score_histograms(records, path):
    fig, ax = figure()
    bins = np.linspace(0.0, 1.0, 41)
    for prov in PROVENANCE_ORDER:
        scores = [r.score for r in records if r.provenance is prov]
        if scores:
            ax.hist(scores, bins=bins, alpha=0.5, label=prov.value, color=COLORS[prov.value])
    ax.set_xlabel("spoof probability")
    ax.set_ylabel("utterances")
    ax.legend(loc="upper center")
    return _save(fig, path)


def plot_error_rates(records, path):
    bona = np.sort([r.score for r in records if r.label == 0])
    spoof = np.sort([r.score for r in records if r.label == 1])
    fig, ax = figure()
    if bona.size and spoof.size:
        tau = np.linspace(0.0, 1.0, 501)
        far = 1.0 - np.searchsorted(bona, tau, side="left") / bona.size
        frr = np.searchsorted(spoof, tau, side="left") / spoof.size
        ax.plot(tau, 100 * far, label="bona fide rejected")
        ax.plot(tau, 100 * frr, label="spoof accepted")
        ax.legend(loc="center right")
    ax.set_xlabel("threshold")
    ax.set_ylabel("error rate (%)")
    return _save(fig, path)


def plot_distance_matrix(distances: dict, path):
    names = distances["classes"]
    m = np.array([[np.nan if v is None else v for v in row] for row in distances["matrix"]])
    fig, ax = figure(4.6, 4.0)
    im = ax.imshow(m, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_yticks(range(len(names)), names)
    for i in range(len(names)):
        for j in range(len(names)):
            if np.isfinite(m[i, j]):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="mean Euclidean distance")
    return _save(fig, path)
