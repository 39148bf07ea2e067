"""Matplotlib figures for prune reports, written next to the JSON report."""
import os

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _layer_axis(ax, names):
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")


def plot_layer_errors(report, path):
    layers = report["layers"]
    names = [r["layer_id"] for r in layers]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(names) + 2), 3))
        ax.bar(range(len(names)), [r["rel_err"] for r in layers], color="#0072B2")
        _layer_axis(ax, names)
        ax.set_ylabel("held-out relative error")
        ax.set_title(f"per-layer reconstruction error ({layers[0]['strategy'] if layers else '-'})")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_channels(report, path):
    layers = report["layers"]
    names = [r["layer_id"] for r in layers]
    x = range(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(names) + 2), 3))
        ax.bar(x, [r["c_before"] for r in layers], color="#BBBBBB", label="before")
        ax.bar(x, [r["c_after"] for r in layers], color="#E69F00", label="kept")
        _layer_axis(ax, names)
        ax.set_ylabel("input channels")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_flops(report, path, min_share=0.01):
    before, after = report["flops_before"]["per_layer"], report["flops_after"]["per_layer"]
    total = report["flops_before"]["total"] or 1
    names = [k for k, v in before.items() if v >= min_share * total and k in after]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(names) + 2), 3))
        ax.bar(x - 0.2, [before[k] / 1e6 for k in names], 0.4, color="#BBBBBB", label="original")
        ax.bar(x + 0.2, [after[k] / 1e6 for k in names], 0.4, color="#009E73", label="pruned")
        _layer_axis(ax, names)
        ax.set_ylabel("MFLOPs")
        ax.set_title(f"layers with >= {min_share:.0%} of FLOPs, speed-up x{report['achieved_speedup']:.2f}")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def render_report_figures(report, out_dir):
    """Write the report figures as PNGs into ``out_dir``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "layer_errors": os.path.join(out_dir, "layer_errors.png"),
        "channels": os.path.join(out_dir, "channels.png"),
        "flops": os.path.join(out_dir, "flops.png"),
    }
    plot_layer_errors(report, paths["layer_errors"])
    plot_channels(report, paths["channels"])
    plot_flops(report, paths["flops"])
    return paths
