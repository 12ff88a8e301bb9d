"""SVG figures written next to the CSV outputs.

Figures are deterministic: the SVG hash salt is fixed and no creation date
is embedded, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import LEVELS, SummaryTable  # noqa: E402

plt.rcParams["svg.hashsalt"] = "seiird"
plt.rcParams["svg.fonttype"] = "none"

_ALPHAS = {0.5: 0.45, 0.8: 0.3, 0.95: 0.18}


def _save(fig, path: str) -> str:
    tmp = path + ".tmp"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path


def ribbon_plot(table: SummaryTable, path: str, title: str, ylabel: str, x=None, observed=None, split: float | None = None) -> str:
    """Median line with nested 50/80/95% bands and optional observed points."""
    x = np.asarray(table.labels if x is None else x, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for lv in sorted(LEVELS, reverse=True):
        ax.fill_between(x, table.lower[lv], table.upper[lv], color="tab:blue", alpha=_ALPHAS[lv], lw=0, label=f"{int(lv * 100)}%")
    ax.plot(x, table.median, color="tab:blue", lw=1.5, label="median")
    if observed is not None:
        obs = np.asarray(observed, dtype=float)
        ax.plot(x[: obs.size], obs, "o", color="black", ms=3, label="observed")
    if split is not None:
        ax.axvline(split, color="grey", ls="--", lw=0.8)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.set_xlabel("bin" if x is table.labels else "weeks")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def box_plot(groups: dict[str, np.ndarray], path: str, title: str, ylabel: str) -> str:
    """One box per labelled group of per-dataset values."""
    labels = list(groups)
    data = [np.asarray(groups[k], dtype=float)[np.isfinite(groups[k])] for k in labels]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 3.6))
    ax.boxplot(data, showfliers=True)
    ax.set_xticks(range(1, len(labels) + 1), labels, rotation=45, ha="right", fontsize=7)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return _save(fig, path)


def trace_plot(draws, path: str, names=None) -> str:
    names = list(draws.names if names is None else names)
    fig, axes = plt.subplots(len(names), 1, figsize=(6, 1.1 * len(names)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, name in zip(axes, names):
        for c, series in enumerate(draws.by_chain(name)):
            ax.plot(series, lw=0.4, label=f"chain {c}")
        ax.set_ylabel(name, fontsize=7, rotation=0, ha="right")
        ax.tick_params(labelsize=6)
    axes[-1].set_xlabel("draw")
    fig.tight_layout()
    return _save(fig, path)
