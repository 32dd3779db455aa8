"""
services/plots.py
SVG charts: smoothed coefficient paths with their interval bands, and boxplots of replicated
estimates per method. Output is deterministic (fixed hash salt, no date metadata).
"""

from __future__ import annotations

import logging
import os
from typing import Mapping, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from imputers import PooledEstimate  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "ssmimpute"
plt.rcParams["figure.figsize"] = (7.0, 3.0)
plt.rcParams["font.size"] = 9
plt.rcParams["savefig.bbox"] = "tight"


def _savefig(fig, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug("wrote %s", path)


def coefficient_paths_svg(
    pooled: PooledEstimate,
    path: str,
    title: str = "",
    truth: Optional[Mapping[str, np.ndarray]] = None,
):
    """One panel per coefficient: estimate, interval band, and the truth when known."""
    names = list(pooled.names)
    t = pooled.t_index if pooled.t_index is not None else np.arange(1, pooled.mean.shape[0] + 1)
    fig, axes = plt.subplots(len(names), 1, sharex=True, figsize=(7.0, 1.6 * len(names)), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        j = pooled.column(name)
        ax.fill_between(t, pooled.lower[:, j], pooled.upper[:, j], color="0.85", linewidth=0)
        ax.plot(t, pooled.mean[:, j], color="C0", linewidth=1.0)
        if truth is not None and name in truth:
            ax.plot(t, truth[name], color="C3", linewidth=0.8, linestyle="--")
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("t")
    if title:
        axes[0, 0].set_title(title)
    _savefig(fig, path)


def estimate_boxplot_svg(raw: pd.DataFrame, path: str, title: str = ""):
    """Boxplot of estimates by method for one coefficient x evaluation time, truth as a line."""
    ok = raw.dropna(subset=["estimate"])
    methods = sorted(ok["method"].unique())
    fig, ax = plt.subplots()
    if methods:
        ax.boxplot([ok.loc[ok["method"] == m, "estimate"].to_numpy() for m in methods], showfliers=True)
        ax.set_xticks(range(1, len(methods) + 1))
        ax.set_xticklabels(methods, rotation=30)
    if not ok.empty:
        ax.axhline(float(ok["truth"].mean()), color="C3", linewidth=0.8, linestyle="--")
    ax.set_ylabel("estimate")
    if title:
        ax.set_title(title)
    _savefig(fig, path)


def grid_boxplots(raw: pd.DataFrame, out_dir: str) -> list:
    """One SVG per scenario x mechanism x rate x coefficient x evaluation time."""
    written = []
    keys = ["scenario", "mechanism", "rate", "coefficient", "eval_time"]
    for key, group in raw.groupby(keys, sort=True):
        scenario, mechanism, rate, coefficient, eval_time = key
        name = f"box_{scenario}_{mechanism}_{int(round(100 * rate))}_{coefficient}_t{eval_time}.svg"
        path = os.path.join(out_dir, name)
        estimate_boxplot_svg(
            group, path, title=f"{coefficient} at t={eval_time} ({scenario}, {mechanism} {rate:.0%})"
        )
        written.append(path)
    return written
