"""Static figure rendering for fit, replication and prediction artifacts.

Every report path writes its numbers as delimited files first; these helpers
render the same series to PNG files next to them.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

DPI = 150


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_fit(result, outdir: Path) -> list[Path]:
    """Baseline curves and one band plot per fitted additive term."""
    outdir = Path(outdir)
    written = []
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    t = result.baseline_times
    for ax, values, label in zip(
        axes,
        (result.baseline_density, result.baseline_cumulative, result.baseline_survivor),
        ("baseline density", "baseline cumulative", "baseline survivor"),
    ):
        ax.plot(t, values, color="C0")
        ax.set_xlabel("months")
        ax.set_title(label, fontsize=10)
    written.append(_save(fig, outdir / "baseline.png"))
    for term in result.terms:
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.fill_between(term.grid, term.lower, term.upper, color="C0", alpha=0.25, lw=0)
        ax.plot(term.grid, term.estimate, color="C0")
        ax.axhline(0.0, color="grey", lw=0.6)
        ax.set_xlabel(term.name)
        ax.set_ylabel(f"effect on {term.submodel}")
        written.append(_save(fig, outdir / f"term_{term.submodel}_{term.name}.png"))
    return written


def render_replication(summary, outdir: Path) -> list[Path]:
    """Per-term spaghetti of replicate estimates with the mean and truth."""
    outdir = Path(outdir)
    written = []
    for key in summary.term_keys:
        grid = summary.term_grids[key]
        estimates = summary.term_estimates[key]
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for row in estimates:
            ax.plot(grid, row, color="grey", lw=0.4, alpha=0.35)
        ax.plot(grid, estimates.mean(axis=0), "--", color="black", lw=1.2, label="mean")
        ax.plot(grid, summary.term_truth_values[key], color="C3", lw=1.4, label="truth")
        submodel, name = key.split(":")
        ax.set_xlabel(name)
        ax.set_ylabel(f"effect on {submodel}")
        ax.legend(fontsize=8, frameon=False)
        written.append(_save(fig, outdir / f"replication_{submodel}_{name}.png"))
    return written


def render_prediction(frame: pd.DataFrame, outdir: Path) -> list[Path]:
    """Survival and event-probability curves for a predicted path."""
    outdir = Path(outdir)
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    axes[0].plot(frame["t"], frame["survival"], color="C0")
    axes[0].set_ylabel("survival")
    axes[1].plot(frame["t"], frame["event_prob"], color="C1")
    axes[1].set_ylabel("event probability")
    for ax in axes:
        ax.set_xlabel("months")
        ax.set_ylim(-0.02, 1.02)
    return [_save(fig, outdir / "prediction.png")]
