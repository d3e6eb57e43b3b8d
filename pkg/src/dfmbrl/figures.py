"""Matplotlib renderers for the report files the pipeline writes.

Figures land next to the delimited outputs; every renderer takes the data
it plots plus a destination path. Rendering never feeds back into the
numeric pipeline.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def error_boxplot(reports: dict, path) -> None:
    """Absolute one-step error distributions per model, RMSE annotated."""
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(reports), 3.4))
    names = list(reports)
    ax.boxplot([reports[n].errors for n in names], tick_labels=names, showfliers=False)
    for i, n in enumerate(names, start=1):
        ax.annotate(f"rmse={reports[n].rmse:.3g}", (i, reports[n].q3),
                    textcoords="offset points", xytext=(0, 12),
                    ha="center", fontsize=8)
    ax.set_ylabel("|one-step error|")
    ax.set_title("one-step prediction errors")
    _save(fig, path)


def rollout_bands(rollouts: dict, path) -> None:
    """RMSE over the prediction step with confidence bands, per model."""
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for name, res in rollouts.items():
        (line,) = ax.plot(res.k, res.rmse, label=name)
        ax.fill_between(res.k, res.lower, res.upper, alpha=0.2,
                        color=line.get_color())
    ax.set_xlabel("steps ahead k")
    ax.set_ylabel("rollout RMSE")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("k-step-ahead rollout error")
    _save(fig, path)


def efficiency_curves(curves: dict, path) -> None:
    """RMSE versus seconds of training experience, per model."""
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for name, pts in curves.items():
        xs = [s for s, _ in pts]
        ys = [r for _, r in pts]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("experience [s]")
    ax.set_ylabel("test RMSE")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("data efficiency")
    _save(fig, path)


def control_comparison(t, planned, realized, controls, ylabel, path) -> None:
    """Planned model trajectory against the open-loop plant execution."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.6, 4.6), sharex=True)
    ax1.plot(t, planned, label="model plan")
    ax1.plot(t, realized, "--", label="plant execution")
    ax1.set_ylabel(ylabel)
    ax1.legend()
    ax2.step(t, np.asarray(controls), where="post", color="tab:green")
    ax2.set_ylabel("command [rad]")
    ax2.set_xlabel("time [s]")
    _save(fig, path)


def delay_correlation(diag, path) -> None:
    """Correlation against lag for the actuation-delay diagnostic."""
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.plot(diag.lags, diag.correlations, marker=".")
    ax.axvline(diag.delay_steps, color="tab:red", ls="--",
               label=f"estimate: {diag.delay_steps} steps")
    ax.set_xlabel("lag [steps]")
    ax.set_ylabel("correlation")
    ax.legend()
    _save(fig, path)
