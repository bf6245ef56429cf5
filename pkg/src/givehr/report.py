"""Figure rendering for fit and benchmark outputs.

Figures are written next to the delimited tables the CLI emits: a
coefficient/baseline panel for a single fit, and bias/RMSE bars for a
benchmark table.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fit_figure(fit, path, variance=None) -> None:
    """Two panels: estimated baseline trajectory and coefficients (with
    normal-theory error bars when a variance estimate is supplied)."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))

    knots = fit.baseline.knots
    if knots.size:
        ax1.step(np.concatenate([[0.0], knots]), np.concatenate([[0.0], fit.baseline.cumvalues]), where="post")
    ax1.set_xlabel("time")
    ax1.set_ylabel("cumulative baseline outcome level")
    ax1.set_title("baseline")

    names = list(fit.coef_names)
    est = fit.coefficients
    pos = np.arange(len(names))
    if variance is not None:
        ax2.errorbar(est, pos, xerr=1.96 * variance.se, fmt="o", capsize=3)
    else:
        ax2.plot(est, pos, "o")
    ax2.axvline(0.0, color="grey", lw=0.8)
    ax2.set_yticks(pos)
    ax2.set_yticklabels(names)
    ax2.invert_yaxis()
    ax2.set_xlabel("estimate")
    ax2.set_title("coefficients")

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def benchmark_figure(table, path) -> None:
    """Bias and RMSE bars per estimator for one scenario."""
    rows = [r for r in table.rows if not r.flagged]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    labels = [r.estimator for r in rows]
    pos = np.arange(len(rows))

    ax1.barh(pos, [r.bias for r in rows])
    ax1.axvline(0.0, color="grey", lw=0.8)
    ax1.set_yticks(pos)
    ax1.set_yticklabels(labels)
    ax1.invert_yaxis()
    ax1.set_xlabel("bias")

    ax2.barh(pos, [r.rmse for r in rows])
    ax2.set_yticks(pos)
    ax2.set_yticklabels(labels)
    ax2.invert_yaxis()
    ax2.set_xlabel("RMSE")

    scenario = rows[0].scenario if rows else "?"
    fig.suptitle(f"scenario {scenario}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
