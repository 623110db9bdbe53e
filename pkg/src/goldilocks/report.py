"""Paired-run reports: CSVs plus the training-dynamics plots.

One call renders the full set of figures for a curriculum/baseline pair:
validation accuracy (raw), and EMA-smoothed mean training reward, reward
std, zero-variance fraction, gradient norm, teacher validation MAE, and the
teacher prediction mean with its +/- sigma band.
"""

from __future__ import annotations

import math
import os

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from goldilocks.harness import MetricsRecord, aggregate_by_step, ema, write_metrics_csv

# keep SVG output reproducible across runs
matplotlib.rcParams["svg.hashsalt"] = "goldilocks"

PLOT_NAMES = (
    "validation_accuracy",
    "mean_reward",
    "reward_std",
    "zero_variance_fraction",
    "grad_norm",
    "teacher_val_mae",
    "teacher_predictions",
)


class EmptyReportError(ValueError):
    """No metrics to report; nothing was written."""


def _series(agg: dict[int, dict], key: str):
    steps = sorted(agg)
    pairs = [(s, agg[s][key]) for s in steps if not math.isnan(agg[s][key])]
    if not pairs:
        return np.array([]), np.array([])
    xs, ys = zip(*pairs)
    return np.asarray(xs), np.asarray(ys)


def _line_plot(path, title, ylabel, arms, smooth: bool, alpha: float,
               hline: float | None = None):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, (xs, ys) in arms.items():
        if xs.size == 0:
            continue
        ax.plot(xs, ema(ys, alpha) if smooth else ys, label=label)
    if hline is not None:
        ax.axhline(hline, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _band_plot(path, agg: dict[int, dict], alpha: float):
    xs_mu, mu = _series(agg, "teacher_mu")
    xs_sigma, sigma = _series(agg, "teacher_sigma")
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if xs_mu.size:
        mu_s = ema(mu, alpha)
        sigma_s = ema(sigma, alpha)
        ax.plot(xs_mu, mu_s, label="prediction mean")
        ax.fill_between(xs_sigma, mu_s - sigma_s, mu_s + sigma_s, alpha=0.3,
                        label="+/- prediction std")
    ax.set_xlabel("step")
    ax.set_ylabel("predicted utility")
    ax.set_title("teacher prediction distribution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def emit_report(goldilocks: list[MetricsRecord], baseline: list[MetricsRecord],
                out_dir, alpha: float = 0.9) -> list[str]:
    """Write per-arm CSVs and the seven report plots; returns written paths."""
    if not goldilocks or not baseline:
        raise EmptyReportError("cannot report on empty metrics")
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    for name, records in (("goldilocks", goldilocks), ("baseline", baseline)):
        path = os.path.join(out_dir, f"{name}.csv")
        write_metrics_csv(records, path)
        paths.append(path)

    gold = aggregate_by_step(goldilocks)
    base = aggregate_by_step(baseline)

    def both(key):
        return {"goldilocks": _series(gold, key), "baseline": _series(base, key)}

    specs = {
        "validation_accuracy": ("validation accuracy", False, None),
        "mean_reward": ("mean training reward", True, 0.5),
        "reward_std": ("reward std within groups", True, None),
        "zero_variance_fraction": ("fraction of zero-variance groups", True, None),
        "grad_norm": ("gradient norm", True, None),
    }
    for key, (title, smooth, hline) in specs.items():
        path = os.path.join(out_dir, f"{key}.svg")
        _line_plot(path, title, key, both(key), smooth, alpha, hline)
        paths.append(path)

    path = os.path.join(out_dir, "teacher_val_mae.svg")
    _line_plot(path, "teacher online validation MAE", "MAE",
               {"goldilocks": _series(gold, "teacher_val_mae")}, True, alpha)
    paths.append(path)

    path = os.path.join(out_dir, "teacher_predictions.svg")
    _band_plot(path, gold, alpha)
    paths.append(path)
    return paths
