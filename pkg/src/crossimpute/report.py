"""Matplotlib figure rendering for training, evaluation, and ablation runs.

Figures are written next to the delimited outputs (train_log.csv,
metrics.json, ablation.csv) so every run directory is self-describing.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

__all__ = [
    "render_training_curves",
    "render_imputation_examples",
    "render_per_feature_errors",
    "render_ablation_comparison",
]


def render_training_curves(log_path: str | Path, out_png: str | Path, val_log_path: str | Path | None = None) -> Path:
    """Loss components, validation curve, alignment diagnostics, learning rate."""
    df = pd.read_csv(log_path)
    val_df = None
    if val_log_path is not None and Path(val_log_path).exists():
        val_df = pd.read_csv(val_log_path)
        if val_df.empty:
            val_df = None
    n_panels = 4 if val_df is not None else 3
    fig, axes = plt.subplots(n_panels, 1, figsize=(8, 3 * n_panels))

    axes[0].plot(df["step"], df["loss_source"], label="source loss", alpha=0.8)
    axes[0].plot(df["step"], df["loss_target"], label="target loss", alpha=0.8)
    axes[0].plot(df["step"], df["loss_total"], label="total loss", alpha=0.8)
    axes[0].set_ylabel("denoising loss")
    axes[0].set_xlabel("optimization step")
    axes[0].legend(loc="upper right", fontsize=8)

    axes[1].plot(df["step"], df["delta"], label="discrepancy", color="tab:purple", alpha=0.8)
    axes[1].plot(df["step"], df["loss_align"], label="alignment loss", color="tab:red", alpha=0.8)
    axes[1].set_ylabel("alignment")
    axes[1].set_xlabel("optimization step")
    axes[1].legend(loc="upper right", fontsize=8)

    axes[2].plot(df["step"], df["lr"], color="tab:green")
    axes[2].set_yscale("log")
    axes[2].set_ylabel("learning rate")
    axes[2].set_xlabel("optimization step")

    if val_df is not None:
        best = val_df[val_df["is_best"] == 1]
        axes[3].plot(val_df["epoch"], val_df["val_loss"], marker="o", color="tab:orange", label="validation loss")
        axes[3].plot(best["epoch"], best["val_loss"], "k*", markersize=10, label="checkpointed best")
        axes[3].set_ylabel("validation loss")
        axes[3].set_xlabel("epoch")
        axes[3].legend(loc="upper right", fontsize=8)

    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_imputation_examples(results, out_png: str | Path, max_panels: int = 3) -> Path | None:
    """Truth vs. posterior band for a few (window, feature) pairs with targets."""
    panels = []
    for res in results:
        for f in range(res.window.n_features):
            if res.eval_mask[f].any():
                panels.append((res, f))
                break
        if len(panels) >= max_panels:
            break
    if not panels:
        logger.warning("no evaluation targets to plot")
        return None

    fig, axes = plt.subplots(len(panels), 1, figsize=(9, 2.8 * len(panels)), squeeze=False)
    for ax, (res, f) in zip(axes[:, 0], panels):
        stats = res.window.norm_record
        truth = stats.inverse(res.window.values)[f] if stats else res.window.values[f]
        samples = stats.inverse(res.samples)[:, f] if stats else res.samples[:, f]
        point = stats.inverse(res.point_estimate)[f] if stats else res.point_estimate[f]
        t = np.arange(len(truth))
        q05 = np.quantile(samples, 0.05, axis=0)
        q95 = np.quantile(samples, 0.95, axis=0)
        ax.fill_between(t, q05, q95, color="tab:blue", alpha=0.25, label="5-95% band")
        ax.plot(t, point, color="tab:blue", label="median")
        obs = res.window.cond_mask[f]
        ax.plot(t[obs], truth[obs], "k.", label="observed")
        ev = res.eval_mask[f]
        ax.plot(t[ev], truth[ev], "rx", label="held-out truth")
        ax.set_title(f"{res.window_id} / feature {f}", fontsize=9)
        ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("timestamp")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_per_feature_errors(report, out_png: str | Path) -> Path:
    """Per-feature MAE and RMSE bars from a metrics report."""
    rows = [r for r in report.per_feature if r["n"] > 0]
    names = [r["feature"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(rows) + 2), 4))
    ax.bar(x - 0.2, [r["mae"] for r in rows], width=0.4, label="MAE")
    ax.bar(x + 0.2, [r["rmse"] for r in rows], width=0.4, label="RMSE")
    ax.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("error (raw units)")
    ax.set_title(f"per-feature error over {report.n_eval_points} targets")
    ax.legend()
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_ablation_comparison(table: pd.DataFrame, out_png: str | Path) -> Path:
    """Grouped metric bars for the ablation variants."""
    metrics = ["mae", "rmse", "crps"]
    x = np.arange(len(table))
    width = 0.25
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, metric in enumerate(metrics):
        ax.bar(x + (i - 1) * width, table[metric], width=width, label=metric.upper())
    ax.set_xticks(x, table["variant"], fontsize=9)
    ax.set_ylabel("score (raw units)")
    ax.set_title("ablation comparison (lower is better)")
    ax.legend()
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
