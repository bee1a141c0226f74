"""Probabilistic imputation metrics and the evaluation pipeline.

MAE/RMSE score the per-position median of the posterior samples; CRPS uses
the 19-level quantile-loss approximation (levels 0.05 .. 0.95), normalized
by the summed magnitude of the ground truth over evaluation targets. All
reported numbers are in denormalized (raw) units.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Domain, NormStats, SkipWindow, Split, apply_test_pattern
from .diffusion import ImputationResult, impute_batch
from .seeding import Stream, child_rng

logger = logging.getLogger(__name__)

__all__ = [
    "QUANTILE_LEVELS",
    "MetricsReport",
    "pinball_loss",
    "crps_quantile",
    "compute_metrics",
    "write_imputations_csv",
    "evaluate",
    "run_ablation",
    "ABLATION_VARIANTS",
]

QUANTILE_LEVELS = np.round(np.arange(1, 20) * 0.05, 2)


def pinball_loss(truth: np.ndarray, predicted: np.ndarray, q: float) -> np.ndarray:
    """Quantile (pinball) loss, elementwise."""
    diff = truth - predicted
    return np.maximum(q * diff, (q - 1.0) * diff)


def crps_quantile(truth: np.ndarray, samples: np.ndarray, levels: np.ndarray = QUANTILE_LEVELS) -> np.ndarray:
    """Per-point CRPS from sample quantiles, unnormalized.

    Trapezoidal quadrature of the quantile-loss integral: the interior
    levels must form the uniform grid i/(n+1); the endpoint terms are the
    (usually zero) losses against the sample extremes. With a single sample
    this reduces exactly to the absolute error, and against the exact
    pairwise empirical CRPS it stays within a few percent at S ~ 200.
    """
    out = np.maximum(samples.min(axis=0) - truth, 0.0) + np.maximum(truth - samples.max(axis=0), 0.0)
    for q in levels:
        pred_q = np.quantile(samples, q, axis=0)
        out = out + 2.0 * pinball_loss(truth, pred_q, q)
    return out / (len(levels) + 1)


@dataclass
class MetricsReport:
    """Aggregate scores over all evaluation targets of a split."""

    mae: float
    rmse: float
    crps: float
    n_eval_points: int
    per_feature: list[dict] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def validate(self) -> None:
        if not (self.rmse >= self.mae >= 0.0):
            raise ValueError(f"metric invariant violated: rmse={self.rmse} mae={self.mae}")
        if self.crps < 0.0:
            raise ValueError(f"negative crps {self.crps}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _denormalized(result: ImputationResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(truth, point_estimate, samples) of one window in raw units."""
    stats: NormStats | None = result.window.norm_record
    truth = result.window.values
    point = result.point_estimate
    samples = result.samples
    if stats is not None:
        truth, point, samples = stats.inverse(truth), stats.inverse(point), stats.inverse(samples)
    return truth, point, samples


def compute_metrics(results: list[ImputationResult], feature_names: list[str] | None = None) -> MetricsReport:
    """Score imputations against retained ground truth at evaluation targets."""
    if not results:
        raise ValueError("no imputation results to score")
    k = results[0].window.n_features
    abs_sum = np.zeros(k)
    sq_sum = np.zeros(k)
    crps_sum = np.zeros(k)
    denom_sum = np.zeros(k)
    counts = np.zeros(k, dtype=np.int64)
    for res in results:
        mask = res.eval_mask
        if not mask.any():
            continue
        truth, point, samples = _denormalized(res)
        err = (point - truth) * mask
        abs_sum += np.abs(err).sum(axis=1)
        sq_sum += np.square(err).sum(axis=1)
        crps_sum += (crps_quantile(truth, samples) * mask).sum(axis=1)
        denom_sum += (np.abs(truth) * mask).sum(axis=1)
        counts += mask.sum(axis=1)

    n_total = int(counts.sum())
    if n_total == 0:
        raise ValueError("zero evaluation targets: nothing to score")
    denom_total = float(denom_sum.sum())
    if denom_total == 0.0:
        logger.warning("all ground-truth magnitudes are zero; CRPS left unnormalized")
        denom_total = 1.0

    names = feature_names or [f"f{i}" for i in range(k)]
    per_feature = []
    for f in range(k):
        if counts[f] == 0:
            per_feature.append({"feature": names[f], "mae": None, "rmse": None, "crps": None, "n": 0})
            continue
        per_feature.append(
            {
                "feature": names[f],
                "mae": float(abs_sum[f] / counts[f]),
                "rmse": float(np.sqrt(sq_sum[f] / counts[f])),
                "crps": float(crps_sum[f] / denom_sum[f]) if denom_sum[f] > 0 else None,
                "n": int(counts[f]),
            }
        )
    report = MetricsReport(
        mae=float(abs_sum.sum() / n_total),
        rmse=float(np.sqrt(sq_sum.sum() / n_total)),
        crps=float(crps_sum.sum() / denom_total),
        n_eval_points=n_total,
        per_feature=per_feature,
    )
    report.validate()
    return report


def write_imputations_csv(results: list[ImputationResult], path: str | Path) -> None:
    """One row per imputed position: id, coordinates, truth when known,
    point estimate, and the 5/50/95% sample quantiles (raw units)."""
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "feature", "timestamp", "truth", "point_estimate", "q05", "q50", "q95"])
        for res in results:
            truth, point, samples = _denormalized(res)
            q05, q50, q95 = (np.quantile(samples, q, axis=0) for q in (0.05, 0.50, 0.95))
            names = res.window.norm_record.feature_names if res.window.norm_record else None
            for f, t in zip(*np.nonzero(res.target_mask)):
                feat = names[f] if names else str(f)
                truth_cell = f"{truth[f, t]:.10g}" if res.eval_mask[f, t] else ""
                writer.writerow(
                    [
                        res.window_id,
                        feat,
                        int(t),
                        truth_cell,
                        f"{point[f, t]:.10g}",
                        f"{q05[f, t]:.10g}",
                        f"{q50[f, t]:.10g}",
                        f"{q95[f, t]:.10g}",
                    ]
                )


def evaluate(checkpoint_path: str | Path, cfg, domain: Domain = Domain.TARGET, output_dir: str | Path | None = None):
    """Score a trained checkpoint on the test split of one domain.

    Applies the configured test-time missing pattern, draws posterior
    samples, and writes ``metrics.json``, ``imputations.csv``,
    ``samples.npy`` and report figures to the output directory.
    """
    from .training import build_datasets, load_checkpoint

    start = time.time()
    model, sched, stats, _ = load_checkpoint(checkpoint_path)
    prepared = build_datasets(cfg, stats_override=stats)
    splits = prepared[domain]
    test = splits[Split.TEST]
    domain_code = 0 if domain is Domain.SOURCE else 1

    windows = []
    for idx, w in enumerate(test.windows):
        try:
            windows.append(apply_test_pattern(w, cfg.masking, child_rng(cfg.seed, Stream.MASK_TEST, domain_code, idx)))
        except SkipWindow:
            logger.warning("skipping window %s: nothing observed", w.window_id)
    if not windows:
        raise ValueError(f"no usable test windows in domain {domain.value}")

    eps_model = model.eps_model(domain)
    results: list[ImputationResult] = []
    batch = cfg.optim.batch_size
    for i in range(0, len(windows), batch):
        results.extend(impute_batch(windows[i : i + batch], eps_model, sched, cfg.eval.n_samples, cfg.seed))

    report = compute_metrics(results, feature_names=test.feature_names)
    report.runtime_seconds = time.time() - start

    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        write_imputations_csv(results, out / "imputations.csv")
        np.save(out / "samples.npy", np.stack([r.samples for r in results]).astype(np.float32))
        from . import report as report_mod

        report_mod.render_imputation_examples(results, out / "imputation_examples.png")
        report_mod.render_per_feature_errors(report, out / "per_feature_errors.png")
    return report, results


# Ablation grid: zero fill replaces the frequency interpolation, then plain
# linear interpolation in time, then the alignment loss is dropped.
ABLATION_VARIANTS = (
    ("full", "full", {}),
    ("w/o FMixup", "no_fmixup", {("fmixup", "mode"): "zero"}),
    ("w/ L.I.", "linear_interp", {("fmixup", "mode"): "linear"}),
    ("w/o CDCA", "no_cdca", {("cdca_enabled",): False}),
)


def run_ablation(cfg):
    """Train and evaluate the full model plus the three ablation variants.

    Writes ``ablation.csv`` and a comparison figure under the run's output
    directory; returns the comparison table (one row per variant).
    """
    import pandas as pd

    from .training import train

    base = cfg.to_dict()
    base_out = cfg.resolved_output_dir()
    rows = []
    for label, slug, patches in ABLATION_VARIANTS:
        raw = json.loads(json.dumps(base))  # deep copy of plain config data
        for path, value in patches.items():
            node = raw
            for p in path[:-1]:
                node = node[p]
            node[path[-1]] = value
        raw["output_dir"] = str(base_out / slug)
        from .config import RunConfig

        vcfg = RunConfig.from_dict(raw)
        logger.info("ablation variant %r: training", label)
        outcome = train(vcfg)
        report, _ = evaluate(outcome["best"], vcfg, output_dir=vcfg.resolved_output_dir())
        rows.append(
            {
                "variant": label,
                "mae": report.mae,
                "rmse": report.rmse,
                "crps": report.crps,
                "n_eval_points": report.n_eval_points,
            }
        )
    table = pd.DataFrame(rows)
    base_out.mkdir(parents=True, exist_ok=True)
    table.to_csv(base_out / "ablation.csv", index=False)
    from . import report as report_mod

    report_mod.render_ablation_comparison(table, base_out / "ablation_comparison.png")
    return table
