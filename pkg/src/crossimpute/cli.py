"""Command-line interface: prepare, train, impute, evaluate, ablate, synth.

Configuration comes from one YAML file; any key can be overridden with
repeated ``--set dotted.key=value`` flags, and the common ones also have
dedicated flags. Exit codes: 0 success, 1 runtime failure (diagnostic on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration YAML")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (dotted path, YAML-parsed value); repeatable",
    )
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--output-dir", default=None, help="override the output directory")


def _load_cfg(args: argparse.Namespace):
    from .config import load_config

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"optim.epochs={args.epochs}")
    if getattr(args, "n_samples", None) is not None:
        overrides.append(f"eval.n_samples={args.n_samples}")
    return load_config(args.config, overrides)


def _cmd_prepare(args: argparse.Namespace) -> int:
    from .data import Domain, write_manifest, build_manifest
    from .training import build_datasets

    cfg = _load_cfg(args)
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    prepared = build_datasets(cfg)
    manifest = build_manifest(
        {d.value: prepared[d] for d in (Domain.SOURCE, Domain.TARGET)},
        prepared.stats,
        cfg.masking,
        cfg.seed,
    )
    write_manifest(out / "manifest.json", manifest)
    cfg.write_resolved(out)
    print(f"manifest written to {out / 'manifest.json'}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from .training import train

    cfg = _load_cfg(args)
    outcome = train(cfg, resume_from=args.resume)
    print(f"best checkpoint: {outcome['best']}")
    print(f"train log:       {outcome['log']}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    from .data import Domain
    from .evaluation import evaluate

    cfg = _load_cfg(args)
    out = Path(args.eval_output) if args.eval_output else cfg.resolved_output_dir() / "evaluation"
    report, _ = evaluate(args.checkpoint, cfg, domain=Domain(args.domain), output_dir=out)
    print(json.dumps({"mae": report.mae, "rmse": report.rmse, "crps": report.crps, "n": report.n_eval_points}, indent=2))
    print(f"report written to {out}")
    return 0


def _cmd_impute(args: argparse.Namespace) -> int:
    from .data import Domain, Split, load_csv, normalize
    from .diffusion import impute_batch
    from .evaluation import write_imputations_csv
    from .training import load_checkpoint

    model, sched, stats, payload = load_checkpoint(args.checkpoint)
    domain = Domain(args.domain)
    cfg_eval = payload["config"]["eval"]
    n_samples = args.n_samples if args.n_samples is not None else cfg_eval["n_samples"]
    seed = args.seed if args.seed is not None else payload["config"]["seed"]
    window_len = payload["config"]["data"].get("window_len") or payload["config"]["data"]["synthetic"]["window_len"]

    ds = load_csv(
        args.input,
        schema=payload["feature_names"],
        window_len=window_len,
        domain=domain,
        split=Split.TEST,
    )
    ds = normalize(ds, stats[domain.value])
    if not ds.windows:
        raise ValueError(f"{args.input}: no complete windows of length {window_len}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = payload["config"]["optim"]["batch_size"]
    results = []
    for i in range(0, len(ds.windows), batch):
        results.extend(impute_batch(ds.windows[i : i + batch], model.eps_model(domain), sched, n_samples, seed))
    write_imputations_csv(results, out / "imputations.csv")
    np.save(out / "samples.npy", np.stack([r.samples for r in results]).astype(np.float32))
    n_targets = int(sum(r.target_mask.sum() for r in results))
    print(f"imputed {n_targets} positions over {len(results)} windows -> {out}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    from .evaluation import run_ablation

    cfg = _load_cfg(args)
    table = run_ablation(cfg)
    print(table.to_string(index=False))
    print(f"table written to {cfg.resolved_output_dir() / 'ablation.csv'}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    from .synthetic import SyntheticSpec, write_synthetic_csv

    spec = SyntheticSpec(
        n_features=args.features,
        window_len=args.window_len,
        n_windows=args.windows,
        shared_freqs=tuple(float(f) for f in args.shared_freqs.split(",")),
        domain_shift=args.domain_shift,
        missing_rate=args.missing_rate,
        source_missing_rate=args.source_missing_rate,
        noise_scale=args.noise_scale,
    )
    paths = write_synthetic_csv(args.out, args.seed, spec)
    for domain, path in paths.items():
        print(f"{domain.value}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossimpute",
        description="Cross-domain probabilistic time series imputation with conditional diffusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build dataset manifest and resolved config")
    _add_config_args(p)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train on paired source/target data")
    _add_config_args(p)
    p.add_argument("--epochs", type=int, default=None, help="override optim.epochs")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint path")
    p.add_argument("--domain", choices=["target", "source"], default="target")
    p.add_argument("--n-samples", type=int, default=None, help="override eval.n_samples")
    p.add_argument("--eval-output", default=None, help="directory for metrics/figures")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("impute", help="impute the missing cells of a CSV")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint path")
    p.add_argument("--input", required=True, help="CSV with empty cells to impute")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domain", choices=["target", "source"], default="target")
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("ablate", help="run the full model and the three ablations")
    _add_config_args(p)
    p.add_argument("--epochs", type=int, default=None, help="override optim.epochs")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic source/target CSV pair")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", type=int, default=5)
    p.add_argument("--window-len", type=int, default=32)
    p.add_argument("--windows", type=int, default=400)
    p.add_argument("--shared-freqs", default="0.25,1.0,2.0", help="comma-separated cycles per window")
    p.add_argument("--domain-shift", type=float, default=0.5)
    p.add_argument("--missing-rate", type=float, default=0.4)
    p.add_argument("--source-missing-rate", type=float, default=0.0)
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # diagnostic + nonzero exit, no traceback spam
        logger.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
