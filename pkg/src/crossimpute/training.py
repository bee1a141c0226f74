"""Paired-domain training loop with deterministic seeding and resume.

Every stochastic choice (masks, mixup pairing, blend ratios, diffusion
steps, noise) is drawn from a stream derived from (global seed, stream id,
domain, window index, epoch), so a run is bit-reproducible and a resumed
run continues the exact trajectory of an uninterrupted one. Checkpoints are
written every epoch (``last.ckpt``) and on validation improvement
(``best.ckpt``).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .cdca import alignment_loss, discrepancy, total_loss
from .config import RunConfig
from .data import (
    Domain,
    DomainDataset,
    NormStats,
    SkipWindow,
    Split,
    TimeWindow,
    apply_train_masking,
    build_manifest,
    compute_normalization,
    load_domain_csv,
    normalize,
    write_manifest,
)
from .denoiser import ConditionalDenoiser, DenoiserSpec
from .diffusion import DiffusionBatch, denoising_loss, forward_sample, quadratic_schedule
from .fmixup import fill_missing, spectral_report
from .seeding import Stream, child_rng, child_seed, torch_generator
from .synthetic import generate_synthetic_splits

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingDiverged",
    "PreparedData",
    "build_datasets",
    "learning_rate",
    "train",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
    "LOG_COLUMNS",
]

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss_source", "loss_target", "delta", "loss_align", "loss_total", "lr")
VAL_LOG_COLUMNS = ("epoch", "val_loss", "is_best")
DOMAIN_CODE = {Domain.SOURCE: 0, Domain.TARGET: 1}


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries the offending step."""


@dataclass
class PreparedData:
    """Normalized splits per domain plus the train-split statistics."""

    datasets: dict[Domain, dict[Split, DomainDataset]]
    stats: dict[str, NormStats]

    def __getitem__(self, domain: Domain) -> dict[Split, DomainDataset]:
        return self.datasets[Domain(domain)]


def build_datasets(cfg: RunConfig, stats_override: dict[str, NormStats] | None = None) -> PreparedData:
    """Load (or generate) both domains and z-score them with train statistics."""
    d = cfg.data
    if d.synthetic is not None:
        raw = generate_synthetic_splits(cfg.seed, d.synthetic, d.fractions)
    else:
        raw = {
            domain: load_domain_csv(
                path,
                window_len=d.resolved_window_len,
                domain=domain,
                schema=d.schema,
                fractions=d.fractions,
                train_stride=d.train_stride,
            )
            for domain, path in ((Domain.SOURCE, d.source_csv), (Domain.TARGET, d.target_csv))
        }
    datasets: dict[Domain, dict[Split, DomainDataset]] = {}
    stats: dict[str, NormStats] = {}
    for domain, splits in raw.items():
        st = stats_override[domain.value] if stats_override else compute_normalization(splits[Split.TRAIN])
        stats[domain.value] = st
        datasets[domain] = {split: normalize(ds, st) for split, ds in splits.items()}
    return PreparedData(datasets=datasets, stats=stats)


def learning_rate(
    epoch: int,
    total_epochs: int,
    base: float,
    rates: tuple[float, float],
    milestones: tuple[float, float],
) -> float:
    """Piecewise-constant rate; ``epoch`` is 1-based.

    ``base`` before epoch ceil(m1*E), ``rates[0]`` through epoch
    ceil(m2*E), ``rates[1]`` afterwards.
    """
    m1 = math.ceil(milestones[0] * total_epochs)
    m2 = math.ceil(milestones[1] * total_epochs)
    if epoch < m1:
        return base
    if epoch <= m2:
        return rates[0]
    return rates[1]


# ---------------------------------------------------------------------------
# Checkpointing


def save_checkpoint(
    path: Path,
    model: ConditionalDenoiser,
    optimizer: torch.optim.Optimizer,
    cfg: RunConfig,
    stats: dict[str, NormStats],
    feature_names: list[str],
    epoch: int,
    global_step: int,
    best_val_loss: float,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "spec": model.spec.to_dict(),
        "n_features": model.n_features,
        "schedule": {
            "steps": cfg.schedule.steps,
            "beta_start": cfg.schedule.beta_start,
            "beta_end": cfg.schedule.beta_end,
        },
        "stats": {k: v.to_dict() for k, v in stats.items()},
        "feature_names": list(feature_names),
        "config": cfg.to_dict(),
        "epoch": epoch,
        "global_step": global_step,
        "best_val_loss": best_val_loss,
        "torch_rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path):
    """Rebuild (model, schedule, stats, payload) from a checkpoint file."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    spec = DenoiserSpec(**payload["spec"])
    sch = payload["schedule"]
    sched = quadratic_schedule(sch["steps"], sch["beta_start"], sch["beta_end"])
    model = ConditionalDenoiser(spec, payload["n_features"], sched.n_steps)
    model.load_state_dict(payload["model_state"])
    model.eval()
    stats = {k: NormStats.from_dict(v) for k, v in payload["stats"].items()}
    return model, sched, stats, payload


# ---------------------------------------------------------------------------
# Trainer


@dataclass
class _EpochDraws:
    """Per-epoch pre-drawn randomness for one domain, indexed by window."""

    partners: np.ndarray  # partner index in the other domain's train pool
    lams: np.ndarray  # blend ratio per window
    steps: np.ndarray  # diffusion step per window
    eps_gen: torch.Generator  # consumed sequentially over the epoch


class Trainer:
    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        torch.set_num_threads(cfg.optim.torch_threads)
        self.out = cfg.resolved_output_dir()
        self.prepared = build_datasets(cfg)
        self.train_windows = {
            dom: self.prepared[dom][Split.TRAIN].windows for dom in (Domain.SOURCE, Domain.TARGET)
        }
        for dom, windows in self.train_windows.items():
            if not windows:
                raise ValueError(f"{dom.value} domain has no training windows")
        self.n_features = self.prepared[Domain.TARGET][Split.TRAIN].n_features
        self.sched = quadratic_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)

        torch.manual_seed(child_seed(cfg.seed, Stream.MODEL_INIT))
        self.model = ConditionalDenoiser(cfg.model, self.n_features, self.sched.n_steps)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=cfg.optim.lr,
            betas=cfg.optim.adam_betas,
            eps=cfg.optim.adam_eps,
        )
        self.epoch = 0
        self.global_step = 0
        self.best_val_loss = math.inf
        self._val_pack = self._prepare_validation()

    # -- batch assembly ------------------------------------------------------

    def _masked(self, domain: Domain, index: int, epoch: int, stream: Stream = Stream.MASK_TRAIN) -> TimeWindow:
        window = self.train_windows[domain][index]
        rng = child_rng(self.cfg.seed, stream, DOMAIN_CODE[domain], index, epoch)
        return apply_train_masking(window, self.cfg.masking, rng)

    def _filled(self, masked: TimeWindow, domain: Domain, index: int, draws: _EpochDraws, epoch: int) -> TimeWindow:
        fm = self.cfg.fmixup
        if fm.mode != "fmixup":
            return fill_missing(masked, fm.mode)
        other = Domain.SOURCE if domain is Domain.TARGET else Domain.TARGET
        j = int(draws.partners[index])
        try:
            partner = self._masked(other, j, epoch)
        except SkipWindow:
            partner = self.train_windows[other][j]
        return fill_missing(
            masked, "fmixup", partner=partner, alpha=fm.alpha, lam=float(draws.lams[index]), fft_mode=fm.fft_mode
        )

    def _make_batch(self, domain: Domain, indices: np.ndarray, draws: _EpochDraws, epoch: int) -> DiffusionBatch | None:
        filled, steps = [], []
        for i in indices:
            try:
                masked = self._masked(domain, int(i), epoch)
            except SkipWindow:
                continue
            filled.append(self._filled(masked, domain, int(i), draws, epoch))
            steps.append(int(draws.steps[i]))
        if not filled:
            return None
        x0 = torch.as_tensor(np.stack([w.values for w in filled]), dtype=torch.float32)
        cond = torch.as_tensor(np.stack([w.cond_mask for w in filled]), dtype=torch.float32)
        target = torch.as_tensor(np.stack([w.target_mask for w in filled]), dtype=torch.float32)
        t = torch.as_tensor(steps, dtype=torch.long)
        eps = torch.randn(x0.shape, generator=draws.eps_gen, dtype=torch.float32)
        return DiffusionBatch.create(
            x0=x0, x_cond=x0 * cond, cond_mask=cond, target_mask=target, t=t, eps=eps, sched=self.sched
        )

    def _epoch_draws(self, domain: Domain, epoch: int) -> _EpochDraws:
        cfg = self.cfg
        code = DOMAIN_CODE[domain]
        other = Domain.SOURCE if domain is Domain.TARGET else Domain.TARGET
        n = len(self.train_windows[domain])
        n_other = len(self.train_windows[other])
        return _EpochDraws(
            partners=child_rng(cfg.seed, Stream.PAIRING, code, epoch).integers(0, n_other, size=n),
            lams=child_rng(cfg.seed, Stream.MIX_LAMBDA, code, epoch).uniform(*cfg.fmixup.lambda_range, size=n),
            steps=child_rng(cfg.seed, Stream.DIFFUSION_T, code, epoch).integers(1, self.sched.n_steps + 1, size=n),
            eps_gen=torch_generator(cfg.seed, Stream.NOISE, code, epoch),
        )

    # -- optimization ----------------------------------------------------------

    def _branch_loss(self, batch: DiffusionBatch | None, domain: Domain):
        if batch is None:
            return torch.zeros(()), None
        eps_hat = self.model(batch.x_cond, batch.x_t * batch.target_mask, batch.cond_mask, batch.t, domain)
        loss, _ = denoising_loss(batch.eps, eps_hat, batch.target_mask)
        return loss, eps_hat

    def _optimize_step(self, batch_src: DiffusionBatch | None, batch_tgt: DiffusionBatch | None) -> dict:
        cfg = self.cfg
        self.model.train()
        l_src, _ = self._branch_loss(batch_src, Domain.SOURCE)
        l_tgt, eps_hat_tgt = self._branch_loss(batch_tgt, Domain.TARGET)

        delta_value = 0.0
        l_align = torch.zeros(())
        has_targets = batch_tgt is not None and bool(batch_tgt.target_mask.sum() > 0)
        if cfg.cdca_enabled and has_targets and eps_hat_tgt is not None:
            with torch.no_grad():  # source branch in evaluation mode: no gradients through it
                eps_src_on_tgt = self.model(
                    batch_tgt.x_cond, batch_tgt.x_t * batch_tgt.target_mask, batch_tgt.cond_mask, batch_tgt.t, Domain.SOURCE
                )
            delta = discrepancy(eps_hat_tgt, eps_src_on_tgt, batch_tgt.target_mask, per_sample=cfg.align.per_sample)
            penalty = alignment_loss(delta, cfg.align)
            l_align = penalty.mean() if cfg.align.per_sample else penalty
            delta_value = float(delta.detach().mean().item())

        try:
            loss = total_loss(l_src, l_tgt, l_align, cfg.align)
        except FloatingPointError as e:
            raise TrainingDiverged(f"step {self.global_step}: {e}") from e
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"step {self.global_step}: non-finite total loss {loss.item()!r}")

        if loss.requires_grad:
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
        return {
            "loss_source": float(l_src.item()),
            "loss_target": float(l_tgt.item()),
            "delta": delta_value,
            "loss_align": float(l_align.item()),
            "loss_total": float(loss.item()),
        }

    def _run_epoch(self, epoch: int, lr: float) -> list[dict]:
        cfg = self.cfg
        n_tgt = len(self.train_windows[Domain.TARGET])
        n_src = len(self.train_windows[Domain.SOURCE])
        batch = cfg.optim.batch_size
        steps_per_epoch = math.ceil(n_tgt / batch)

        order_tgt = child_rng(cfg.seed, Stream.SHUFFLE, DOMAIN_CODE[Domain.TARGET], epoch).permutation(n_tgt)
        need = steps_per_epoch * batch
        src_parts = []
        rep = 0
        while sum(len(p) for p in src_parts) < need:
            src_parts.append(
                child_rng(cfg.seed, Stream.SHUFFLE, DOMAIN_CODE[Domain.SOURCE], epoch, rep).permutation(n_src)
            )
            rep += 1
        order_src = np.concatenate(src_parts)[:need]

        draws = {dom: self._epoch_draws(dom, epoch) for dom in (Domain.SOURCE, Domain.TARGET)}
        rows = []
        for s in range(steps_per_epoch):
            tgt_idx = order_tgt[s * batch : (s + 1) * batch]
            src_idx = order_src[s * batch : (s + 1) * batch]
            batch_tgt = self._make_batch(Domain.TARGET, tgt_idx, draws[Domain.TARGET], epoch)
            batch_src = self._make_batch(Domain.SOURCE, src_idx, draws[Domain.SOURCE], epoch)
            self.global_step += 1
            stats = self._optimize_step(batch_src, batch_tgt)
            stats["step"] = self.global_step
            stats["lr"] = lr
            rows.append(stats)
        return rows

    # -- validation -------------------------------------------------------------

    def _prepare_validation(self):
        """Fixed validation pack: masks, fills, partners, and noise are drawn
        once (epoch-independent) so validation losses compare across epochs."""
        cfg = self.cfg
        val_tgt = self.prepared[Domain.TARGET][Split.VAL].windows
        partner_pool = self.prepared[Domain.SOURCE][Split.VAL].windows or self.train_windows[Domain.SOURCE]
        if not val_tgt:
            return None
        pair_rng = child_rng(cfg.seed, Stream.PAIRING, DOMAIN_CODE[Domain.TARGET], 0)
        lam_rng = child_rng(cfg.seed, Stream.MIX_LAMBDA, DOMAIN_CODE[Domain.TARGET], 0)
        partner_idx = pair_rng.integers(0, len(partner_pool), size=len(val_tgt))
        lams = lam_rng.uniform(*cfg.fmixup.lambda_range, size=len(val_tgt))

        filled = []
        kept_idx = []
        for idx, w in enumerate(val_tgt):
            try:
                masked = apply_train_masking(w, cfg.masking, child_rng(cfg.seed, Stream.MASK_VAL, 1, idx))
            except SkipWindow:
                continue
            if cfg.fmixup.mode == "fmixup":
                partner = partner_pool[int(partner_idx[idx])]
                filled.append(
                    fill_missing(
                        masked,
                        "fmixup",
                        partner=partner,
                        alpha=cfg.fmixup.alpha,
                        lam=float(lams[idx]),
                        fft_mode=cfg.fmixup.fft_mode,
                    )
                )
            else:
                filled.append(fill_missing(masked, cfg.fmixup.mode))
            kept_idx.append(idx)
        if not filled:
            return None

        x0 = torch.as_tensor(np.stack([w.values for w in filled]), dtype=torch.float32)
        cond = torch.as_tensor(np.stack([w.cond_mask for w in filled]), dtype=torch.float32)
        target = torch.as_tensor(np.stack([w.target_mask for w in filled]), dtype=torch.float32)
        n, k, length = x0.shape
        noise = torch.empty((n, self.sched.n_steps, k, length), dtype=torch.float32)
        for row, idx in enumerate(kept_idx):
            gen = torch_generator(cfg.seed, Stream.VAL_NOISE, idx)
            noise[row] = torch.randn((self.sched.n_steps, k, length), generator=gen)
        return {"x0": x0, "cond": cond, "target": target, "noise": noise}

    def validation_loss(self) -> float | None:
        pack = self._val_pack
        if pack is None:
            return None
        cfg = self.cfg
        self.model.eval()
        total, count = 0.0, 0
        batch = cfg.optim.batch_size
        with torch.no_grad():
            for t in range(1, self.sched.n_steps + 1, cfg.optim.val_t_stride):
                eps = pack["noise"][:, t - 1]
                x_t = forward_sample(pack["x0"], t, eps, self.sched)
                for b in range(0, len(eps), batch):
                    sl = slice(b, b + batch)
                    eps_hat = self.model(
                        pack["x0"][sl] * pack["cond"][sl],
                        x_t[sl] * pack["target"][sl],
                        pack["cond"][sl],
                        t,
                        Domain.TARGET,
                    )
                    loss, n = denoising_loss(eps[sl], eps_hat, pack["target"][sl])
                    total += float(loss.item()) * n
                    count += n
        return total / count if count else None

    # -- logging / resume --------------------------------------------------------

    def _append_log(self, path: Path, rows: list[dict]) -> None:
        with path.open("a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in rows:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])

    def _init_log(self, path: Path, resume: bool, columns=LOG_COLUMNS, max_key: int = 0) -> None:
        if resume and path.exists():
            # drop any rows past the checkpointed position (partial work at interrupt)
            with path.open(newline="", encoding="utf-8") as fh:
                lines = list(csv.reader(fh))
            kept = [lines[0]] + [r for r in lines[1:] if r and int(r[0]) <= max_key]
            with path.open("w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerows(kept)
        else:
            with path.open("w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(columns)

    def _append_val_log(self, path: Path, epoch: int, val_loss: float, is_best: bool) -> None:
        with path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([epoch, repr(val_loss), int(is_best)])

    def _resume(self, path: str | Path) -> None:
        model, _, _, payload = load_checkpoint(path)
        self.model.load_state_dict(model.state_dict())
        self.optimizer.load_state_dict(payload["optimizer_state"])
        self.epoch = int(payload["epoch"])
        self.global_step = int(payload["global_step"])
        self.best_val_loss = float(payload["best_val_loss"])
        logger.info("resumed from %s at epoch %d (step %d)", path, self.epoch, self.global_step)

    def _save(self, name: str) -> Path:
        path = self.out / name
        save_checkpoint(
            path,
            self.model,
            self.optimizer,
            self.cfg,
            self.prepared.stats,
            self.prepared[Domain.TARGET][Split.TRAIN].feature_names,
            self.epoch,
            self.global_step,
            self.best_val_loss,
        )
        return path

    def _dump_spectral_report(self) -> None:
        cfg = self.cfg
        try:
            masked = self._masked(Domain.TARGET, 0, 1)
            draws = self._epoch_draws(Domain.TARGET, 1)
            try:
                partner = self._masked(Domain.SOURCE, int(draws.partners[0]), 1)
            except SkipWindow:
                partner = self.train_windows[Domain.SOURCE][int(draws.partners[0])]
            df = spectral_report(masked, partner, cfg.fmixup.alpha, float(draws.lams[0]), cfg.fmixup.fft_mode)
            df["imag_residual"] = df.attrs["imag_residual"]
            df.to_csv(self.out / "spectral_report.csv", index=False)
        except SkipWindow:
            logger.warning("spectral report skipped: first target window has no observations")

    # -- main loop ------------------------------------------------------------------

    def train(self, resume_from: str | Path | None = None, stop_after_epoch: int | None = None) -> dict:
        """Run (or continue) training; ``stop_after_epoch`` simulates an
        interrupt after that epoch's checkpoint, for later resume."""
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(self.out)
        manifest = build_manifest(
            {dom.value: self.prepared[dom] for dom in (Domain.SOURCE, Domain.TARGET)},
            {dom.value: self.prepared.stats[dom.value] for dom in (Domain.SOURCE, Domain.TARGET)},
            cfg.masking,
            cfg.seed,
        )
        write_manifest(self.out / "manifest.json", manifest)
        if resume_from is not None:
            self._resume(resume_from)
        log_path = self.out / "train_log.csv"
        val_log_path = self.out / "val_log.csv"
        self._init_log(log_path, resume=resume_from is not None, max_key=self.global_step)
        self._init_log(val_log_path, resume=resume_from is not None, columns=VAL_LOG_COLUMNS, max_key=self.epoch)
        if cfg.fmixup.spectral_report and cfg.fmixup.mode == "fmixup":
            self._dump_spectral_report()

        best_path = self.out / "best.ckpt"
        last_path = self.out / "last.ckpt"
        start = time.time()
        for epoch in range(self.epoch + 1, cfg.optim.epochs + 1):
            lr = learning_rate(epoch, cfg.optim.epochs, cfg.optim.lr, cfg.optim.decay_rates, cfg.optim.decay_milestones)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            rows = self._run_epoch(epoch, lr)
            self.epoch = epoch
            self._append_log(log_path, rows)
            self.model.mark_trained(self.global_step)

            if epoch % cfg.optim.val_interval == 0 or epoch == cfg.optim.epochs:
                val = self.validation_loss()
                if val is not None:
                    logger.info("epoch %d: train %.5f, val %.5f", epoch, rows[-1]["loss_total"], val)
                    improved = val < self.best_val_loss
                    if improved:
                        self.best_val_loss = val
                        self._save(best_path.name)
                    self._append_val_log(val_log_path, epoch, val, improved)
            self._save(last_path.name)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                logger.info("stopping after epoch %d as requested", epoch)
                break

        if not best_path.exists():  # no usable validation split: best = final state
            self._save(best_path.name)
        elapsed = time.time() - start

        try:
            from . import report as report_mod

            report_mod.render_training_curves(log_path, self.out / "training_curves.png", val_log_path)
        except Exception:  # figure rendering must not invalidate a finished run
            logger.exception("failed to render training curves")

        logger.info("training finished: %d epochs, %d steps, %.1fs", self.epoch, self.global_step, elapsed)
        return {
            "best": best_path,
            "last": last_path,
            "log": log_path,
            "val_log": val_log_path,
            "best_val_loss": self.best_val_loss,
            "runtime_seconds": elapsed,
        }


def train(cfg: RunConfig, resume_from: str | Path | None = None, stop_after_epoch: int | None = None) -> dict:
    """Train per the run configuration; returns checkpoint and log paths."""
    return Trainer(cfg).train(resume_from=resume_from, stop_after_epoch=stop_after_epoch)
