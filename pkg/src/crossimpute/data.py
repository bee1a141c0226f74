"""Dataset ingestion, windowing, normalization, and missing-value masking.

Conventions used throughout the package:

* a window is a ``(K, L)`` matrix — features along axis 0, timestamps along
  axis 1;
* ``obs_mask[k, l] = True`` means the raw value was present in the input;
* ``target_mask`` marks imputation targets: every originally-missing
  position plus any artificially masked (held-out) observed position;
* the conditional mask is the complement, ``obs_mask & ~target_mask``;
* values at originally-missing positions hold the sentinel 0 (raw units
  before normalization, normalized units after) until an interpolation
  strategy fills them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Domain",
    "Split",
    "TimeWindow",
    "DomainDataset",
    "MaskingConfig",
    "NormStats",
    "SkipWindow",
    "CsvFormatError",
    "NormalizationError",
    "load_csv",
    "load_domain_csv",
    "split_row_ranges",
    "compute_normalization",
    "normalize",
    "apply_train_masking",
    "apply_test_pattern",
    "build_manifest",
    "write_manifest",
]


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class SkipWindow(Exception):
    """Raised when a window cannot be masked (e.g. nothing observed)."""


class CsvFormatError(ValueError):
    """Malformed CSV input: bad cell, inconsistent row, unknown column."""


class NormalizationError(ValueError):
    """Normalization statistics cannot be computed."""


@dataclass
class NormStats:
    """Per-feature location/scale fitted on observed training entries."""

    means: np.ndarray  # (K,)
    scales: np.ndarray  # (K,), zero-variance features carry scale 1.0
    feature_names: list[str]

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.means[:, None]) / self.scales[:, None]

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.scales[:, None] + self.means[:, None]

    def to_dict(self) -> dict:
        return {
            name: {"mean": float(m), "scale": float(s)}
            for name, m, s in zip(self.feature_names, self.means, self.scales)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        names = list(d)
        means = np.array([d[n]["mean"] for n in names], dtype=np.float64)
        scales = np.array([d[n]["scale"] for n in names], dtype=np.float64)
        return cls(means=means, scales=scales, feature_names=names)


@dataclass
class TimeWindow:
    """One (K, L) slice of a multivariate series with its masks."""

    values: np.ndarray  # (K, L) float64
    obs_mask: np.ndarray  # (K, L) bool, True = observed in the raw data
    target_mask: np.ndarray  # (K, L) bool, True = imputation target
    domain: Domain
    window_id: str
    norm_record: NormStats | None = None

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def cond_mask(self) -> np.ndarray:
        """Positions supplied to the denoiser as conditioning."""
        return self.obs_mask & ~self.target_mask

    @property
    def artificial_mask(self) -> np.ndarray:
        """Observed positions held out as targets (ground truth known)."""
        return self.target_mask & self.obs_mask

    @property
    def original_missing_mask(self) -> np.ndarray:
        return ~self.obs_mask

    def validate(self) -> None:
        """Check the mask algebra; raises AssertionError on violation."""
        assert self.values.shape == self.obs_mask.shape == self.target_mask.shape
        assert not np.any(self.target_mask & self.cond_mask)
        assert np.all(self.target_mask[~self.obs_mask])
        union = self.cond_mask ^ self.artificial_mask ^ self.original_missing_mask
        assert np.all(union), "cond/artificial/original-missing must partition the window"


@dataclass
class DomainDataset:
    """All windows of one domain and split, sharing K and L."""

    windows: list[TimeWindow]
    split: Split
    feature_names: list[str]
    sample_period: float = 1.0

    def __post_init__(self) -> None:
        shapes = {w.values.shape for w in self.windows}
        if len(shapes) > 1:
            raise ValueError(f"windows disagree on shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


@dataclass
class MaskingConfig:
    """Train-time self-supervision masking and test-time pattern simulation."""

    train_strategy: str = "point"  # "point" | "block"
    point_ratio_range: tuple[float, float] = (0.0, 1.0)
    block_extra_point_ratio: float = 0.05
    test_pattern: str = "point"  # "point" | "block"
    test_point_rate: float = 0.10
    test_block_point_rate: float = 0.05
    test_block_prob: float = 0.0015
    test_block_len_range: tuple[int, int] = (1, 4)
    seed: int = 0

    def validate(self, window_len: int | None = None) -> None:
        if self.train_strategy not in ("point", "block"):
            raise ValueError(f"unknown train_strategy {self.train_strategy!r}")
        if self.test_pattern not in ("point", "block"):
            raise ValueError(f"unknown test_pattern {self.test_pattern!r}")
        lo, hi = self.point_ratio_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"point_ratio_range {self.point_ratio_range} outside [0, 1]")
        for name in ("block_extra_point_ratio", "test_point_rate", "test_block_point_rate", "test_block_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        blo, bhi = self.test_block_len_range
        if blo < 1 or bhi < blo:
            raise ValueError(f"empty block length range {self.test_block_len_range}")
        if window_len is not None and bhi > window_len:
            raise ValueError(f"block length {bhi} exceeds window length {window_len}")

    def to_dict(self) -> dict:
        return {
            "train_strategy": self.train_strategy,
            "point_ratio_range": list(self.point_ratio_range),
            "block_extra_point_ratio": self.block_extra_point_ratio,
            "test_pattern": self.test_pattern,
            "test_point_rate": self.test_point_rate,
            "test_block_point_rate": self.test_block_point_rate,
            "test_block_prob": self.test_block_prob,
            "test_block_len_range": list(self.test_block_len_range),
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_cell(raw: str, row: int, column: str) -> tuple[float, bool]:
    text = raw.strip()
    if text == "":
        return 0.0, False  # sentinel before interpolation
    try:
        return float(text), True
    except ValueError:
        raise CsvFormatError(f"data row {row}, column {column!r}: could not parse {raw!r} as a number") from None


def _sample_period(timestamps: list[str]) -> float:
    """Median spacing between consecutive timestamps, in seconds when the
    column parses as datetimes, in raw units when numeric, else 1.0."""
    if len(timestamps) < 2:
        return 1.0
    try:
        ts = np.array([float(t) for t in timestamps], dtype=np.float64)
    except ValueError:
        try:
            import pandas as pd

            ts = pd.to_datetime(timestamps).asi8 / 1e9
        except (ValueError, TypeError):
            return 1.0
    diffs = np.diff(ts)
    return float(np.median(diffs)) if len(diffs) else 1.0


def _cut_windows(
    values: np.ndarray,
    obs: np.ndarray,
    window_len: int,
    stride: int,
    domain: Domain,
    split: Split,
    row_offset: int,
) -> list[TimeWindow]:
    n_rows = values.shape[1]
    windows = []
    for start in range(0, n_rows - window_len + 1, stride):
        sl = slice(start, start + window_len)
        obs_w = obs[:, sl].copy()
        windows.append(
            TimeWindow(
                values=values[:, sl].copy(),
                obs_mask=obs_w,
                target_mask=~obs_w,
                domain=domain,
                window_id=f"{domain.value}:{split.value}:{row_offset + start:06d}",
            )
        )
    return windows


def load_csv(
    path: str | Path,
    schema: Sequence[str] | None = None,
    *,
    window_len: int,
    stride: int | None = None,
    domain: Domain = Domain.TARGET,
    split: Split = Split.TRAIN,
    row_range: tuple[int, int] | None = None,
) -> DomainDataset:
    """Read a timestamp + features CSV into non/overlapping windows.

    Empty cells denote missing values; their positions get ``obs_mask =
    False`` and the value sentinel 0. ``schema`` selects and orders the
    feature columns; by default every non-timestamp column is used.
    ``row_range`` restricts to data rows ``[start, stop)`` (split slicing).
    """
    path = Path(path)
    stride = window_len if stride is None else stride
    if stride < 1 or window_len < 1:
        raise ValueError("window_len and stride must be >= 1")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise CsvFormatError(f"{path}: need a timestamp column plus at least one feature column")
        feature_cols = header[1:]
        if schema is not None:
            missing = [c for c in schema if c not in feature_cols]
            if missing:
                raise CsvFormatError(f"{path}: schema columns {missing} not present in header")
            col_idx = [1 + feature_cols.index(c) for c in schema]
            feature_names = list(schema)
        else:
            col_idx = list(range(1, len(header)))
            feature_names = feature_cols

        timestamps: list[str] = []
        rows: list[list[str]] = []
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise CsvFormatError(f"{path}: data row {i} has {len(row)} fields, expected {len(header)}")
            timestamps.append(row[0])
            rows.append(row)

    if row_range is not None:
        start, stop = row_range
        rows = rows[start:stop]
        timestamps = timestamps[start:stop]
        row_offset = start
    else:
        row_offset = 0

    n_rows, n_feat = len(rows), len(feature_names)
    values = np.zeros((n_feat, n_rows), dtype=np.float64)
    obs = np.zeros((n_feat, n_rows), dtype=bool)
    for r, row in enumerate(rows):
        for f, c in enumerate(col_idx):
            values[f, r], obs[f, r] = _parse_cell(row[c], row_offset + r + 1, header[c])

    return DomainDataset(
        windows=_cut_windows(values, obs, window_len, stride, domain, split, row_offset),
        split=split,
        feature_names=feature_names,
        sample_period=_sample_period(timestamps),
    )


def split_row_ranges(n_rows: int, fractions: tuple[float, float, float]) -> dict[Split, tuple[int, int]]:
    """Contiguous row ranges for train/val/test from split fractions."""
    f_train, f_val, f_test = fractions
    total = f_train + f_val + f_test
    if not math.isclose(total, 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must sum to 1, got {total}")
    a = int(round(n_rows * f_train))
    b = a + int(round(n_rows * f_val))
    return {Split.TRAIN: (0, a), Split.VAL: (a, b), Split.TEST: (b, n_rows)}


def load_domain_csv(
    path: str | Path,
    *,
    window_len: int,
    domain: Domain,
    schema: Sequence[str] | None = None,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    train_stride: int | None = None,
) -> dict[Split, DomainDataset]:
    """Load one CSV and slice it into train/val/test window sets.

    Val/Test windows are always cut non-overlapping (stride = window
    length); the train stride is configurable.
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        n_rows = sum(1 for _ in fh) - 1
    ranges = split_row_ranges(n_rows, fractions)
    out: dict[Split, DomainDataset] = {}
    for split, rng in ranges.items():
        stride = train_stride if split is Split.TRAIN else None
        out[split] = load_csv(
            path,
            schema,
            window_len=window_len,
            stride=stride,
            domain=domain,
            split=split,
            row_range=rng,
        )
    return out


# ---------------------------------------------------------------------------
# Normalization


def compute_normalization(dataset: DomainDataset) -> NormStats:
    """Fit per-feature z-score statistics on observed training entries only."""
    if dataset.split is not Split.TRAIN:
        raise NormalizationError(f"statistics must come from the train split, got {dataset.split.value}")
    if not dataset.windows:
        raise NormalizationError("train split has no windows")
    values = np.stack([w.values for w in dataset.windows])  # (N, K, L)
    obs = np.stack([w.obs_mask for w in dataset.windows])
    k = values.shape[1]
    means = np.zeros(k)
    scales = np.ones(k)
    for f in range(k):
        observed = values[:, f, :][obs[:, f, :]]
        if observed.size == 0:
            raise NormalizationError(f"feature {dataset.feature_names[f]!r} has no observed training entries")
        means[f] = observed.mean()
        std = observed.std()
        scales[f] = std if std > 0 else 1.0
    return NormStats(means=means, scales=scales, feature_names=list(dataset.feature_names))


def normalize(dataset: DomainDataset, stats: NormStats | None = None) -> DomainDataset:
    """Z-score a dataset, keeping the missing-value sentinel at 0.

    When ``stats`` is omitted the dataset must be the train split and the
    statistics are fitted on it; val/test splits must pass the train stats.
    """
    if stats is None:
        stats = compute_normalization(dataset)
    windows = []
    for w in dataset.windows:
        values = stats.transform(w.values)
        values[~w.obs_mask] = 0.0
        windows.append(replace(w, values=values, norm_record=stats))
    return DomainDataset(
        windows=windows,
        split=dataset.split,
        feature_names=list(dataset.feature_names),
        sample_period=dataset.sample_period,
    )


# ---------------------------------------------------------------------------
# Masking


def _round_half_even(x: float) -> int:
    # builtin round() is banker's rounding, kept explicit for determinism
    return int(round(x))


def _choose_positions(rng: np.random.Generator, candidates: np.ndarray, count: int) -> np.ndarray:
    """Pick ``count`` flat indices among ``candidates`` without replacement."""
    if count <= 0:
        return np.empty(0, dtype=np.intp)
    return rng.choice(candidates, size=min(count, candidates.size), replace=False)


def apply_train_masking(window: TimeWindow, cfg: MaskingConfig, rng: np.random.Generator) -> TimeWindow:
    """Artificially mask observed positions for self-supervised training.

    Point strategy: a ratio r drawn uniformly from ``point_ratio_range``
    masks exactly round(r * n_observed) observed positions. Block strategy:
    one contiguous time interval of length uniform in [ceil(L/2), L] is
    masked across all features, plus ``block_extra_point_ratio`` of the
    observed positions at random.
    """
    obs_flat = np.flatnonzero(window.obs_mask)
    if obs_flat.size == 0:
        raise SkipWindow(f"window {window.window_id} has no observed positions")

    k, length = window.values.shape
    artificial = np.zeros((k, length), dtype=bool)
    if cfg.train_strategy == "point":
        r = rng.uniform(*cfg.point_ratio_range)
        chosen = _choose_positions(rng, obs_flat, _round_half_even(r * obs_flat.size))
        artificial.flat[chosen] = True
    elif cfg.train_strategy == "block":
        lo = math.ceil(length / 2)
        block_len = int(rng.integers(lo, length + 1))
        start = int(rng.integers(0, length - block_len + 1))
        artificial[:, start : start + block_len] = True
        extra = _choose_positions(rng, obs_flat, _round_half_even(cfg.block_extra_point_ratio * obs_flat.size))
        artificial.flat[extra] = True
        artificial &= window.obs_mask
    else:
        raise ValueError(f"unknown train_strategy {cfg.train_strategy!r}")

    return replace(window, target_mask=artificial | ~window.obs_mask)


def apply_test_pattern(window: TimeWindow, cfg: MaskingConfig, rng: np.random.Generator) -> TimeWindow:
    """Simulate a test-time missing pattern on observed positions.

    Point pattern masks exactly round(test_point_rate * n_observed)
    positions. Block pattern masks ``test_block_point_rate`` of observed
    positions plus, for each (feature, timestamp) independently with
    probability ``test_block_prob``, a block of length uniform in
    ``test_block_len_range``. Evaluation targets are the artificially
    masked positions only; their ground truth stays in ``values``.
    """
    obs_flat = np.flatnonzero(window.obs_mask)
    if obs_flat.size == 0:
        raise SkipWindow(f"window {window.window_id} has no observed positions")

    k, length = window.values.shape
    artificial = np.zeros((k, length), dtype=bool)
    if cfg.test_pattern == "point":
        chosen = _choose_positions(rng, obs_flat, _round_half_even(cfg.test_point_rate * obs_flat.size))
        artificial.flat[chosen] = True
    elif cfg.test_pattern == "block":
        chosen = _choose_positions(rng, obs_flat, _round_half_even(cfg.test_block_point_rate * obs_flat.size))
        artificial.flat[chosen] = True
        starts = rng.random((k, length)) < cfg.test_block_prob
        lo, hi = cfg.test_block_len_range
        for f, t in zip(*np.nonzero(starts)):
            block_len = int(rng.integers(lo, hi + 1))
            artificial[f, t : t + block_len] = True
        artificial &= window.obs_mask
    else:
        raise ValueError(f"unknown test_pattern {cfg.test_pattern!r}")

    return replace(window, target_mask=artificial | ~window.obs_mask)


# ---------------------------------------------------------------------------
# Manifest


def build_manifest(
    domains: dict[str, dict[Split, DomainDataset]],
    stats: dict[str, NormStats],
    masking: MaskingConfig,
    seed: int,
) -> dict:
    """Everything needed to rebuild splits and masks bit-exactly."""
    manifest: dict = {"format_version": 1, "seed": seed, "masking": masking.to_dict(), "domains": {}}
    for name, splits in domains.items():
        entry: dict = {"normalization": stats[name].to_dict(), "splits": {}}
        for split, ds in splits.items():
            entry["splits"][split.value] = {
                "n_windows": len(ds),
                "window_ids": [w.window_id for w in ds.windows],
                "window_shape": [ds.windows[0].n_features, ds.windows[0].n_steps] if ds.windows else None,
                "sample_period": ds.sample_period,
            }
        manifest["domains"][name] = entry
    return manifest


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

