"""Synthetic paired-domain series for desk-scale experiments.

Both domains share a set of low-frequency sinusoidal trends (frequencies in
cycles per window). The target domain perturbs them with a per-feature
phase shift and amplitude rescaling plus extra observation noise, all
scaled by ``domain_shift`` (0 leaves the two generating processes
identical), and punches original-missing holes at a configurable rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Domain, DomainDataset, Split, TimeWindow, split_row_ranges
from .seeding import Stream, child_rng

__all__ = ["SyntheticSpec", "generate_synthetic", "generate_synthetic_splits", "write_synthetic_csv"]


@dataclass
class SyntheticSpec:
    """Shape and distortion parameters of the generated pair of domains."""

    n_features: int = 5
    window_len: int = 32
    n_windows: int = 400
    shared_freqs: tuple[float, ...] = (0.25, 1.0, 2.0)  # cycles per window
    domain_shift: float = 0.5
    missing_rate: float = 0.4  # original-missing holes in the target domain
    source_missing_rate: float = 0.0
    noise_scale: float = 0.1
    amp_range: tuple[float, float] = (0.5, 1.5)

    def validate(self) -> None:
        if self.n_features < 1 or self.window_len < 2 or self.n_windows < 1:
            raise ValueError("n_features, window_len, n_windows must be positive")
        if not self.shared_freqs:
            raise ValueError("need at least one shared frequency")
        for name in ("missing_rate", "source_missing_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.domain_shift < 0 or self.noise_scale < 0:
            raise ValueError("domain_shift and noise_scale must be >= 0")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["shared_freqs"] = list(self.shared_freqs)
        d["amp_range"] = list(self.amp_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "shared_freqs" in d:
            d["shared_freqs"] = tuple(d["shared_freqs"])
        if "amp_range" in d:
            d["amp_range"] = tuple(d["amp_range"])
        return cls(**d)


def _generate_series(seed: int, spec: SyntheticSpec) -> dict[Domain, tuple[np.ndarray, np.ndarray]]:
    """Raw (values, obs_mask) per domain, values zeroed at missing holes."""
    spec.validate()
    rng = child_rng(seed, Stream.SYNTH)
    k, length = spec.n_features, spec.window_len
    n_rows = spec.n_windows * length
    t = np.arange(n_rows, dtype=np.float64)

    freqs = np.array(spec.shared_freqs, dtype=np.float64)
    amps = rng.uniform(*spec.amp_range, size=(k, len(freqs)))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(k, len(freqs)))
    # target-domain distortions, all proportional to the shift strength
    amp_scale = 1.0 + spec.domain_shift * rng.uniform(-0.5, 0.5, size=k)
    phase_shift = spec.domain_shift * rng.uniform(0.0, math.pi, size=k)

    angles = 2.0 * math.pi * freqs[None, :, None] * t[None, None, :] / length  # (1, F, N)
    base = (amps[:, :, None] * np.sin(angles + phases[:, :, None])).sum(axis=1)  # (K, N)
    shifted = (amps[:, :, None] * np.sin(angles + (phases + phase_shift[:, None])[:, :, None])).sum(axis=1)

    src_values = base + spec.noise_scale * rng.standard_normal((k, n_rows))
    tgt_noise = spec.noise_scale * (1.0 + spec.domain_shift)
    tgt_values = amp_scale[:, None] * shifted + tgt_noise * rng.standard_normal((k, n_rows))

    src_obs = rng.random((k, n_rows)) >= spec.source_missing_rate
    tgt_obs = rng.random((k, n_rows)) >= spec.missing_rate
    src_values[~src_obs] = 0.0
    tgt_values[~tgt_obs] = 0.0
    return {Domain.SOURCE: (src_values, src_obs), Domain.TARGET: (tgt_values, tgt_obs)}


def _windows_from_range(
    values: np.ndarray,
    obs: np.ndarray,
    row_range: tuple[int, int],
    window_len: int,
    domain: Domain,
    split: Split,
) -> DomainDataset:
    start, stop = row_range
    windows = []
    for s in range(start, stop - window_len + 1, window_len):
        obs_w = obs[:, s : s + window_len].copy()
        windows.append(
            TimeWindow(
                values=values[:, s : s + window_len].copy(),
                obs_mask=obs_w,
                target_mask=~obs_w,
                domain=domain,
                window_id=f"{domain.value}:{split.value}:{s:06d}",
            )
        )
    return DomainDataset(
        windows=windows,
        split=split,
        feature_names=[f"f{i}" for i in range(values.shape[0])],
        sample_period=1.0,
    )


def generate_synthetic(seed: int, spec: SyntheticSpec) -> tuple[DomainDataset, DomainDataset]:
    """All windows of the (source, target) pair, tagged as the train split."""
    series = _generate_series(seed, spec)
    n_rows = spec.n_windows * spec.window_len
    out = []
    for domain in (Domain.SOURCE, Domain.TARGET):
        values, obs = series[domain]
        out.append(_windows_from_range(values, obs, (0, n_rows), spec.window_len, domain, Split.TRAIN))
    return out[0], out[1]


def generate_synthetic_splits(
    seed: int,
    spec: SyntheticSpec,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> dict[Domain, dict[Split, DomainDataset]]:
    """The same pair cut into contiguous train/val/test row ranges."""
    series = _generate_series(seed, spec)
    ranges = split_row_ranges(spec.n_windows * spec.window_len, fractions)
    out: dict[Domain, dict[Split, DomainDataset]] = {}
    for domain, (values, obs) in series.items():
        out[domain] = {
            split: _windows_from_range(values, obs, rng, spec.window_len, domain, split)
            for split, rng in ranges.items()
        }
    return out


def write_synthetic_csv(out_dir: str | Path, seed: int, spec: SyntheticSpec) -> dict[Domain, Path]:
    """Write one CSV per domain (empty cell = missing); byte-stable per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = _generate_series(seed, spec)
    paths = {}
    for domain, (values, obs) in series.items():
        path = out_dir / f"{domain.value}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp"] + [f"f{i}" for i in range(spec.n_features)])
            for row in range(values.shape[1]):
                cells = [str(row)]
                for f in range(spec.n_features):
                    cells.append(f"{values[f, row]:.10g}" if obs[f, row] else "")
                writer.writerow(cells)
        paths[domain] = path
    return paths
