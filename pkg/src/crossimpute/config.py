"""Run configuration: one YAML file, flat dotted-key overrides, validation.

Every run resolves its configuration once (file + overrides + environment)
and writes the resolved copy next to its outputs. The alignment thresholds
are deliberately mandatory whenever consistency alignment is enabled, so no
experiment silently runs on implicit defaults.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
import yaml

from .cdca import AlignmentConfig
from .data import MaskingConfig
from .denoiser import DenoiserSpec
from .synthetic import SyntheticSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "apply_overrides", "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "CROSSIMPUTE_OUT"

INTERPOLATION_MODES = ("fmixup", "zero", "linear")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _build(cls, d: dict, where: str):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {where!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"section {where!r}: {e}") from None


@dataclass
class DataConfig:
    window_len: int | None = None
    source_csv: str | None = None
    target_csv: str | None = None
    schema: tuple[str, ...] | None = None
    train_stride: int | None = None
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    synthetic: SyntheticSpec | None = None

    def validate(self) -> None:
        if self.synthetic is not None:
            if self.source_csv or self.target_csv:
                raise ConfigError("data: give either synthetic or csv paths, not both")
            self.synthetic.validate()
        else:
            if not (self.source_csv and self.target_csv):
                raise ConfigError("data: need source_csv and target_csv (or a synthetic section)")
            for p in (self.source_csv, self.target_csv):
                if not Path(p).exists():
                    raise ConfigError(f"data: file not found: {p}")
            if self.window_len is None or self.window_len < 2:
                raise ConfigError("data: window_len must be set (>= 2) for csv inputs")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"data: split fractions must sum to 1, got {self.fractions}")

    @property
    def resolved_window_len(self) -> int:
        if self.synthetic is not None:
            return self.synthetic.window_len
        assert self.window_len is not None
        return self.window_len


@dataclass
class FmixupConfig:
    alpha: float = 0.003
    lambda_range: tuple[float, float] = (0.0, 1.0)
    mode: str = "fmixup"  # fmixup | zero | linear
    fft_mode: str = "2d"  # 2d | 1d (per-feature transforms)
    spectral_report: bool = False  # dump one blend diagnostic per run

    def validate(self) -> None:
        if self.mode not in INTERPOLATION_MODES:
            raise ConfigError(f"fmixup.mode must be one of {INTERPOLATION_MODES}, got {self.mode!r}")
        if self.mode == "fmixup" and not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"fmixup.alpha must lie in (0, 1), got {self.alpha}")
        lo, hi = self.lambda_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"fmixup.lambda_range {self.lambda_range} outside [0, 1]")
        if self.fft_mode not in ("2d", "1d"):
            raise ConfigError(f"fmixup.fft_mode must be 2d or 1d, got {self.fft_mode!r}")


@dataclass
class ScheduleConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.5

    def validate(self) -> None:
        if self.steps < 2:
            raise ConfigError("schedule.steps must be >= 2")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ConfigError(f"schedule: require 0 < beta_start < beta_end < 1, got ({self.beta_start}, {self.beta_end})")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    decay_milestones: tuple[float, float] = (0.75, 0.90)
    decay_rates: tuple[float, float] = (1e-4, 1e-5)
    batch_size: int = 16
    epochs: int = 200
    val_interval: int = 5
    val_t_stride: int = 1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    torch_threads: int = 1

    def validate(self) -> None:
        m1, m2 = self.decay_milestones
        if not (0.0 < m1 < m2 < 1.0):
            raise ConfigError(f"optim.decay_milestones must be increasing in (0, 1), got {self.decay_milestones}")
        r1, r2 = self.decay_rates
        if not (self.lr > r1 > r2 > 0.0):
            raise ConfigError(f"optim.decay_rates must decrease from lr, got lr={self.lr}, rates={self.decay_rates}")
        for name in ("batch_size", "epochs", "val_interval", "val_t_stride", "torch_threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"optim.{name} must be >= 1")


@dataclass
class EvalConfig:
    n_samples: int = 100  # posterior samples per window; desk configs use 10

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("eval.n_samples must be >= 1")


@dataclass
class RunConfig:
    data: DataConfig
    seed: int = 0
    output_dir: str = "runs/run"
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    fmixup: FmixupConfig = field(default_factory=FmixupConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserSpec = field(default_factory=DenoiserSpec)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    cdca_enabled: bool = True
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.validate()
        self.masking.validate(self.data.resolved_window_len)
        self.fmixup.validate()
        self.schedule.validate()
        self.model.validate()
        self.align.validate()
        self.optim.validate()
        self.eval.validate()

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "cdca_enabled": self.cdca_enabled,
            "data": {
                "window_len": self.data.window_len,
                "source_csv": self.data.source_csv,
                "target_csv": self.data.target_csv,
                "schema": list(self.data.schema) if self.data.schema else None,
                "train_stride": self.data.train_stride,
                "fractions": list(self.data.fractions),
                "synthetic": self.data.synthetic.to_dict() if self.data.synthetic else None,
            },
            "masking": self.masking.to_dict(),
            "fmixup": dataclasses.asdict(self.fmixup),
            "schedule": dataclasses.asdict(self.schedule),
            "model": self.model.to_dict(),
            "align": self.align.to_dict(),
            "optim": dataclasses.asdict(self.optim),
            "eval": dataclasses.asdict(self.eval),
        }
        d["optim"]["decay_milestones"] = list(self.optim.decay_milestones)
        d["optim"]["decay_rates"] = list(self.optim.decay_rates)
        d["optim"]["adam_betas"] = list(self.optim.adam_betas)
        d["fmixup"]["lambda_range"] = list(self.fmixup.lambda_range)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {
            "seed",
            "output_dir",
            "cdca_enabled",
            "data",
            "masking",
            "fmixup",
            "schedule",
            "model",
            "align",
            "optim",
            "eval",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
        if "data" not in raw:
            raise ConfigError("missing required section 'data'")

        data_raw = dict(raw["data"] or {})
        synth = data_raw.pop("synthetic", None)
        data = _build(DataConfig, data_raw, "data")
        if synth is not None:
            data.synthetic = SyntheticSpec.from_dict(synth)

        align_raw = dict(raw.get("align") or {})
        cdca_enabled = bool(raw.get("cdca_enabled", True))
        if cdca_enabled:
            missing = [k for k in ("tau_l", "tau_h", "mu_align") if k not in align_raw]
            if missing:
                raise ConfigError(
                    f"align: key(s) {missing} are mandatory when cdca_enabled is true; set them explicitly"
                )

        cfg = cls(
            data=data,
            seed=int(raw.get("seed", 0)),
            output_dir=str(raw.get("output_dir", "runs/run")),
            masking=_build(MaskingConfig, raw.get("masking") or {}, "masking"),
            fmixup=_build(FmixupConfig, raw.get("fmixup") or {}, "fmixup"),
            schedule=_build(ScheduleConfig, raw.get("schedule") or {}, "schedule"),
            model=_build(DenoiserSpec, raw.get("model") or {}, "model"),
            align=_build(AlignmentConfig, align_raw, "align"),
            cdca_enabled=cdca_enabled,
            optim=_build(OptimConfig, raw.get("optim") or {}, "optim"),
            eval=_build(EvalConfig, raw.get("eval") or {}, "eval"),
        )
        cfg.validate()
        return cfg

    def resolved_output_dir(self) -> Path:
        """Output directory, rooted at $CROSSIMPUTE_OUT when set and relative."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def write_resolved(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved_config.yaml"
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Read, override, and validate a YAML run configuration."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return RunConfig.from_dict(raw)
