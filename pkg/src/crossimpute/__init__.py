"""Cross-domain probabilistic time series imputation.

A conditional diffusion imputer trained jointly on a source and a target
domain: originally-missing values are pre-filled by blending low-frequency
amplitude spectra across domains, the denoiser shares its input embedding
and side information while keeping per-domain attention branches, and a
thresholded consistency penalty aligns the two branches' predictions on
target batches.
"""

from .cdca import AlignmentConfig, alignment_loss, discrepancy, total_loss
from .config import ConfigError, RunConfig, load_config
from .data import (
    Domain,
    DomainDataset,
    MaskingConfig,
    NormStats,
    SkipWindow,
    Split,
    TimeWindow,
    apply_test_pattern,
    apply_train_masking,
    load_csv,
    load_domain_csv,
    normalize,
)
from .denoiser import ConditionalDenoiser, DenoiserSpec
from .diffusion import (
    DiffusionBatch,
    ImputationResult,
    NoiseSchedule,
    denoising_loss,
    forward_sample,
    impute,
    impute_batch,
    quadratic_schedule,
    reverse_step,
)
from .evaluation import MetricsReport, compute_metrics, crps_quantile, evaluate, run_ablation
from .fmixup import (
    LowFreqMask,
    SpectralPair,
    decompose,
    fill_missing,
    interpolate_window,
    low_freq_mask,
    mix_amplitude,
    reconstruct,
)
from .synthetic import SyntheticSpec, generate_synthetic, generate_synthetic_splits
from .training import Trainer, TrainingDiverged, build_datasets, learning_rate, load_checkpoint, train

__version__ = "0.1.0"
