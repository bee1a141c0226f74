"""Cross-domain consistency alignment on noise predictions.

The target branch and the (frozen) source branch predict noise for the same
target-domain batch — same noisy inputs, same step, same noise draw. Their
masked mean absolute difference is penalized only inside a moderate band:
below ``tau_l`` nothing happens, above it the excess is penalized linearly,
and the penalty saturates at ``tau_h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = ["AlignmentConfig", "discrepancy", "alignment_loss", "total_loss"]


@dataclass
class AlignmentConfig:
    """Thresholds and weight of the alignment penalty."""

    tau_l: float = 0.05
    tau_h: float = 0.5
    mu_align: float = 1.0
    per_sample: bool = False  # threshold each window's discrepancy separately

    def validate(self) -> None:
        if self.tau_l < 0:
            raise ValueError(f"tau_l must be >= 0, got {self.tau_l}")
        if self.tau_h <= 0:
            raise ValueError(f"tau_h must be > 0, got {self.tau_h}")
        if not self.tau_l < self.tau_h:
            raise ValueError(f"require tau_l < tau_h, got ({self.tau_l}, {self.tau_h})")
        if self.mu_align < 0:
            raise ValueError(f"mu_align must be >= 0, got {self.mu_align}")

    def to_dict(self) -> dict:
        return {
            "tau_l": self.tau_l,
            "tau_h": self.tau_h,
            "mu_align": self.mu_align,
            "per_sample": self.per_sample,
        }


def discrepancy(
    eps_tgt: torch.Tensor,
    eps_src_on_tgt: torch.Tensor,
    target_mask: torch.Tensor,
    per_sample: bool = False,
) -> torch.Tensor:
    """Mean absolute prediction difference over target-masked positions.

    Returns a scalar (batch-level average) or, with ``per_sample``, one
    value per leading-batch entry. The source-side predictions must be
    detached by the caller so gradients flow only through the target branch.
    """
    if eps_tgt.shape != eps_src_on_tgt.shape or eps_tgt.shape != target_mask.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_tgt.shape)}, {tuple(eps_src_on_tgt.shape)}, {tuple(target_mask.shape)}"
        )
    mask = target_mask.to(eps_tgt.dtype)
    diff = (eps_tgt - eps_src_on_tgt).abs() * mask
    if per_sample:
        counts = mask.reshape(mask.shape[0], -1).sum(dim=1)
        if torch.any(counts == 0):
            raise ValueError("a batch entry has an empty target mask")
        return diff.reshape(diff.shape[0], -1).sum(dim=1) / counts
    count = mask.sum()
    if count == 0:
        raise ValueError("empty target mask")
    return diff.sum() / count


def alignment_loss(delta, cfg: AlignmentConfig):
    """Piecewise penalty: 0 below tau_l, then min(delta - tau_l, tau_h).

    Accepts a float or a tensor (elementwise); both flat regions carry zero
    gradient, the linear region gradient 1.
    """
    if isinstance(delta, torch.Tensor):
        return torch.clamp(delta - cfg.tau_l, min=0.0, max=cfg.tau_h)
    return min(max(delta - cfg.tau_l, 0.0), cfg.tau_h)


def _check_finite(name: str, value) -> None:
    finite = torch.isfinite(value).all().item() if isinstance(value, torch.Tensor) else math.isfinite(value)
    if not finite:
        raise FloatingPointError(f"non-finite loss component {name}: {value!r}")


def total_loss(l_src, l_tgt, l_align, cfg: AlignmentConfig):
    """Overall objective: l_src + l_tgt + mu_align * l_align."""
    for name, value in (("source", l_src), ("target", l_tgt), ("alignment", l_align)):
        _check_finite(name, value)
    return l_src + l_tgt + cfg.mu_align * l_align
