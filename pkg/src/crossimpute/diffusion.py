"""Noise schedule, forward corruption, reverse sampling, masked objective.

Diffusion steps are 1-based: ``t`` runs from 1 to ``T``. The terminal
reverse step (t = 1) is deterministic because the posterior std is defined
with alpha_bar at step 0 equal to 1.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import TimeWindow
from .seeding import Stream, torch_generator

__all__ = [
    "NoiseSchedule",
    "DiffusionBatch",
    "ImputationResult",
    "quadratic_schedule",
    "forward_sample",
    "reverse_step",
    "denoising_loss",
    "impute",
    "impute_batch",
]

# eps_model(x_cond, x_noisy_targets, cond_mask, t) -> eps_hat, all (B, K, L)
EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, int], torch.Tensor]


@dataclass
class NoiseSchedule:
    """Beta/alpha sequences for T steps plus the posterior stds.

    ``sigmas[t-1]**2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t``
    with alpha_bar_0 := 1, so ``sigmas[0] = 0``.
    """

    betas: np.ndarray  # (T,), strictly increasing, in (0, 1)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 2:
            raise ValueError("need at least two diffusion steps")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(self.betas) <= 0):
            raise ValueError("betas must be strictly increasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bars) >= 0) or np.any(self.alpha_bars <= 0):
            raise ValueError("alpha_bars must be strictly decreasing in (0, 1]")
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        self.sigmas = np.sqrt((1.0 - prev) / (1.0 - self.alpha_bars) * self.betas)

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"diffusion step {t} outside [1, {self.n_steps}]")


def quadratic_schedule(n_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Noise levels beta_t = (sqrt(b1) + (t-1)/(T-1) * (sqrt(bT) - sqrt(b1)))^2.

    The endpoints are snapped to exactly ``beta_start`` / ``beta_end``
    (the formula yields them exactly; sqrt/square round-tripping does not).
    """
    if n_steps < 2:
        raise ValueError(f"need at least 2 steps, got {n_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"require 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), n_steps) ** 2
    betas[0] = beta_start
    betas[-1] = beta_end
    return NoiseSchedule(betas=betas)


def _gather_coef(values: np.ndarray, t, like) -> "float | np.ndarray | torch.Tensor":
    """Schedule coefficient(s) for step(s) t, broadcastable against ``like``."""
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > len(values)):
        raise ValueError(f"diffusion step {t} outside [1, {len(values)}]")
    coef = values[t_arr - 1]
    if coef.ndim == 0:
        return float(coef)
    coef = coef.reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    return coef


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """Closed-form corruption sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works elementwise on numpy arrays or torch tensors; ``t`` may be a
    scalar step or one step per leading-batch entry.
    """
    abar = _gather_coef(sched.alpha_bars, t, x0)
    if isinstance(abar, float):
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
    return abar**0.5 * x0 + (1.0 - abar) ** 0.5 * eps


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z):
    """One reverse transition: posterior mean plus sigma_t * z.

    mean = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
    ``z`` must be standard normal for t > 1 and 0 at the terminal step.
    """
    sched.check_step(t)
    beta = float(sched.betas[t - 1])
    alpha = float(sched.alphas[t - 1])
    abar = float(sched.alpha_bars[t - 1])
    sigma = float(sched.sigmas[t - 1])
    mean = (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
    if sigma == 0.0:
        return mean
    return mean + sigma * z


def denoising_loss(eps: torch.Tensor, eps_hat: torch.Tensor, loss_mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean squared noise-prediction error over masked positions.

    Returns the scalar loss and the number of positions it averaged over;
    a zero count signals the caller to skip (loss is 0 with no gradient).
    """
    if eps.shape != eps_hat.shape or eps.shape != loss_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)}, {tuple(eps_hat.shape)}, {tuple(loss_mask.shape)}")
    mask = loss_mask.to(eps.dtype)
    n_eval = int(mask.sum().item())
    if n_eval == 0:
        return eps.new_zeros(()), 0
    residual = (eps - eps_hat) * mask
    return residual.square().sum() / n_eval, n_eval


@dataclass
class DiffusionBatch:
    """One corrupted training batch, all tensors (B, K, L)."""

    x0: torch.Tensor  # refined targets
    x_cond: torch.Tensor  # conditional observations (zero elsewhere)
    cond_mask: torch.Tensor
    target_mask: torch.Tensor
    t: torch.Tensor  # (B,) steps in 1..T
    eps: torch.Tensor
    x_t: torch.Tensor  # closed-form corruption of x0

    @classmethod
    def create(
        cls,
        x0: torch.Tensor,
        x_cond: torch.Tensor,
        cond_mask: torch.Tensor,
        target_mask: torch.Tensor,
        t: torch.Tensor,
        eps: torch.Tensor,
        sched: NoiseSchedule,
    ) -> "DiffusionBatch":
        return cls(
            x0=x0,
            x_cond=x_cond,
            cond_mask=cond_mask,
            target_mask=target_mask,
            t=t,
            eps=eps,
            x_t=forward_sample(x0, t, eps, sched),
        )


@dataclass
class ImputationResult:
    """Posterior samples for one window's target positions."""

    window: TimeWindow
    samples: np.ndarray  # (S, K, L): model draws at targets, truth elsewhere
    point_estimate: np.ndarray  # (K, L) per-position median over samples
    target_mask: np.ndarray
    eval_mask: np.ndarray  # artificially-masked positions (truth known)

    @property
    def window_id(self) -> str:
        return self.window.window_id

    @property
    def empty(self) -> bool:
        """True when the window has no target positions (metrics undefined)."""
        return not bool(self.target_mask.any())


def _window_seed_key(window_id: str) -> int:
    return zlib.crc32(window_id.encode("utf-8"))


def impute_batch(
    windows: Sequence[TimeWindow],
    eps_model: EpsModel,
    sched: NoiseSchedule,
    n_samples: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> list[ImputationResult]:
    """Sample the reverse process for a batch of windows.

    Each window owns a random stream derived from its id, so results do not
    depend on batch composition or ordering. All ``n_samples`` trajectories
    run as one flattened batch through the model.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_win = len(windows)
    if n_win == 0:
        return []
    k, length = windows[0].values.shape
    n_steps = sched.n_steps

    values = torch.as_tensor(np.stack([w.values for w in windows]), dtype=dtype)
    cond = torch.as_tensor(np.stack([w.cond_mask for w in windows]), dtype=dtype)
    target = torch.as_tensor(np.stack([w.target_mask for w in windows]), dtype=dtype)
    x_cond = values * cond

    # draws[s, 0] seeds the trajectory; draws[s, j] is z for step t = T - j + 1
    draws = torch.empty((n_win, n_samples, n_steps, k, length), dtype=dtype)
    for i, w in enumerate(windows):
        gen = torch_generator(seed, Stream.IMPUTE, _window_seed_key(w.window_id))
        draws[i] = torch.randn((n_samples, n_steps, k, length), generator=gen, dtype=dtype)

    # flatten (window, sample) into one model batch
    def flat(x: torch.Tensor) -> torch.Tensor:
        return x.unsqueeze(1).expand(n_win, n_samples, k, length).reshape(-1, k, length)

    x_cond_f, cond_f, target_f = flat(x_cond), flat(cond), flat(target)
    x = draws[:, :, 0].reshape(-1, k, length) * target_f
    with torch.no_grad():
        for t in range(n_steps, 0, -1):
            eps_hat = eps_model(x_cond_f, x * target_f, cond_f, t)
            z = draws[:, :, n_steps - t + 1].reshape(-1, k, length) if t > 1 else 0.0
            x = reverse_step(x, eps_hat, t, sched, z)

    x = x.reshape(n_win, n_samples, k, length)
    results = []
    for i, w in enumerate(windows):
        tmask = torch.as_tensor(w.target_mask)
        composed = torch.where(tmask, x[i], values[i]).cpu().numpy().astype(np.float64)
        results.append(
            ImputationResult(
                window=w,
                samples=composed,
                point_estimate=np.median(composed, axis=0),
                target_mask=w.target_mask.copy(),
                eval_mask=w.artificial_mask.copy(),
            )
        )
    return results


def impute(
    window: TimeWindow,
    denoiser,
    sched: NoiseSchedule,
    n_samples: int,
    seed: int,
) -> ImputationResult:
    """Impute one window with the branch matching its domain tag.

    ``denoiser`` is a trained :class:`~crossimpute.denoiser.ConditionalDenoiser`;
    an untrained one (no recorded optimization steps) is rejected.
    """
    if getattr(denoiser, "trained_steps", 1) == 0:
        raise RuntimeError("denoiser has not been trained; load a checkpoint or call train() first")
    return impute_batch([window], denoiser.eps_model(window.domain), sched, n_samples, seed)[0]
