"""Shared test utilities: independent oracles and tiny fixtures.

The oracles here deliberately re-derive expected values from first
principles (literal double-sum DFT, brute-force pairwise CRPS, central
finite differences) so they stay independent of the implementation paths
they check.
"""

from __future__ import annotations

import numpy as np
import torch

from crossimpute.data import Domain, TimeWindow


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Literal double-sum 2-D DFT, uncentered layout."""
    k_n, l_n = x.shape
    out = np.zeros((k_n, l_n), dtype=complex)
    ks = np.arange(k_n)
    ls = np.arange(l_n)
    for u in range(k_n):
        for v in range(l_n):
            phase = np.exp(-2j * np.pi * (ks[:, None] * u / k_n + ls[None, :] * v / l_n))
            out[u, v] = (x * phase).sum()
    return out


def center_spectrum(spec: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(spec)


def empirical_crps(samples: np.ndarray, truth: float) -> float:
    """Exact CRPS of the empirical sample distribution, by pairwise sums."""
    s = np.asarray(samples, dtype=np.float64)
    term1 = np.abs(s - truth).mean()
    term2 = 0.5 * np.abs(s[:, None] - s[None, :]).mean()
    return float(term1 - term2)


def make_window(
    values: np.ndarray,
    obs_mask: np.ndarray | None = None,
    target_mask: np.ndarray | None = None,
    domain: Domain = Domain.TARGET,
    window_id: str = "test:window:0",
) -> TimeWindow:
    values = np.asarray(values, dtype=np.float64)
    if obs_mask is None:
        obs_mask = np.ones(values.shape, dtype=bool)
    obs_mask = np.asarray(obs_mask, dtype=bool)
    if target_mask is None:
        target_mask = ~obs_mask
    return TimeWindow(
        values=values,
        obs_mask=obs_mask,
        target_mask=np.asarray(target_mask, dtype=bool),
        domain=domain,
        window_id=window_id,
    )


def finite_difference_grads(loss_fn, model: torch.nn.Module, step: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter."""
    grads = {}
    for name, param in model.named_parameters():
        g = torch.zeros_like(param)
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            g.view(-1)[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_gradient_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """Worst relative disagreement between gradient estimates.

    The denominator is floored so that elements whose true gradient sits at
    the finite-difference noise level (machine_eps * |loss| / step, ~1e-12
    here) are compared absolutely instead of amplifying round-off.
    """
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, floor))
    return float(((analytic - numeric).abs() / denom).max())


def randomize_parameters(model: torch.nn.Module, seed: int = 0, scale: float = 0.5) -> None:
    """Put the model in a generic position (undoes zero-initialized layers)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.empty_like(p).uniform_(-scale, scale, generator=gen))
