"""Noise-prediction network with shared embeddings and per-domain branches.

Shared across domains: the 1x1 input convolution over the stacked
(conditional, noisy-target) channels and the side information (fixed
sine-cosine time encoding plus a learnable feature embedding). Each domain
owns its branch: a stack of gated residual layers with temporal and feature
self-attention, closed by two 1x1 output convolutions.

Internal tensor layout is channels-first: hidden states are (B, C, K, L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import Domain

__all__ = ["DenoiserSpec", "ConditionalDenoiser", "sincos_embedding"]


@dataclass
class DenoiserSpec:
    """Architecture description of the denoising network."""

    channels: int = 64
    n_layers: int = 4
    n_heads: int = 8
    time_emb_dim: int = 128
    feat_emb_dim: int = 16
    diffusion_emb_dim: int = 128
    t_emb_every_layer: bool = True  # re-inject the step embedding per layer

    def validate(self) -> None:
        for name in ("channels", "n_layers", "n_heads", "time_emb_dim", "feat_emb_dim", "diffusion_emb_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.channels % self.n_heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by n_heads ({self.n_heads})")
        if self.time_emb_dim % 2 or self.diffusion_emb_dim % 2:
            raise ValueError("sine-cosine embedding dims must be even")

    @property
    def side_dim(self) -> int:
        return self.time_emb_dim + self.feat_emb_dim

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "time_emb_dim": self.time_emb_dim,
            "feat_emb_dim": self.feat_emb_dim,
            "diffusion_emb_dim": self.diffusion_emb_dim,
            "t_emb_every_layer": self.t_emb_every_layer,
        }


def sincos_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer sine-cosine encoding, interleaved (sin, cos) pairs.

    out[p, 2i] = sin(pos_p / 10000^(2i/dim)), out[p, 2i+1] = cos(same), so
    each pair satisfies sin^2 + cos^2 = 1.
    """
    positions = positions.to(torch.float64)
    half = dim // 2
    freqs = torch.pow(10000.0, -torch.arange(half, dtype=torch.float64) * 2.0 / dim)
    angles = positions[:, None] * freqs[None, :]
    out = torch.empty((len(positions), dim), dtype=torch.float64)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


def _conv1x1(c_in: int, c_out: int) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, kernel_size=1)
    nn.init.kaiming_normal_(conv.weight)
    return conv


class SelfAttentionBlock(nn.Module):
    """Pre-LN multi-head self-attention with a residual connection."""

    def __init__(self, channels: int, n_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, n_heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, S, C)
        h = self.norm(x)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out


class GatedResidualLayer(nn.Module):
    """Step embedding, dual attention, side-info injection, gated split."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        c = spec.channels
        self.diffusion_proj = nn.Linear(spec.diffusion_emb_dim, c)
        self.attn_time = SelfAttentionBlock(c, spec.n_heads)
        self.attn_feature = SelfAttentionBlock(c, spec.n_heads)
        self.shared_info_proj = _conv1x1(spec.side_dim, c)
        self.mask_info_proj = _conv1x1(1, c)
        self.gate_proj = _conv1x1(c, 2 * c)
        self.out_proj = _conv1x1(c, 2 * c)

    def forward(
        self,
        h: torch.Tensor,  # (B, C, K, L)
        t_emb: torch.Tensor | None,  # (B, diffusion_emb_dim)
        d_sh: torch.Tensor,  # (B, side_dim, K, L)
        d_sp: torch.Tensor,  # (B, 1, K, L)
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, k, length = h.shape
        y = h
        if t_emb is not None:
            y = y + self.diffusion_proj(t_emb)[:, :, None, None]
        y = y.permute(0, 2, 3, 1).reshape(b * k, length, c)
        y = self.attn_time(y)
        y = y.reshape(b, k, length, c).permute(0, 2, 1, 3).reshape(b * length, k, c)
        y = self.attn_feature(y)
        y = y.reshape(b, length, k, c).permute(0, 3, 2, 1)
        h_out = y + self.shared_info_proj(d_sh) + self.mask_info_proj(d_sp)
        gate = self.gate_proj(h_out)
        gated = torch.tanh(gate[:, :c]) * torch.sigmoid(gate[:, c:])
        residual, skip = self.out_proj(gated).chunk(2, dim=1)
        return (h + residual) / math.sqrt(2.0), skip


class DomainBranch(nn.Module):
    """Residual/skip stack of one domain; skips feed two output convolutions."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.layers = nn.ModuleList(GatedResidualLayer(spec) for _ in range(spec.n_layers))
        self.skip_out = _conv1x1(spec.channels, spec.channels)
        self.final_out = nn.Conv2d(spec.channels, 1, kernel_size=1)
        # zero init keeps the initial noise prediction at ~0
        nn.init.zeros_(self.final_out.weight)
        nn.init.zeros_(self.final_out.bias)

    def forward(
        self,
        h: torch.Tensor,
        t_emb: torch.Tensor,
        d_sh: torch.Tensor,
        d_sp: torch.Tensor,
        t_emb_every_layer: bool,
    ) -> torch.Tensor:
        skip_sum = torch.zeros_like(h)
        for i, layer in enumerate(self.layers):
            inject = t_emb if (t_emb_every_layer or i == 0) else None
            h, skip = layer(h, inject, d_sh, d_sp)
            skip_sum = skip_sum + skip
        y = skip_sum / math.sqrt(len(self.layers))
        y = F.relu(self.skip_out(y))
        return self.final_out(y).squeeze(1)


class ConditionalDenoiser(nn.Module):
    """Two-branch conditional noise predictor over (K, L) windows."""

    def __init__(self, spec: DenoiserSpec, n_features: int, n_steps: int):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.n_features = n_features
        self.n_steps = n_steps
        self.input_proj = _conv1x1(2, spec.channels)
        self.feature_emb = nn.Embedding(n_features, spec.feat_emb_dim)
        self.branches = nn.ModuleDict(
            {Domain.SOURCE.value: DomainBranch(spec), Domain.TARGET.value: DomainBranch(spec)}
        )
        table = sincos_embedding(torch.arange(1, n_steps + 1), spec.diffusion_emb_dim).to(torch.float32)
        self.register_buffer("t_emb_table", table, persistent=False)
        self.register_buffer("_trained_steps", torch.zeros((), dtype=torch.long))

    # -- shared components -------------------------------------------------

    def input_embed(self, x_cond: torch.Tensor, x_noisy: torch.Tensor) -> torch.Tensor:
        """Shared 1x1 convolution over the stacked inputs; (B, K, L) -> (B, C, K, L)."""
        if x_cond.shape != x_noisy.shape:
            raise ValueError(f"shape mismatch: {tuple(x_cond.shape)} vs {tuple(x_noisy.shape)}")
        return self.input_proj(torch.stack([x_cond, x_noisy], dim=1))

    def shared_side_info(self, n_steps_window: int, timestamps: torch.Tensor | None = None) -> torch.Tensor:
        """Time + feature embeddings, concatenated: (1, side_dim, K, L)."""
        p = self.input_proj.weight
        if timestamps is None:
            timestamps = torch.arange(n_steps_window)
        t_emb = sincos_embedding(timestamps, self.spec.time_emb_dim).to(dtype=p.dtype, device=p.device)
        time_block = t_emb.T[None, :, None, :].expand(1, -1, self.n_features, -1)
        f_emb = self.feature_emb(torch.arange(self.n_features, device=p.device))
        feat_block = f_emb.T[None, :, :, None].expand(1, -1, -1, n_steps_window)
        return torch.cat([time_block, feat_block], dim=1)

    # -- per-domain branch --------------------------------------------------

    def _step_embedding(self, t, batch: int) -> torch.Tensor:
        if isinstance(t, int):
            if not 1 <= t <= self.n_steps:
                raise ValueError(f"diffusion step {t} outside [1, {self.n_steps}]")
            return self.t_emb_table[t - 1].unsqueeze(0).expand(batch, -1)
        t = torch.as_tensor(t, dtype=torch.long, device=self.t_emb_table.device)
        if torch.any(t < 1) or torch.any(t > self.n_steps):
            raise ValueError(f"diffusion steps outside [1, {self.n_steps}]")
        return self.t_emb_table[t - 1]

    def branch_forward(
        self,
        h_in: torch.Tensor,  # (B, C, K, L)
        t,  # int or (B,) long, 1-based
        d_sh: torch.Tensor,  # (1 or B, side_dim, K, L)
        d_sp: torch.Tensor,  # (B, K, L) conditional mask
        domain: Domain,
    ) -> torch.Tensor:
        key = Domain(domain).value
        if key not in self.branches:
            raise KeyError(f"unknown domain {domain!r}")
        b = h_in.shape[0]
        t_emb = self._step_embedding(t, b).to(h_in.dtype)
        if d_sh.shape[0] != b:
            d_sh = d_sh.expand(b, -1, -1, -1)
        return self.branches[key](h_in, t_emb, d_sh, d_sp.unsqueeze(1).to(h_in.dtype), self.spec.t_emb_every_layer)

    def forward(
        self,
        x_cond: torch.Tensor,
        x_noisy: torch.Tensor,
        cond_mask: torch.Tensor,
        t,
        domain: Domain,
    ) -> torch.Tensor:
        h = self.input_embed(x_cond, x_noisy)
        d_sh = self.shared_side_info(x_cond.shape[-1])
        return self.branch_forward(h, t, d_sh, cond_mask, domain)

    def eps_model(self, domain: Domain):
        """Bind a domain branch to the (x_cond, x_noisy, cond_mask, t) signature."""
        domain = Domain(domain)

        def model(x_cond, x_noisy, cond_mask, t):
            return self.forward(x_cond, x_noisy, cond_mask, t, domain)

        return model

    # -- bookkeeping ---------------------------------------------------------

    @property
    def trained_steps(self) -> int:
        return int(self._trained_steps.item())

    def mark_trained(self, n_steps: int) -> None:
        self._trained_steps.fill_(n_steps)

    def shared_parameters(self):
        yield from self.input_proj.parameters()
        yield from self.feature_emb.parameters()

    def branch_parameters(self, domain: Domain):
        yield from self.branches[Domain(domain).value].parameters()

    def count_parameters(self) -> tuple[int, int]:
        """(shared, per-branch) parameter counts; total = shared + 2 * per-branch."""
        shared = sum(p.numel() for p in self.shared_parameters())
        per_branch = sum(p.numel() for p in self.branch_parameters(Domain.SOURCE))
        other = sum(p.numel() for p in self.branch_parameters(Domain.TARGET))
        assert per_branch == other, "branches must be structurally identical"
        total = sum(p.numel() for p in self.parameters())
        assert total == shared + 2 * per_branch, "every parameter must be shared or branch-owned"
        return shared, per_branch
