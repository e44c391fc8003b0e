"""Conditioned denoising UNet.

The denoiser sees the channel-concatenation of the noisy target latent and
the clean input-frame latent, a timestep embedding, and attends over the
conditioning matrix at every resolution through cross-attention.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .. import rng
from ..conditioning import ConditioningBundle
from ..errors import NumericError


class CrossAttentionParams(nn.Module):
    """The three learnable maps of one cross-attention site."""

    def __init__(self, query_dim: int, cond_dim: int):
        super().__init__()
        self.w_q = nn.Linear(query_dim, cond_dim, bias=False)
        self.w_k = nn.Linear(cond_dim, cond_dim, bias=False)
        self.w_v = nn.Linear(cond_dim, cond_dim, bias=False)


def cross_attention(
    u_feat: torch.Tensor,
    c_matrix: torch.Tensor,
    params: CrossAttentionParams,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """softmax(Q K^T / sqrt(D)) V with Q from the features, K and V from C.

    Accepts either single samples (rows x U against R x D) or batches with a
    leading batch dimension on both arguments.
    """
    if u_feat.shape[-1] != params.w_q.in_features:
        raise ValueError(
            f"feature dim {u_feat.shape[-1]} != W_Q input {params.w_q.in_features}"
        )
    if c_matrix.shape[-1] != params.w_k.in_features:
        raise ValueError(
            f"conditioning dim {c_matrix.shape[-1]} != W_K input {params.w_k.in_features}"
        )
    if u_feat.ndim != c_matrix.ndim:
        raise ValueError("features and conditioning must both be batched or both flat")
    q = params.w_q(u_feat)
    k = params.w_k(c_matrix)
    v = params.w_v(c_matrix)
    scores = q @ k.transpose(-2, -1) / math.sqrt(k.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class CrossAttentionLayer(nn.Module):
    """Residual spatial-token attention over the conditioning matrix."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.params = CrossAttentionParams(channels, cond_dim)
        self.out_proj = nn.Linear(cond_dim, channels)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)          # b x hw x c
        att = cross_attention(tokens, cond, self.params, key_mask)
        return x + self.out_proj(att).transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConditionalUNet(nn.Module):
    """Two-resolution UNet, cross-attention at every level, zero-init head."""

    def __init__(self, latent_channels: int, base_width: int, cond_dim: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "unet-init"))
        w = base_width
        self.latent_channels = latent_channels
        self.time_dim = 4 * w
        self.time_mlp = nn.Sequential(
            nn.Linear(w, self.time_dim), nn.SiLU(), nn.Linear(self.time_dim, self.time_dim)
        )
        self.base_width = w
        self.conv_in = nn.Conv2d(2 * latent_channels, w, 3, padding=1)
        self.down_block = ResBlock(w, w, self.time_dim)
        self.down_attn = CrossAttentionLayer(w, cond_dim)
        self.downsample = nn.Conv2d(w, 2 * w, 4, stride=2, padding=1)
        self.low_block = ResBlock(2 * w, 2 * w, self.time_dim)
        self.low_attn = CrossAttentionLayer(2 * w, cond_dim)
        self.mid_block1 = ResBlock(2 * w, 2 * w, self.time_dim)
        self.mid_attn = CrossAttentionLayer(2 * w, cond_dim)
        self.mid_block2 = ResBlock(2 * w, 2 * w, self.time_dim)
        self.upsample = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * w, w, 3, padding=1)
        )
        self.up_block = ResBlock(2 * w, w, self.time_dim)
        self.up_attn = CrossAttentionLayer(w, cond_dim)
        self.out_norm = nn.GroupNorm(min(8, w), w)
        self.out_conv = nn.Conv2d(w, latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        z_t: torch.Tensor,
        z_input: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if z_t.shape != z_input.shape:
            raise ValueError("noisy latent and input latent must share a shape")
        if z_t.ndim != 4 or z_t.shape[1] != self.latent_channels:
            raise ValueError(f"expected Bx{self.latent_channels}xhxw latents, got {tuple(z_t.shape)}")
        if cond.ndim != 3 or cond.shape[0] != z_t.shape[0]:
            raise ValueError("conditioning must be batched BxRxD alongside the latents")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        t_emb = self.time_mlp(
            sinusoidal_embedding(t, self.base_width).to(self.conv_in.weight.dtype)
        )

        x = self.conv_in(torch.cat([z_t, z_input], dim=1))
        h_top = self.down_attn(self.down_block(x, t_emb), cond, key_mask)
        h = self.downsample(h_top)
        h = self.low_attn(self.low_block(h, t_emb), cond, key_mask)
        h = self.mid_block1(h, t_emb)
        h = self.mid_attn(h, cond, key_mask)
        h = self.mid_block2(h, t_emb)
        h = self.upsample(h)
        h = self.up_block(torch.cat([h, h_top], dim=1), t_emb)
        h = self.up_attn(h, cond, key_mask)
        out = self.out_conv(torch.nn.functional.silu(self.out_norm(h)))
        if not torch.isfinite(out).all():
            raise NumericError("UNet produced non-finite noise estimates")
        return out

    def predict(self, z_t: torch.Tensor, z_input: torch.Tensor, t: int, bundle: ConditioningBundle) -> torch.Tensor:
        """Single-sample convenience wrapper around forward."""
        mask = None if bundle.key_mask is None else bundle.key_mask[None, :]
        out = self.forward(
            z_t[None], z_input[None], torch.tensor(t), bundle.matrix[None], mask
        )
        return out[0]
