"""A tiny randomly initialised backbone for exercising the injection mechanics.

Two self-attention sites (8x8 and 4x4 tokens for an 8x8 latent), a linear
block-average codec, and the v1.x noise schedule.  Nothing here is trained.
"""
from __future__ import annotations

import math
import threading

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..attention import attend
from ..scheduler import scaled_linear_alphas_cumprod
from .base import AttentionTap, Backend

# fork_rng swaps the process-wide generator; concurrent constructions must not interleave
_INIT_LOCK = threading.Lock()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TappedSelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int, site: int, tap: AttentionTap):
        super().__init__()
        self.heads, self.site, self.tap = heads, site, tap
        self.norm = nn.GroupNorm(4, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    @property
    def head_dim(self) -> int:
        return self.to_q.out_features // self.heads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = (
            proj(tokens).view(b, -1, self.heads, self.head_dim).transpose(1, 2)
            for proj in (self.to_q, self.to_k, self.to_v)
        )
        k, v = self.tap(self.site, q, k, v)
        out = attend(q, k, v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).reshape(b, c, h, w)


class StubUNet(nn.Module):
    def __init__(self, tap: AttentionTap, channels: int = 32, heads: int = 2):
        super().__init__()
        self.channels = channels
        self.conv_in = nn.Conv2d(4, channels, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(channels, channels), nn.SiLU(), nn.Linear(channels, channels))
        self.attn0 = TappedSelfAttention(channels, heads, 0, tap)
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.attn1 = TappedSelfAttention(channels, heads, 1, tap)
        self.up = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(2 * channels, 4, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.channels))[:, :, None, None]
        h0 = self.attn0(F.silu(self.conv_in(z)) + emb)
        h1 = self.attn1(F.silu(self.down(h0)) + emb)
        h1 = F.silu(self.up(F.interpolate(h1, scale_factor=2, mode="nearest")))
        return self.conv_out(torch.cat([h0, h1], dim=1))


class StubBackend(Backend):
    name = "stub"
    num_sites = 2
    native_resolution = 64

    def __init__(self, seed: int = 0, device="cpu", dtype=torch.float32):
        super().__init__(device, dtype)
        with _INIT_LOCK, torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.unet = StubUNet(self.tap).to(self.device, dtype).eval()
            mix = torch.randn(4, 3)
        # full-column-rank colour mixing so decode is an exact left inverse on block-constant images
        self.mix = (mix / mix.norm(dim=1, keepdim=True)).to(self.device, dtype)
        self.unmix = torch.linalg.pinv(self.mix)
        self.seed = seed
        self.site_widths = {0: self.unet.attn0.head_dim, 1: self.unet.attn1.head_dim}
        self.default_sites = (0, 1)
        self.alphas_cumprod = scaled_linear_alphas_cumprod()

    def describe(self) -> dict:
        return {**super().describe(), "seed": self.seed}

    def _encode(self, x):
        cells = F.avg_pool2d(x * 2 - 1, self.downsample)
        return torch.einsum("oc,bchw->bohw", self.mix, cells)

    def _decode(self, z):
        cells = torch.einsum("co,bohw->bchw", self.unmix, z)
        return (F.interpolate(cells, scale_factor=self.downsample, mode="nearest") + 1) / 2

    def _forward(self, z, timestep):
        t = torch.full((z.shape[0],), timestep, device=self.device)
        return self.unet(z, t)
