"""Three-level U-shaped noise predictor with per-level prompt cross-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    channels: tuple[int, int, int] = (32, 64, 96)
    time_dim: int = 128
    prompt_dim: int = 768
    context_dim: int = 128
    attn_dim: int = 64
    groups: int = 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Feature-map queries attending over the (projected) prompt tokens."""

    def __init__(self, channels: int, prompt_dim: int, attn_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, attn_dim, bias=False)
        self.k = nn.Linear(prompt_dim, attn_dim, bias=False)
        self.v = nn.Linear(prompt_dim, attn_dim, bias=False)
        self.out = nn.Linear(attn_dim, channels)

    def forward(self, x: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.k(prompt), self.v(prompt)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        out = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Denoiser(nn.Module):
    """Predicts noise from ``[z_t, image latent]``, the timestep and the prompt."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        c1, c2, c3 = cfg.channels
        td, g = cfg.time_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.inp = nn.Conv2d(2 * cfg.latent_channels, c1, 3, padding=1)
        # Shared token projection keeps per-level attention cheap.
        self.context = nn.Linear(cfg.prompt_dim, cfg.context_dim)
        # token-mean of the projected prompt, added to the time embedding so
        # global attributes reach every residual block without attention
        self.pooled = nn.Sequential(nn.Linear(cfg.context_dim, td), nn.SiLU(), nn.Linear(td, td))
        cd = cfg.context_dim

        self.down1 = ResBlock(c1, c1, td, g)
        self.attn1 = CrossAttention(c1, cd, cfg.attn_dim, g)
        self.pool1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, td, g)
        self.attn2 = CrossAttention(c2, cd, cfg.attn_dim, g)
        self.pool2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = ResBlock(c3, c3, td, g)
        self.attn3 = CrossAttention(c3, cd, cfg.attn_dim, g)

        self.up2 = nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1)
        self.dec2 = ResBlock(2 * c2, c2, td, g)
        self.attn4 = CrossAttention(c2, cd, cfg.attn_dim, g)
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, td, g)
        self.attn5 = CrossAttention(c1, cd, cfg.attn_dim, g)
        self.out = nn.Sequential(nn.GroupNorm(g, c1), nn.SiLU(), nn.Conv2d(c1, cfg.latent_channels, 3, padding=1))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, img_latent: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        if z_t.shape[-1] % 4 or z_t.shape[-2] % 4:
            raise ValueError(f"latent spatial dims {tuple(z_t.shape[-2:])} must be divisible by 4")
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim))
        prompt = self.context(prompt)
        temb = temb + self.pooled(prompt.mean(dim=1))
        h1 = self.inp(torch.cat([z_t, img_latent], dim=1))
        h1 = self.attn1(self.down1(h1, temb), prompt)
        h2 = self.attn2(self.down2(self.pool1(h1), temb), prompt)
        h3 = self.attn3(self.mid(self.pool2(h2), temb), prompt)
        u2 = self.attn4(self.dec2(torch.cat([self.up2(h3), h2], dim=1), temb), prompt)
        u1 = self.attn5(self.dec1(torch.cat([self.up1(u2), h1], dim=1), temb), prompt)
        return self.out(u1)
