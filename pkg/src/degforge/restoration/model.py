"""Hierarchical shifted-window attention encoder with a light conv decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from degforge.latentcodec import to_batch, to_images


@dataclass
class RestorerConfig:
    patch_size: int = 2
    channels: tuple[int, ...] = (32, 64, 128)
    encoder_depths: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (2, 4, 8)
    window_size: int = 4
    decoder_channels: tuple[int, ...] = (64, 32, 16)
    decoder_kernel: int = 3
    mlp_ratio: float = 2.0

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.encoder_depths = tuple(self.encoder_depths)
        self.heads = tuple(self.heads)
        self.decoder_channels = tuple(self.decoder_channels)
        if self.decoder_kernel not in (1, 3):
            raise ValueError(f"decoder_kernel must be 1 or 3, got {self.decoder_kernel}")
        n = len(self.channels)
        if not (len(self.encoder_depths) == len(self.heads) == len(self.decoder_channels) == n):
            raise ValueError("channels, encoder_depths, heads and decoder_channels need one entry per level")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def required_multiple(self) -> int:
        """Input height/width must be a multiple of this."""
        return self.patch_size * 2 ** (self.levels - 1) * self.window_size

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, ws: int):
        super().__init__()
        self.heads, self.ws = heads, ws
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * ws - 1) + rel[..., 1], persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.rel_bias[self.rel_index].permute(2, 0, 1)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(bw, n, c))


def _shift_mask(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    img = torch.zeros(1, h, w, 1)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    mask = win[:, None, :] - win[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ws: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.ws, self.shift = ws, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, ws)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        ws = min(self.ws, h, w)
        shift = self.shift if min(h, w) > ws else 0
        y = self.norm1(x)
        mask = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = _shift_mask(h, w, ws, shift).to(y.dtype)
        y = window_reverse(self.attn(window_partition(y, ws), mask), ws, h, w)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduce(self.norm(x))


class WindowEncoder(nn.Module):
    """Returns one NCHW feature map per level, finest first."""

    def __init__(self, cfg: RestorerConfig):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, cfg.channels[0], cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, (dim, depth, heads) in enumerate(zip(cfg.channels, cfg.encoder_depths, cfg.heads)):
            blocks = [SwinBlock(dim, heads, cfg.window_size, 0 if j % 2 == 0 else cfg.window_size // 2, cfg.mlp_ratio) for j in range(depth)]
            self.stages.append(nn.Sequential(*blocks))
            if i + 1 < cfg.levels:
                self.merges.append(PatchMerging(dim, cfg.channels[i + 1]))
        self.norms = nn.ModuleList(nn.LayerNorm(d) for d in cfg.channels)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.patch_embed(x).permute(0, 2, 3, 1)
        feats = []
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(self.norms[i](h).permute(0, 3, 1, 2))
            if i < len(self.merges):
                h = self.merges[i](h)
        return feats


class ConvDecoder(nn.Module):
    """Coarse-to-fine fusion: conv, upsample, concat the next encoder level, conv."""

    def __init__(self, cfg: RestorerConfig):
        super().__init__()
        k, pad = cfg.decoder_kernel, cfg.decoder_kernel // 2
        enc = list(cfg.channels)[::-1]
        dec = list(cfg.decoder_channels)
        self.patch_size = cfg.patch_size
        self.blocks = nn.ModuleList()
        cin = enc[0]
        for i, cout in enumerate(dec):
            extra = enc[i] if i > 0 else 0
            self.blocks.append(nn.Conv2d(cin + extra, cout, k, padding=pad))
            cin = cout
        self.head = nn.Conv2d(cin, 3, k, padding=pad)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        feats = feats[::-1]
        h = F.gelu(self.blocks[0](feats[0]))
        for i in range(1, len(self.blocks)):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = F.gelu(self.blocks[i](torch.cat([h, feats[i]], dim=1)))
        h = F.interpolate(h, scale_factor=self.patch_size, mode="bilinear", align_corners=False)
        return self.head(h)


class Restorer(nn.Module):
    def __init__(self, config: RestorerConfig | None = None):
        super().__init__()
        self.config = config or RestorerConfig()
        self.encoder = WindowEncoder(self.config)
        self.decoder = ConvDecoder(self.config)

    def check_input(self, x: torch.Tensor) -> None:
        m = self.config.required_multiple
        h, w = x.shape[-2:]
        if h % m or w % m:
            ph, pw = (-h) % m, (-w) % m
            raise ValueError(
                f"input {h}x{w} is not a multiple of {m}; pad by ({ph}, {pw}) pixels to {h + ph}x{w + pw}"
            )

    def forward_raw(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.decoder(self.encoder(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_raw(x).clamp(0.0, 1.0)

    def load_encoder_weights(self, state_dict: dict[str, torch.Tensor]) -> tuple[list[str], list[str]]:
        """Load pretrained encoder weights; returns (missing, unexpected) keys."""
        result = self.encoder.load_state_dict(state_dict, strict=False)
        return list(result.missing_keys), list(result.unexpected_keys)


def decoder_conv_weight_count(model: Restorer) -> int:
    return sum(m.weight.numel() for m in model.decoder.modules() if isinstance(m, nn.Conv2d))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@torch.no_grad()
def restore(model: Restorer, degraded: np.ndarray) -> np.ndarray:
    """``H x W x 3`` degraded image -> restored image in [0, 1]."""
    model.eval()
    return to_images(model(to_batch(degraded)))[0]
