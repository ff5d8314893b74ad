"""Small convolutional VAE used as the latent space of the generator.

``mode="identity"`` bypasses the network: the latent is the image itself
(f=1, c=3) and decode only clamps.  That makes diffusion-core tests
independent of codec error.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    f: int = 4
    c: int = 4
    mode: str = "learned"
    width: int = 32
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("learned", "identity"):
            raise ValueError(f"codec mode must be 'learned' or 'identity', got {self.mode!r}")
        if self.mode == "identity":
            self.f, self.c = 1, 3
        elif self.f not in (1, 2, 4, 8):
            raise ValueError("downsample factor f must be a power of two up to 8")

    def to_dict(self) -> dict:
        return asdict(self)


def _down_blocks(n: int, width: int) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for _ in range(n):
        layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
    return layers


def _up_blocks(n: int, width: int) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for _ in range(n):
        layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
    return layers


class LatentCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        cfg = self.config
        if cfg.mode == "learned":
            n = int(np.log2(cfg.f))
            w = cfg.width
            self.encoder = nn.Sequential(
                nn.Conv2d(3, w, 3, padding=1), nn.SiLU(), *_down_blocks(n, w), nn.Conv2d(w, 2 * cfg.c, 1)
            )
            self.decoder = nn.Sequential(
                nn.Conv2d(cfg.c, w, 3, padding=1), nn.SiLU(), *_up_blocks(n, w), nn.Conv2d(w, 3, 3, padding=1)
            )

    @classmethod
    def identity(cls) -> "LatentCodec":
        return cls(CodecConfig(mode="identity"))

    @property
    def is_identity(self) -> bool:
        return self.config.mode == "identity"

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.config.f
        return height // f, width // f, self.config.c

    def _check_dims(self, x: torch.Tensor) -> None:
        f = self.config.f
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an (N, 3, H, W) batch, got {tuple(x.shape)}")
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"image dims {tuple(x.shape[2:])} must be divisible by f={f}")

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x * 2.0 - 1.0)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Posterior mean, scaled to roughly unit variance. ``x`` is NCHW in [0, 1]."""
        self._check_dims(x)
        if self.is_identity:
            return x.clone()
        return self.posterior(x)[0] * self.config.scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if self.is_identity:
            return z
        return (self.decoder(z / self.config.scale) + 1.0) / 2.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.config.c:
            raise ValueError(f"latent must be (N, {self.config.c}, h, w), got {tuple(z.shape)}")
        return self.decode_raw(z).clamp(0.0, 1.0)


def to_batch(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_images(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


@torch.no_grad()
def encode(codec: LatentCodec, image: np.ndarray) -> np.ndarray:
    """``H x W x 3`` image -> ``h x w x c`` latent."""
    return to_images(codec.encode(to_batch(image)))[0]


@torch.no_grad()
def decode(codec: LatentCodec, latent: np.ndarray) -> np.ndarray:
    return to_images(codec.decode(to_batch(latent)))[0]


def round_trip_clean(codec: LatentCodec, clean: np.ndarray) -> np.ndarray:
    """Encode-then-decode of a clean image; the GT for rain/snow/low-light."""
    return decode(codec, encode(codec, clean))


def train_codec(
    codec: LatentCodec,
    images: np.ndarray,
    steps: int = 1500,
    batch_size: int = 32,
    lr: float = 2e-3,
    kl_weight: float = 1e-6,
    seed: int = 0,
) -> list[float]:
    """Reconstruction + small KL training, then calibrate the latent scale."""
    if codec.is_identity:
        return []
    g = torch.Generator().manual_seed(seed)
    data = to_batch(images)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    codec.config.scale = 1.0
    codec.train()
    losses = []
    for step in range(steps):
        idx = torch.randint(0, data.shape[0], (batch_size,), generator=g)
        x = data[idx]
        mean, logvar = codec.posterior(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=g)
        recon = codec.decode_raw(z)
        rec = F.l1_loss(recon, x) + F.mse_loss(recon, x)
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        loss = rec + kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("codec step %d loss %.5f", step, losses[-1])
    codec.eval()
    with torch.no_grad():
        std = float(codec.posterior(data[: min(len(data), 512)])[0].std())
    codec.config.scale = 1.0 / max(std, 1e-6)
    codec.requires_grad_(False)
    return losses
