"""Structure correction: a residual corrector for generated images.

The corrector sees ``[x_gen, clean]`` and predicts a residual added to
``x_gen``.  It is trained against the frozen generator through the
one-step reverse estimate, with each sample weighted by
``sqrt(ab_{t-1}) * sqrt(1 - ab_t)``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from degforge.diffusion.generator import GenDeg, as_generator
from degforge.diffusion.schedule import NoiseSchedule, forward_noise, one_step_reverse
from degforge.latentcodec import to_batch, to_images
from degforge.toyworld import DegradationKind, ImagePair

log = logging.getLogger(__name__)


class GtMode(str, enum.Enum):
    SCM_CORRECTED = "scm_corrected"
    VAE_ROUND_TRIP = "vae_round_trip"


@dataclass(frozen=True)
class GtRoute:
    degradation: DegradationKind
    mode: GtMode


# Smooth degradations survive correction; streaky/dark ones get blurred by it.
_SCM_KINDS = frozenset({DegradationKind.HAZE, DegradationKind.MOTION_BLUR, DegradationKind.RAINDROP})


def route_ground_truth(degradation: DegradationKind | str) -> GtRoute:
    kind = DegradationKind.parse(degradation)
    mode = GtMode.SCM_CORRECTED if kind in _SCM_KINDS else GtMode.VAE_ROUND_TRIP
    return GtRoute(kind, mode)


class SCMNet(nn.Module):
    """Four 3x3 conv layers, zero-initialised output so training starts at identity."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.body = nn.Sequential(
            nn.Conv2d(6, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, x_gen: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
        if x_gen.shape != clean.shape:
            raise ValueError(f"shape mismatch: {tuple(x_gen.shape)} vs {tuple(clean.shape)}")
        return (x_gen + self.body(torch.cat([x_gen, clean], dim=1))).clamp(0.0, 1.0)


def apply_scm(x_gen: np.ndarray, clean: np.ndarray, params: SCMNet) -> np.ndarray:
    """``H x W x 3`` arrays in, corrected ``H x W x 3`` array out."""
    x_gen, clean = np.asarray(x_gen), np.asarray(clean)
    if x_gen.shape != clean.shape:
        raise ValueError(f"shape mismatch: {x_gen.shape} vs {clean.shape}")
    with torch.no_grad():
        return to_images(params(to_batch(x_gen), to_batch(clean)))[0]


def scm_loss_weight(t: int, sched: NoiseSchedule) -> float:
    sched.check_t(t, allow_zero=False)
    return math.sqrt(sched.alpha_bar(t - 1)) * math.sqrt(1.0 - sched.alpha_bar(t))


def _weights(t: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    table = sched.alpha_bar_table()
    w = np.sqrt(table[:-1]) * np.sqrt(1.0 - table[1:])  # w[t-1] is the weight at t
    return torch.as_tensor(w, dtype=torch.float32)[t - 1]


def one_step_generate(
    generator: GenDeg,
    z0: torch.Tensor,
    img_latent: torch.Tensor,
    prompt: torch.Tensor,
    t: torch.Tensor,
    g: torch.Generator,
) -> torch.Tensor:
    """Decode the generator's one-step clean estimate from a noised target latent."""
    eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
    with torch.no_grad():
        z_t = forward_noise(z0, t, eps, generator.schedule)
        eps_hat = generator.predict_eps(z_t, t, img_latent, prompt)
        z_gen = one_step_reverse(z_t, eps_hat, t, generator.schedule)
        return generator.codec.decode(z_gen)


def scm_training_loss(
    generator: GenDeg,
    x_in: torch.Tensor,
    clean: torch.Tensor,
    prompt: torch.Tensor,
    params: SCMNet,
    rng: int | torch.Generator = 0,
    t: torch.Tensor | None = None,
) -> torch.Tensor:
    """Timestep-weighted squared error between ``x_in`` and the corrected generation.

    The squared error is averaged over pixels, then weighted per sample and
    averaged over the batch.
    """
    if not generator.frozen:
        raise RuntimeError("structure correction requires a frozen generator")
    g = as_generator(rng)
    if t is None:
        t = torch.randint(1, generator.schedule.T + 1, (x_in.shape[0],), generator=g)
    with torch.no_grad():
        z0 = generator.codec.encode(x_in)
        img_latent = generator.codec.encode(clean)
    x_gen = one_step_generate(generator, z0, img_latent, prompt, t, g)
    x_s = params(x_gen, clean)
    per_sample = (x_in - x_s).pow(2).flatten(1).mean(dim=1)
    return (_weights(t, generator.schedule) * per_sample).mean()


@dataclass
class SCMTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


def _prompts(generator: GenDeg, pairs: Sequence[ImagePair]) -> torch.Tensor:
    from degforge.degstats import pair_stats

    with torch.no_grad():
        stats, texts = [], []
        for p in pairs:
            s = pair_stats(p)
            stats.append(generator.stats_tensor(p.degradation, s.mu, s.sigma))
            texts.append(generator.text_tensor(p.degradation))
        return torch.cat(
            [generator.fusion(torch.stack(stats[i : i + 64]), torch.stack(texts[i : i + 64])) for i in range(0, len(pairs), 64)]
        )


def train_scm(generator: GenDeg, pairs: Sequence[ImagePair], params: SCMNet, cfg: SCMTrainConfig | None = None) -> list[float]:
    """Train ``params`` with the generator held fixed.  Only SCM-routed pairs are used."""
    cfg = cfg or SCMTrainConfig()
    if not generator.frozen:
        raise RuntimeError("structure correction requires a frozen generator")
    pairs = [p for p in pairs if route_ground_truth(p.degradation).mode is GtMode.SCM_CORRECTED]
    if not pairs:
        raise ValueError("no pairs with an SCM-routed degradation")
    g = torch.Generator().manual_seed(cfg.seed)
    x_in = to_batch([p.degraded for p in pairs])
    clean = to_batch([p.clean for p in pairs])
    prompts = _prompts(generator, pairs)
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr)
    params.train()
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(0, len(pairs), (cfg.batch_size,), generator=g)
        loss = scm_training_loss(generator, x_in[idx], clean[idx], prompts[idx], params, g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 250 == 0:
            log.info("scm step %d loss %.6f", step, losses[-1])
    params.eval()
    return losses


@torch.no_grad()
def evaluate_scm(generator: GenDeg, pairs: Sequence[ImagePair], params: SCMNet, seed: int = 0) -> tuple[float, float]:
    """Mean |x_in - x_gen| and mean |x_in - x_S| over one-step generations."""
    g = torch.Generator().manual_seed(seed)
    x_in = to_batch([p.degraded for p in pairs])
    clean = to_batch([p.clean for p in pairs])
    t = torch.randint(1, generator.schedule.T + 1, (len(pairs),), generator=g)
    z0 = generator.codec.encode(x_in)
    img_latent = generator.codec.encode(clean)
    x_gen = one_step_generate(generator, z0, img_latent, _prompts(generator, pairs), t, g)
    x_s = params(x_gen, clean)
    return float((x_in - x_gen).abs().mean()), float((x_in - x_s).abs().mean())


def save_scm(params: SCMNet, checkpoint: str, training: dict | None = None) -> None:
    from degforge.checkpoint import add_section

    add_section(checkpoint, "scm", params.state_dict(), meta={"scm": {"width": params.width, "training": dict(training or {})}})


def load_scm(checkpoint: str) -> SCMNet | None:
    """The stored corrector, or ``None`` when the container has no SCM section."""
    from degforge.checkpoint import has_section, load_section, read_manifest

    if not has_section(checkpoint, "scm"):
        return None
    params = SCMNet(width=read_manifest(checkpoint)["scm"]["width"])
    params.load_state_dict(load_section(checkpoint, "scm"))
    return params.eval()
