"""The degradation generator: conditioning, training objective and sampling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from degforge.conditioning import PromptFusion, make_stats_conditioning, null_stats_conditioning, stub_text_embed
from degforge.degstats import compute_range, pair_stats
from degforge.diffusion.denoiser import Denoiser, DenoiserConfig
from degforge.diffusion.schedule import NoiseSchedule, forward_noise, make_schedule, one_step_reverse
from degforge.latentcodec import LatentCodec, to_batch, to_images
from degforge.toyworld import DegradationKind, ImagePair

log = logging.getLogger(__name__)

DEFAULT_CAPTION = "a photo of a toy scene"
COND_DROPOUT = 0.05
LATENT_CLIP = 5.0


@dataclass
class GuidanceConfig:
    s_img: float = 1.5
    s_text: float = 7.5
    steps: int = 50

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("guidance steps must be >= 1")
        if self.s_img < 0 or self.s_text < 0:
            raise ValueError("guidance scales must be nonnegative")


@dataclass
class GenTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    cond_dropout: float = COND_DROPOUT
    grad_clip: float = 1.0
    warmup_steps: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def as_generator(rng: int | np.random.Generator | torch.Generator) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    else:
        seed = int(rng)
    return torch.Generator().manual_seed(seed)


class GenDeg(nn.Module):
    """Frozen codec + learnable prompt fusion + denoiser under one schedule."""

    def __init__(
        self,
        schedule: NoiseSchedule,
        codec: LatentCodec,
        fusion: PromptFusion | None = None,
        denoiser: Denoiser | None = None,
        ranges: dict[str, dict[str, list[float]]] | None = None,
        caption: str = DEFAULT_CAPTION,
    ):
        super().__init__()
        self.schedule = schedule
        self.codec = codec
        self.codec.requires_grad_(False)
        self.fusion = fusion or PromptFusion()
        self.denoiser = denoiser or Denoiser(DenoiserConfig(latent_channels=codec.config.c))
        self.ranges = dict(ranges or {})
        self.caption = caption
        self.frozen = False
        self._text_cache: dict[tuple[str, str], torch.Tensor] = {}

    def freeze(self) -> "GenDeg":
        self.frozen = True
        self.requires_grad_(False)
        self.eval()
        return self

    def predict_eps(self, z_t: torch.Tensor, t: torch.Tensor, img_latent: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        return self.denoiser(z_t, t, img_latent, prompt)

    def text_tensor(self, kind: DegradationKind | str, caption: str | None = None) -> torch.Tensor:
        kind = DegradationKind.parse(kind)
        key = (caption or self.caption, kind.value)
        if key not in self._text_cache:
            self._text_cache[key] = torch.from_numpy(stub_text_embed(key[0], kind).matrix)
        return self._text_cache[key]

    def stats_tensor(self, kind: DegradationKind | str, mu: float | None, sigma: float | None, null: bool = False) -> torch.Tensor:
        if null:
            return torch.from_numpy(null_stats_conditioning(self.fusion.n_bins).matrix)
        kind = DegradationKind.parse(kind)
        if kind.value not in self.ranges:
            raise KeyError(f"generator has no statistics range for {kind.value}")
        r = self.ranges[kind.value]
        cond = make_stats_conditioning(mu, sigma, tuple(r["range_mu"]), tuple(r["range_sigma"]))
        return torch.from_numpy(cond.matrix)


def compute_ranges(pairs: Sequence[ImagePair]) -> dict[str, dict[str, list[float]]]:
    by_kind: dict[str, list] = {}
    for p in pairs:
        by_kind.setdefault(DegradationKind.parse(p.degradation).value, []).append(pair_stats(p))
    return {
        k: {"range_mu": list(compute_range(s.mu for s in v)), "range_sigma": list(compute_range(s.sigma for s in v))}
        for k, v in sorted(by_kind.items())
    }


def latent_loss(
    model: GenDeg,
    z0: torch.Tensor,
    img_latent: torch.Tensor,
    stats: torch.Tensor,
    text: torch.Tensor,
    generator: torch.Generator,
    cond_dropout: float = COND_DROPOUT,
    text_index: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE on precomputed latents (element mean).

    With ``text_index`` given, ``text`` holds distinct embeddings and sample
    ``i`` uses ``text[text_index[i]]``.
    """
    b = z0.shape[0]
    t = torch.randint(1, model.schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_noise(z0, t, eps, model.schedule)
    if cond_dropout > 0:
        drop_stats = torch.rand(b, generator=generator) < cond_dropout
        drop_img = torch.rand(b, generator=generator) < cond_dropout
        null = torch.from_numpy(null_stats_conditioning(stats.shape[-1]).matrix).to(stats.dtype)
        stats = torch.where(drop_stats[:, None, None], null[None], stats)
        img_latent = img_latent * (~drop_img).to(img_latent.dtype)[:, None, None, None]
    if text_index is None:
        prompt = model.fusion(stats, text)
    else:
        prompt = model.fusion.forward_indexed(stats, text, text_index)
    eps_hat = model.predict_eps(z_t, t, img_latent, prompt)
    return F.mse_loss(eps_hat, eps)


def training_loss(
    model: GenDeg,
    clean: torch.Tensor,
    degraded: torch.Tensor,
    stats: torch.Tensor,
    text: torch.Tensor,
    generator: torch.Generator,
    cond_dropout: float = COND_DROPOUT,
) -> torch.Tensor:
    """Noise-prediction objective on image batches (NCHW in [0, 1]).

    ``stats`` (B, 2, 129) and ``text`` (B, 77, 768) are fused inside so the
    fusion projections receive gradients.
    """
    if clean.shape != degraded.shape:
        raise ValueError("clean and degraded batches must have the same shape")
    with torch.no_grad():
        z0 = model.codec.encode(degraded)
        img_latent = model.codec.encode(clean)
    return latent_loss(model, z0, img_latent, stats, text, generator, cond_dropout)


def guided_eps(
    model: GenDeg,
    z_t: torch.Tensor,
    t: torch.Tensor,
    img_latent: torch.Tensor,
    prompt: torch.Tensor,
    null_prompt: torch.Tensor,
    cfg: GuidanceConfig,
) -> torch.Tensor:
    """Dual classifier-free guidance over image and prompt conditioning."""
    zero_img = torch.zeros_like(img_latent)
    e_uncond = model.predict_eps(z_t, t, zero_img, null_prompt)
    e_img = model.predict_eps(z_t, t, img_latent, null_prompt)
    e_full = model.predict_eps(z_t, t, img_latent, prompt)
    return e_uncond + cfg.s_img * (e_img - e_uncond) + cfg.s_text * (e_full - e_img)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Descending, uniformly strided timesteps ending at 1."""
    steps = min(steps, T)
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def sample_latent(
    model: GenDeg,
    img_latent: torch.Tensor,
    prompt: torch.Tensor,
    null_prompt: torch.Tensor,
    cfg: GuidanceConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    sched = model.schedule
    z = torch.randn(img_latent.shape, generator=generator, dtype=img_latent.dtype)
    ts = sampling_timesteps(sched.T, cfg.steps)
    b = img_latent.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = guided_eps(model, z, torch.full((b,), t, dtype=torch.long), img_latent, prompt, null_prompt, cfg)
        x0 = one_step_reverse(z, eps, t, sched).clamp(-LATENT_CLIP, LATENT_CLIP)
        if t_prev == 0:
            z = x0
            break
        ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
        beta = 1.0 - ab_t / ab_prev
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
        ct = np.sqrt(ab_t / ab_prev) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        z = c0 * x0 + ct * z + np.sqrt(var) * noise
    return z


@torch.no_grad()
def sample(
    model: GenDeg,
    clean: np.ndarray,
    degradation: DegradationKind | str,
    mu_gen: float,
    sigma_gen: float,
    caption: str | None = None,
    cfg: GuidanceConfig | None = None,
    rng: int | np.random.Generator | torch.Generator = 0,
) -> np.ndarray:
    """Generate a degraded version of ``clean`` (``H x W x 3``) at the requested stats."""
    cfg = cfg or GuidanceConfig()
    generator = as_generator(rng)
    x = to_batch(clean)
    img_latent = model.codec.encode(x)
    text = model.text_tensor(degradation, caption)[None]
    stats = model.stats_tensor(degradation, mu_gen, sigma_gen)[None]
    null = model.stats_tensor(degradation, None, None, null=True)[None]
    prompt = model.fusion(stats, text)
    null_prompt = model.fusion(null, text)
    z = sample_latent(model, img_latent, prompt, null_prompt, cfg, generator)
    return to_images(model.codec.decode(z))[0]


def _lr_at(step: int, cfg: GenTrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def train_generator(model: GenDeg, pairs: Sequence[ImagePair], cfg: GenTrainConfig | None = None) -> list[float]:
    """Optimize fusion + denoiser on paired data; the codec stays fixed."""
    cfg = cfg or GenTrainConfig()
    if model.frozen:
        raise RuntimeError("generator is frozen; refusing to update its parameters")
    if not pairs:
        raise ValueError("no training pairs")
    if not model.ranges:
        model.ranges = compute_ranges(pairs)
    g = torch.Generator().manual_seed(cfg.seed)

    with torch.no_grad():
        clean = to_batch([p.clean for p in pairs])
        degraded = to_batch([p.degraded for p in pairs])
        z0 = torch.cat([model.codec.encode(degraded[i : i + 256]) for i in range(0, len(pairs), 256)])
        zc = torch.cat([model.codec.encode(clean[i : i + 256]) for i in range(0, len(pairs), 256)])
    stats_all = torch.stack([model.stats_tensor(p.degradation, *_mu_sigma(p)) for p in pairs])
    kinds = [DegradationKind.parse(p.degradation).value for p in pairs]
    kind_names = sorted(set(kinds))
    kind_idx = torch.tensor([kind_names.index(k) for k in kinds])
    texts = torch.stack([model.text_tensor(k) for k in kind_names])

    params = [p for p in list(model.fusion.parameters()) + list(model.denoiser.parameters())]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.fusion.train()
    model.denoiser.train()
    losses = []
    for step in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, cfg)
        idx = torch.randint(0, len(pairs), (cfg.batch_size,), generator=g)
        loss = latent_loss(model, z0[idx], zc[idx], stats_all[idx], texts, g, cfg.cond_dropout, text_index=kind_idx[idx])
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        losses.append(loss.item())
        if step % 250 == 0:
            log.info("generator step %d loss %.5f", step, losses[-1])
    model.eval()
    return losses


def _mu_sigma(pair: ImagePair) -> tuple[float, float]:
    s = pair_stats(pair)
    return s.mu, s.sigma
