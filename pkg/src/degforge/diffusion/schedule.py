"""Noise schedules plus the closed-form forward and one-step reverse maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

BETA_START = 1e-4
BETA_END = 2e-2
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Index ``t`` runs over 1..T; ``alpha_bar(0)`` is 1 by convention."""

    T: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha_bar_table(self) -> np.ndarray:
        """Length T+1 table, entry 0 equal to 1."""
        return np.concatenate([[1.0], self.alpha_bars])

    def check_t(self, t: int, allow_zero: bool = True) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Linear (betas 1e-4..2e-2 rescaled by 1000/T) or cosine schedule."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(BETA_START * scale, BETA_END * scale, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = 1.0 - f[1:] / f[:-1]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 1e-8, MAX_BETA)
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, kind=kind, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _coef(sched: NoiseSchedule, t, like):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcastable against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if int(t.min()) < 0 or int(t.max()) > sched.T:
            raise ValueError(f"timesteps outside [0, {sched.T}]")
        ab = torch.as_tensor(sched.alpha_bar_table(), dtype=like.dtype)[t.long()]
        ab = ab.reshape(-1, *([1] * (like.ndim - 1)))
        return ab.sqrt(), (1.0 - ab).sqrt()
    ab = sched.alpha_bar(int(t))
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def forward_noise(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps. ``t`` is an int or a per-sample tensor."""
    if tuple(eps.shape) != tuple(z0.shape):
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    a, b = _coef(sched, t, z0)
    return a * z0 + b * eps


def one_step_reverse(z_t, eps_hat, t, sched: NoiseSchedule):
    """Clean-latent estimate (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)."""
    a, b = _coef(sched, t, z_t)
    if (isinstance(a, float) and a == 0.0) or (isinstance(a, torch.Tensor) and bool((a == 0).any())):
        raise ValueError("alpha_bar_t is zero; the one-step reverse is undefined")
    return (z_t - b * eps_hat) / a
