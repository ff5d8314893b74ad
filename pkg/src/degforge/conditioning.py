"""Fusion of (mu, sigma) one-hot statistics with the text embedding.

The chain is: stats ``2 x 129`` -> affine -> ``2 x 77`` -> transpose ->
``77 x 2`` -> concatenated after the text columns -> ``77 x 770`` ->
affine -> prompt embedding ``77 x 768``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from degforge.degstats import ENCODING_LENGTH, encode_onehot
from degforge.toyworld import DegradationKind

N_TOKENS = 77
TEXT_DIM = 768

DEGRADATION_PHRASES = {
    DegradationKind.HAZE: ", in hazy conditions.",
    DegradationKind.RAIN: ", in rainy conditions.",
    DegradationKind.SNOW: ", in snowy conditions.",
    DegradationKind.MOTION_BLUR: ", with motion blur.",
    DegradationKind.LOW_LIGHT: ", in low-light conditions.",
    DegradationKind.RAINDROP: ", seen through raindrops on the lens.",
}


@dataclass(frozen=True)
class TextEmbedding:
    matrix: np.ndarray
    source_caption: str


@dataclass(frozen=True)
class StatsConditioning:
    matrix: np.ndarray

    @property
    def is_null(self) -> bool:
        return bool(self.matrix[0, -1] == 1.0 and self.matrix[1, -1] == 1.0)


def build_prompt(caption: str, degradation: DegradationKind | str) -> str:
    kind = DegradationKind.parse(degradation)
    return caption.rstrip(" .") + DEGRADATION_PHRASES[kind]


def stub_text_embed(
    caption: str, degradation: DegradationKind | str, n_tokens: int = N_TOKENS, dim: int = TEXT_DIM
) -> TextEmbedding:
    """Deterministic hash-seeded stand-in for a CLIP text encoder.

    Entries are N(0, 1/dim), so every token has unit expected norm and the
    two stats columns are not drowned out by the text part after fusion.
    """
    prompt = build_prompt(caption, degradation)
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    matrix = (rng.standard_normal((n_tokens, dim)) / np.sqrt(dim)).astype(np.float32)
    return TextEmbedding(matrix=matrix, source_caption=prompt)


def make_stats_conditioning(
    mu: float | None,
    sigma: float | None,
    range_mu: tuple[float, float],
    range_sigma: tuple[float, float],
    null: bool = False,
) -> StatsConditioning:
    rows = [
        encode_onehot(mu, range_mu, null_flag=null).vector,
        encode_onehot(sigma, range_sigma, null_flag=null).vector,
    ]
    return StatsConditioning(matrix=np.stack(rows))


def null_stats_conditioning(n_bins: int = ENCODING_LENGTH) -> StatsConditioning:
    m = np.zeros((2, n_bins), dtype=np.float32)
    m[:, -1] = 1.0
    return StatsConditioning(matrix=m)


class PromptFusion(nn.Module):
    """Learnable projections mapping (stats, text) to the prompt embedding."""

    def __init__(
        self,
        n_bins: int = ENCODING_LENGTH,
        n_tokens: int = N_TOKENS,
        text_dim: int = TEXT_DIM,
        init_noise: float = 1e-3,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.n_bins, self.n_tokens, self.text_dim = n_bins, n_tokens, text_dim
        self.proj_stats = nn.Linear(n_bins, n_tokens)
        self.proj_out = nn.Linear(text_dim + 2, text_dim)
        with torch.no_grad():
            # DCT rows over the value bins: neighbouring bins start out with
            # similar embeddings, so sparsely populated bins still inherit an
            # ordering from their neighbours. The null slot stays at zero.
            n_val = n_bins - 1
            j = torch.arange(n_tokens, dtype=torch.float64)[:, None]
            k = torch.arange(n_val, dtype=torch.float64)[None, :] + 0.5
            basis = torch.zeros(n_tokens, n_bins, dtype=torch.float64)
            basis[:, :n_val] = torch.cos(np.pi * j * k / n_val)
            self.proj_stats.weight.copy_(basis)
            self.proj_stats.bias.zero_()
            w = torch.zeros(text_dim, text_dim + 2)
            w[:, :text_dim] = torch.eye(text_dim)
            if init_noise:
                w += init_noise * torch.randn(w.shape, generator=generator)
                # stats columns start at the scale of a unit-norm text token
                w[:, text_dim:] = torch.randn(text_dim, 2, generator=generator) / np.sqrt(text_dim)
            self.proj_out.weight.copy_(w)
            self.proj_out.bias.zero_()

    @classmethod
    def identity(cls, **kwargs) -> "PromptFusion":
        """All-zero stats path and exact identity on the text columns."""
        fusion = cls(init_noise=0.0, **kwargs)
        with torch.no_grad():
            fusion.proj_stats.weight.zero_()
        return fusion

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ValueError(f"non-finite fusion parameter {name}")

    def forward(self, stats: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        # stats: (B, 2, n_bins); text: (B, n_tokens, text_dim)
        stats_proj = self.proj_stats(stats).transpose(1, 2)
        return self.proj_out(torch.cat([text, stats_proj], dim=2))

    def forward_indexed(self, stats: torch.Tensor, texts: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
        """Same result as ``forward(stats, texts[index])``.

        The output projection is affine, so the text part is computed once
        per distinct text and gathered; this is what keeps batched training
        cheap when many samples share a caption.
        """
        w_text = self.proj_out.weight[:, : self.text_dim]
        w_stats = self.proj_out.weight[:, self.text_dim :]
        text_part = texts @ w_text.T
        stats_proj = self.proj_stats(stats).transpose(1, 2)
        return text_part[index] + stats_proj @ w_stats.T + self.proj_out.bias


def fuse(stats: StatsConditioning, text: TextEmbedding, params: PromptFusion) -> np.ndarray:
    """Single-sample prompt embedding as a ``77 x 768`` array."""
    params.check_finite()
    dtype = next(params.parameters()).dtype
    s = torch.as_tensor(np.asarray(stats.matrix), dtype=dtype)[None]
    t = torch.as_tensor(np.asarray(text.matrix), dtype=dtype)[None]
    if s.shape[1:] != (2, params.n_bins) or t.shape[1:] != (params.n_tokens, params.text_dim):
        raise ValueError(f"bad conditioning shapes {tuple(s.shape[1:])}, {tuple(t.shape[1:])}")
    with torch.no_grad():
        return params(s, t)[0].numpy()
