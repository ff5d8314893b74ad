"""Degradation maps, (mu, sigma) statistics, binning and histogram sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from degforge.toyworld import DegradationKind, ImagePair

N_BINS = 128
NULL_BIN = N_BINS
ENCODING_LENGTH = N_BINS + 1
DEGENERATE_WIDTH = 1e-6
HISTOGRAM_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DegradationStats:
    mu: float
    sigma: float


@dataclass(frozen=True)
class BinEncoding:
    vector: np.ndarray
    range_lo: float
    range_hi: float
    null_flag: bool

    @property
    def index(self) -> int:
        return int(np.argmax(self.vector))


def degradation_map(degraded: np.ndarray, clean: np.ndarray) -> np.ndarray:
    degraded = np.asarray(degraded)
    clean = np.asarray(clean)
    if degraded.shape != clean.shape:
        raise ValueError(f"shape mismatch: degraded {degraded.shape} vs clean {clean.shape}")
    return np.abs(degraded.astype(np.float64) - clean.astype(np.float64))


def stats_of_map(cmap: np.ndarray) -> DegradationStats:
    """Joint mean and population std over every pixel and channel."""
    cmap = np.asarray(cmap, dtype=np.float64)
    if cmap.size == 0:
        raise ValueError("empty degradation map")
    return DegradationStats(mu=float(cmap.mean()), sigma=float(cmap.std()))


def pair_stats(pair: ImagePair) -> DegradationStats:
    return stats_of_map(degradation_map(pair.degraded, pair.clean))


def compute_range(values: Iterable[float]) -> tuple[float, float]:
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot compute a range of an empty sequence")
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        hi = lo + DEGENERATE_WIDTH
    return lo, hi


def bin_index(value: float, value_range: tuple[float, float]) -> int:
    a, b = value_range
    if not a < b:
        raise ValueError(f"invalid range [{a}, {b}]: need a < b")
    k = int(np.floor(N_BINS * (float(value) - a) / (b - a)))
    return min(max(k, 0), N_BINS - 1)


def bin_value_bounds(k: int, value_range: tuple[float, float]) -> tuple[float, float]:
    a, b = value_range
    width = (b - a) / N_BINS
    return a + k * width, a + (k + 1) * width


def encode_onehot(value: float | None, value_range: tuple[float, float], null_flag: bool = False) -> BinEncoding:
    a, b = value_range
    vec = np.zeros(ENCODING_LENGTH, dtype=np.float32)
    if null_flag:
        vec[NULL_BIN] = 1.0
    else:
        vec[bin_index(value, value_range)] = 1.0
    return BinEncoding(vector=vec, range_lo=float(a), range_hi=float(b), null_flag=bool(null_flag))


def decode_onehot(enc: BinEncoding | np.ndarray) -> int | None:
    """Hot bin index, or ``None`` for the null bin."""
    vec = enc.vector if isinstance(enc, BinEncoding) else np.asarray(enc)
    k = int(np.argmax(vec))
    return None if k == NULL_BIN else k


@dataclass
class StatsHistogram:
    degradation: DegradationKind
    mu_counts: np.ndarray
    sigma_counts_by_mu_bin: np.ndarray
    range_mu: tuple[float, float]
    range_sigma: tuple[float, float]
    sources: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.degradation = DegradationKind.parse(self.degradation)
        self.mu_counts = np.asarray(self.mu_counts, dtype=np.int64)
        self.sigma_counts_by_mu_bin = np.asarray(self.sigma_counts_by_mu_bin, dtype=np.int64)
        self.range_mu = (float(self.range_mu[0]), float(self.range_mu[1]))
        self.range_sigma = (float(self.range_sigma[0]), float(self.range_sigma[1]))
        self.validate()

    def validate(self) -> None:
        if self.mu_counts.shape != (N_BINS,):
            raise ValueError(f"mu_counts must have length {N_BINS}")
        if self.sigma_counts_by_mu_bin.shape != (N_BINS, N_BINS):
            raise ValueError(f"sigma_counts_by_mu_bin must be {N_BINS}x{N_BINS}")
        if (self.mu_counts < 0).any() or (self.sigma_counts_by_mu_bin < 0).any():
            raise ValueError("histogram counts must be nonnegative")
        rows = self.sigma_counts_by_mu_bin.sum(axis=1)
        bad = np.nonzero(rows != self.mu_counts)[0]
        if bad.size:
            raise ValueError(f"row-sum invariant violated at mu bins {bad.tolist()[:8]}")

    @property
    def total(self) -> int:
        return int(self.mu_counts.sum())

    def to_json(self) -> dict:
        return {
            "schema_version": HISTOGRAM_SCHEMA_VERSION,
            "degradation": self.degradation.value,
            "range_mu": list(self.range_mu),
            "range_sigma": list(self.range_sigma),
            "mu_counts": self.mu_counts.tolist(),
            "sigma_counts_by_mu_bin": self.sigma_counts_by_mu_bin.tolist(),
            "sources": list(self.sources),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StatsHistogram":
        version = doc.get("schema_version")
        if version != HISTOGRAM_SCHEMA_VERSION:
            raise ValueError(f"unsupported histogram schema_version {version!r}")
        return cls(
            degradation=doc["degradation"],
            mu_counts=doc["mu_counts"],
            sigma_counts_by_mu_bin=doc["sigma_counts_by_mu_bin"],
            range_mu=tuple(doc["range_mu"]),
            range_sigma=tuple(doc["range_sigma"]),
            sources=list(doc.get("sources", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "StatsHistogram":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_histograms(
    pairs: Sequence[ImagePair],
    range_mu: tuple[float, float] | None = None,
    range_sigma: tuple[float, float] | None = None,
) -> dict[DegradationKind, StatsHistogram]:
    """One histogram per degradation present in ``pairs``.

    Ranges are pooled over every pair of a degradation unless given
    explicitly (explicit ranges apply to every degradation).
    """
    if len(pairs) == 0:
        raise ValueError("cannot build histograms from an empty corpus")
    grouped: dict[DegradationKind, list[DegradationStats]] = {}
    sources: dict[DegradationKind, set[str]] = {}
    for pair in pairs:
        kind = DegradationKind.parse(pair.degradation)
        grouped.setdefault(kind, []).append(pair_stats(pair))
        sources.setdefault(kind, set()).add(pair.source)
    return {
        kind: histogram_from_stats(kind, stats, range_mu, range_sigma, sorted(sources[kind]))
        for kind, stats in sorted(grouped.items(), key=lambda kv: kv[0].index)
    }


def histogram_from_stats(
    kind: DegradationKind,
    stats: Sequence[DegradationStats],
    range_mu: tuple[float, float] | None = None,
    range_sigma: tuple[float, float] | None = None,
    sources: Sequence[str] = (),
) -> StatsHistogram:
    if not stats:
        raise ValueError(f"no statistics for {kind}")
    mus = np.array([s.mu for s in stats])
    sigmas = np.array([s.sigma for s in stats])
    range_mu = range_mu or compute_range(mus)
    range_sigma = range_sigma or compute_range(sigmas)
    mu_bins = np.array([bin_index(m, range_mu) for m in mus])
    sigma_bins = np.array([bin_index(s, range_sigma) for s in sigmas])
    joint = np.zeros((N_BINS, N_BINS), dtype=np.int64)
    np.add.at(joint, (mu_bins, sigma_bins), 1)
    return StatsHistogram(
        degradation=kind,
        mu_counts=joint.sum(axis=1),
        sigma_counts_by_mu_bin=joint,
        range_mu=range_mu,
        range_sigma=range_sigma,
        sources=list(sources),
    )


@dataclass(frozen=True)
class StatsSample:
    mu_gen: float
    sigma_gen: float
    mu_bin: int
    sigma_bin: int
    random_sigma: bool


def observed_sigma_limits(hist: StatsHistogram) -> tuple[float, float]:
    """Value span of the populated sigma bins, clamped to ``range_sigma``."""
    cols = np.nonzero(hist.sigma_counts_by_mu_bin.sum(axis=0))[0]
    lo = bin_value_bounds(int(cols.min()), hist.range_sigma)[0]
    hi = bin_value_bounds(int(cols.max()), hist.range_sigma)[1]
    a, b = hist.range_sigma
    return max(lo, a), min(hi, b)


def sample_mu_sigma(
    hist: StatsHistogram, rng: np.random.Generator, random_sigma_rate: float = 1.0 / 20.0
) -> StatsSample:
    """Draw a correlated (mu_gen, sigma_gen) pair.

    mu comes from the mu histogram, sigma from the sigma histogram of the
    chosen mu bin.  With probability ``random_sigma_rate`` sigma is instead
    uniform over the observed sigma span.  An empty mu-bin row (only possible
    for hand-built histograms) falls back to the global sigma histogram.
    """
    if hist.total <= 0:
        raise ValueError("cannot sample from an empty histogram")
    p_mu = hist.mu_counts / hist.mu_counts.sum()
    mu_bin = int(rng.choice(N_BINS, p=p_mu))
    lo, hi = bin_value_bounds(mu_bin, hist.range_mu)
    mu_gen = float(rng.uniform(lo, hi))

    random_sigma = bool(rng.random() < random_sigma_rate)
    if random_sigma:
        s_lo, s_hi = observed_sigma_limits(hist)
        sigma_gen = float(rng.uniform(s_lo, s_hi))
        sigma_bin = bin_index(sigma_gen, hist.range_sigma)
    else:
        row = hist.sigma_counts_by_mu_bin[mu_bin]
        if row.sum() == 0:
            row = hist.sigma_counts_by_mu_bin.sum(axis=0)
        sigma_bin = int(rng.choice(N_BINS, p=row / row.sum()))
        s_lo, s_hi = bin_value_bounds(sigma_bin, hist.range_sigma)
        sigma_gen = float(rng.uniform(s_lo, s_hi))
    return StatsSample(mu_gen, sigma_gen, mu_bin, sigma_bin, random_sigma)
