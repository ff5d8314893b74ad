"""Image-quality metrics, distribution distances and report assembly."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg, ndimage, stats

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
ERROR_SENTINEL = "error"


@dataclass
class FeatureSet:
    matrix: np.ndarray
    source_label: str = ""

    def __post_init__(self) -> None:
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if self.matrix.ndim != 2:
            raise ValueError("feature matrix must be N x D")
        if not np.isfinite(self.matrix).all():
            raise ValueError(f"non-finite features in {self.source_label!r}")


def _same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped when MSE is 0."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(cap, 10.0 * math.log10(1.0 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter keeping only fully-covered positions."""
    r = len(g1) // 2
    out = ndimage.correlate1d(img, g1, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g1, axis=1, mode="constant")
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid Gaussian windows (sigma 1.5), averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} SSIM window")
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g1 = np.exp(-(x**2) / (2 * 1.5**2))
    g1 /= g1.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x_, y_ = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x_, g1), _filter_valid(y_, g1)
        sxx = _filter_valid(x_ * x_, g1) - mx * mx
        syy = _filter_valid(y_ * y_, g1) - my * my
        sxy = _filter_valid(x_ * y_, g1) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def frechet_distance(f1: FeatureSet, f2: FeatureSet, eps: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    x, y = f1.matrix, f2.matrix
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("Frechet distance needs at least 2 samples per set")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    s1 = np.atleast_2d(np.cov(x, rowvar=False))
    s2 = np.atleast_2d(np.cov(y, rowvar=False))
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    if not np.isfinite(covmean).all():
        warnings.warn(f"singular covariance product; adding {eps} to the diagonal", RuntimeWarning)
        off = np.eye(s1.shape[0]) * eps
        covmean = linalg.sqrtm((s1 + off) @ (s2 + off))
    covmean = np.real(covmean)
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))
    return max(d, 0.0)


def feature_wasserstein(f1: FeatureSet, f2: FeatureSet, projections: int = 128, rng: int | np.random.Generator = 0) -> float:
    """Sliced Wasserstein-1: mean 1-D W1 over seeded random unit directions."""
    x, y = f1.matrix, f2.matrix
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    d = x.shape[1]
    if d == 1:
        return float(stats.wasserstein_distance(x[:, 0], y[:, 0]))
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    dirs = gen.standard_normal((projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = x @ dirs.T, y @ dirs.T
    return float(np.mean([stats.wasserstein_distance(px[:, k], py[:, k]) for k in range(projections)]))


def pixel_stat_features(images: Sequence[np.ndarray]) -> np.ndarray:
    """Default pluggable features: per-channel mean/std plus gradient energy."""
    feats = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        gx = np.abs(np.diff(img, axis=1)).mean()
        gy = np.abs(np.diff(img, axis=0)).mean()
        feats.append(np.concatenate([img.mean(axis=(0, 1)), img.std(axis=(0, 1)), [gx, gy]]))
    return np.asarray(feats)


def degradation_features(degraded: Sequence[np.ndarray], clean: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel-statistics features of the degradation maps |degraded - clean|."""
    maps = [np.abs(np.asarray(d, dtype=np.float64) - np.asarray(c, dtype=np.float64)) for d, c in zip(degraded, clean)]
    return pixel_stat_features(maps)


Scorer = Callable[[np.ndarray, np.ndarray], float]


@dataclass
class ReportRow:
    dataset: str
    split: str
    n: int
    psnr: float
    ssim: float
    fid: float | None
    extra: dict[str, float | str] = field(default_factory=dict)


@dataclass
class EvalReport:
    rows: list[ReportRow]

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        extra_keys = sorted({k for r in self.rows for k in r.extra})
        with cpath.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "split", "n", "psnr", "ssim", "fid", *extra_keys])
            for r in self.rows:
                w.writerow([r.dataset, r.split, r.n, repr(r.psnr), repr(r.ssim), "" if r.fid is None else repr(r.fid), *[r.extra.get(k, "") for k in extra_keys]])
        return jpath, cpath

    def radar(self) -> dict[str, list]:
        """Per-dataset axes and values for a radar plot."""
        return {
            "axes": [f"{r.split}/{r.dataset}" for r in self.rows],
            "psnr": [r.psnr for r in self.rows],
            "ssim": [r.ssim for r in self.rows],
        }


def build_report(
    pairs_by_dataset: Mapping[str, Sequence[tuple[np.ndarray, np.ndarray]]],
    splits: Mapping[str, str],
    scorers: Mapping[str, Scorer] | None = None,
    feature_fn: Callable[[Sequence[np.ndarray]], np.ndarray] = pixel_stat_features,
) -> EvalReport:
    """One row per dataset of (output, reference) pairs, sorted by (split, dataset).

    FID is computed on ``feature_fn`` features of outputs vs references.  A
    scorer that raises marks that dataset's column with ``"error"``.
    """
    scorers = dict(scorers or {})
    rows = []
    for name, pairs in pairs_by_dataset.items():
        if not pairs:
            raise ValueError(f"dataset {name!r} has no pairs")
        split = splits.get(name, "within")
        if split not in ("within", "ood"):
            raise ValueError(f"split for {name!r} must be 'within' or 'ood', got {split!r}")
        outs = [p[0] for p in pairs]
        refs = [p[1] for p in pairs]
        p_val = float(np.mean([psnr(o, r) for o, r in pairs]))
        s_val = float(np.mean([ssim(o, r) for o, r in pairs]))
        fid = None
        if len(pairs) >= 2:
            fid = frechet_distance(FeatureSet(feature_fn(outs), name), FeatureSet(feature_fn(refs), name))
        extra: dict[str, float | str] = {}
        for sname, scorer in sorted(scorers.items()):
            try:
                extra[sname] = float(np.mean([scorer(o, r) for o, r in pairs]))
            except Exception as exc:  # noqa: BLE001 - scorer plugins are untrusted
                log.warning("scorer %s failed on %s: %s", sname, name, exc)
                extra[sname] = ERROR_SENTINEL
        rows.append(ReportRow(name, split, len(pairs), p_val, s_val, fid, extra))
    rows.sort(key=lambda r: (r.split, r.dataset))
    return EvalReport(rows)
