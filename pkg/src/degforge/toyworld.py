"""Seeded procedural scenes and analytic degradation operators.

Everything here is a pure function of its arguments, so the same
(seed, kind, severity) always yields bit-identical arrays.  Images are
float32 ``H x W x 3`` arrays in ``[0, 1]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MIN_SIZE = 16

# Haze model constants.
AIRLIGHT = 0.8
HAZE_BETA_SCALE = 3.0

# 8-bit PNG round trip is exact up to this.
PNG_TOLERANCE = 1.0 / 255.0


class DegradationKind(str, enum.Enum):
    HAZE = "haze"
    RAIN = "rain"
    SNOW = "snow"
    MOTION_BLUR = "motion_blur"
    LOW_LIGHT = "low_light"
    RAINDROP = "raindrop"

    @property
    def index(self) -> int:
        return list(DegradationKind).index(self)

    @classmethod
    def parse(cls, value: "str | DegradationKind") -> "DegradationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ValueError(
                f"unknown degradation {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


ALL_KINDS: tuple[DegradationKind, ...] = tuple(DegradationKind)


@dataclass(frozen=True)
class CleanScene:
    pixels: np.ndarray
    depth: np.ndarray
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class ImagePair:
    """A clean/degraded pair with its degradation label and provenance tag."""

    clean: np.ndarray
    degraded: np.ndarray
    degradation: DegradationKind
    source: str = "toyworld"
    severity: float | None = None


def make_scene(seed: int, height: int, width: int) -> CleanScene:
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ValueError(f"scene must be at least {MIN_SIZE}x{MIN_SIZE}, got {height}x{width}")
    rng = np.random.default_rng([int(seed), 0x5CE7E])

    ys = np.linspace(0.0, 1.0, height)[:, None, None]
    xs = np.linspace(0.0, 1.0, width)[None, :, None]
    top, bottom = rng.uniform(0.15, 0.95, size=(2, 3))
    tilt = rng.uniform(-0.15, 0.15, size=3)
    img = top * (1.0 - ys) + bottom * ys + tilt * (xs - 0.5)
    img = np.broadcast_to(img, (height, width, 3)).copy()

    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25) * min(height, width)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hh = rng.uniform(0.1, 0.4) * height
            ww = rng.uniform(0.1, 0.4) * width
            mask = (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
        img[mask] = color

    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    # Far at the top, near at the bottom; strictly a function of the row.
    depth_col = (0.2 + 0.8 * (1.0 - np.linspace(0.0, 1.0, height))).astype(np.float32)
    depth = np.repeat(depth_col[:, None], width, axis=1)
    return CleanScene(pixels=pixels, depth=depth, seed=int(seed))


def _haze(scene: CleanScene, severity: float) -> np.ndarray:
    beta = HAZE_BETA_SCALE * severity
    t = np.exp(-beta * scene.depth.astype(np.float64))[..., None]
    return scene.pixels.astype(np.float64) * t + AIRLIGHT * (1.0 - t)


def _low_light(scene: CleanScene, severity: float) -> np.ndarray:
    return scene.pixels.astype(np.float64) ** (1.0 + 4.0 * severity)


def _motion_blur(scene: CleanScene, severity: float) -> np.ndarray:
    width = 1 + int(np.floor(8.0 * severity))
    if width == 1:
        return scene.pixels.astype(np.float64)
    return ndimage.uniform_filter1d(scene.pixels.astype(np.float64), size=width, axis=1, mode="nearest")


def _rain(scene: CleanScene, severity: float, rng: np.random.Generator) -> np.ndarray:
    img = scene.pixels.astype(np.float64)
    h, w = scene.shape
    layer = np.zeros((h, w))
    n = int(round(severity * 0.06 * h * w))
    slope = rng.uniform(-0.3, 0.3)
    for _ in range(n):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        length = int(rng.integers(3, max(4, h // 4)))
        for k in range(length):
            y, x = y0 + k, int(round(x0 + slope * k))
            if 0 <= y < h and 0 <= x < w:
                layer[y, x] = 1.0
    return img + 0.55 * layer[..., None]


def _snow(scene: CleanScene, severity: float, rng: np.random.Generator) -> np.ndarray:
    img = scene.pixels.astype(np.float64)
    h, w = scene.shape
    yy, xx = np.mgrid[0:h, 0:w]
    alpha = np.zeros((h, w))
    for _ in range(int(round(severity * 0.03 * h * w))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.6, 1.8)
        alpha = np.maximum(alpha, ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) * rng.uniform(0.6, 1.0))
    return img * (1.0 - alpha[..., None]) + 0.95 * alpha[..., None]


def _raindrop(scene: CleanScene, severity: float, rng: np.random.Generator) -> np.ndarray:
    img = scene.pixels.astype(np.float64)
    h, w = scene.shape
    blurred = ndimage.gaussian_filter(img, sigma=(2.0, 2.0, 0.0), mode="nearest")
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(round(severity * 12))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.06, 0.16) * min(h, w)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    out = img.copy()
    out[mask] = blurred[mask] * 0.85 + 0.12
    return out


def apply_degradation(
    scene: CleanScene, kind: DegradationKind | str, severity: float, seed: int = 0
) -> np.ndarray:
    """Degrade ``scene`` with one analytic operator at ``severity`` in [0, 1]."""
    kind = DegradationKind.parse(kind)
    severity = float(severity)
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {severity}")
    rng = np.random.default_rng([int(seed), kind.index, 0xDE6])
    if kind is DegradationKind.HAZE:
        out = _haze(scene, severity)
    elif kind is DegradationKind.LOW_LIGHT:
        out = _low_light(scene, severity)
    elif kind is DegradationKind.MOTION_BLUR:
        out = _motion_blur(scene, severity)
    elif kind is DegradationKind.RAIN:
        out = _rain(scene, severity, rng)
    elif kind is DegradationKind.SNOW:
        out = _snow(scene, severity, rng)
    else:
        out = _raindrop(scene, severity, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_pair(
    seed: int, kind: DegradationKind | str, severity: float, size: int = 32, source: str = "toyworld"
) -> ImagePair:
    scene = make_scene(seed, size, size)
    kind = DegradationKind.parse(kind)
    degraded = apply_degradation(scene, kind, severity, seed=seed)
    return ImagePair(scene.pixels, degraded, kind, source=source, severity=severity)


def make_corpus(
    kind: DegradationKind | str,
    n: int,
    seed: int = 0,
    size: int = 32,
    severity_range: tuple[float, float] = (0.0, 1.0),
    source: str = "toyworld",
) -> list[ImagePair]:
    """``n`` pairs with severities drawn uniformly from ``severity_range``."""
    kind = DegradationKind.parse(kind)
    rng = np.random.default_rng([int(seed), kind.index, 0xC0])
    lo, hi = severity_range
    pairs = []
    for i in range(n):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        severity = float(rng.uniform(lo, hi))
        pairs.append(make_pair(scene_seed, kind, severity, size=size, source=source))
    return pairs


def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
