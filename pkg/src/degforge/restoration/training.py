"""Restorer training loop, learning-rate schedule and dataset mixing."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from degforge import toyworld
from degforge.latentcodec import to_batch
from degforge.manifest import ManifestRecord
from degforge.restoration.model import Restorer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 2e-4
    warmup_epochs: int = 1
    batch_size: int = 48
    weight_decay: float = 0.05
    workers: int = 1

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, then cosine annealing to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def l1_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.l1_loss(output, target)


def _load_pairs(records: Sequence[ManifestRecord], workers: int) -> tuple[np.ndarray, np.ndarray]:
    def load(rec: ManifestRecord):
        return toyworld.load_png(rec.gen_path), toyworld.load_png(rec.gt_path)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = list(pool.map(load, records))
    return np.stack([a for a, _ in loaded]), np.stack([b for _, b in loaded])


@dataclass
class CurveRow:
    epoch: int
    step: int
    lr: float
    loss: float


def train_restorer(
    model: Restorer, records: Sequence[ManifestRecord], cfg: TrainConfig | None = None, seed: int = 0
) -> list[CurveRow]:
    """L1 training on the kept rows of ``records``; returns the per-step loss curve."""
    cfg = cfg or TrainConfig()
    rows = [r for r in records if r.kept]
    if not rows:
        raise ValueError("no kept records to train on")
    for r in rows:
        for p in (r.gen_path, r.gt_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"manifest references missing file {p}")
    degraded, target = _load_pairs(rows, cfg.workers)
    x_all, y_all = to_batch(degraded), to_batch(target)

    g = torch.Generator().manual_seed(seed)
    steps_per_epoch = max(1, math.ceil(len(rows) / cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    curve: list[CurveRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(rows), generator=g)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = lr_at(step, total, warmup, cfg.lr)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = l1_loss(model.forward_raw(x_all[idx]), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(CurveRow(epoch, step, lr, loss.item()))
            step += 1
        log.info("restorer epoch %d mean loss %.5f", epoch, epoch_means(curve)[-1])
    model.eval()
    return curve


def epoch_means(curve: Sequence[CurveRow]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for row in curve:
        by_epoch.setdefault(row.epoch, []).append(row.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_curve(path: str | Path, curve: Sequence[CurveRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "lr", "loss"])
        for row in curve:
            writer.writerow([row.epoch, row.step, repr(row.lr), repr(row.loss)])


def save_restorer(model: Restorer, path: str | Path, training: dict | None = None, seed: int = 0, overwrite: bool = False) -> Path:
    from degforge.checkpoint import save_container

    meta = {"kind": "restorer", "config": model.config.to_dict(), "training": dict(training or {}), "rng_seed": int(seed)}
    return save_container(path, meta, {"restorer": model.state_dict()}, overwrite=overwrite)


def load_restorer(path: str | Path) -> Restorer:
    from degforge.checkpoint import CheckpointError, load_section, read_manifest
    from degforge.restoration.model import RestorerConfig

    manifest = read_manifest(path)
    if manifest.get("kind") != "restorer":
        raise CheckpointError(f"{path} is not a restorer checkpoint")
    model = Restorer(RestorerConfig(**manifest["config"]))
    model.load_state_dict(load_section(path, "restorer"))
    return model.eval()


class DuplicatePathError(ValueError):
    def __init__(self, duplicates: list[str]):
        self.duplicates = duplicates
        super().__init__(f"{len(duplicates)} duplicate gen_path entries: {duplicates[:5]}")


def mix_datasets(
    existing: Sequence[ManifestRecord], generated: Sequence[ManifestRecord]
) -> tuple[list[ManifestRecord], dict[str, int]]:
    """Concatenate with source tags; returns the rows and per-source counts."""
    rows = [replace(r, source="existing") for r in existing] + [replace(r, source="generated") for r in generated]
    counts = Counter(r.gen_path for r in rows)
    dups = sorted(p for p, c in counts.items() if c > 1)
    if dups:
        raise DuplicatePathError(dups)
    return rows, {"existing": len(existing), "generated": len(generated), "total": len(rows)}


def training_regimes(
    existing: Sequence[ManifestRecord], generated: Sequence[ManifestRecord]
) -> dict[str, list[ManifestRecord]]:
    """Existing-only, generated-only and combined training sets."""
    both, _ = mix_datasets(existing, generated)
    n = len(existing)
    return {"existing": both[:n], "generated": both[n:], "combined": both}
