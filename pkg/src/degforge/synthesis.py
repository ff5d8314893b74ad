"""Dataset synthesis: planning, stats sampling, generation, filtering, manifest."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from degforge import toyworld
from degforge.degstats import StatsHistogram, degradation_map, sample_mu_sigma, stats_of_map
from degforge.diffusion.generator import GenDeg, GuidanceConfig, sample
from degforge.latentcodec import round_trip_clean
from degforge.manifest import ManifestRecord, append_record, write_manifest
from degforge.scm import GtMode, SCMNet, apply_scm, route_ground_truth
from degforge.toyworld import ALL_KINDS, DegradationKind

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
PARTIAL_NAME = "manifest.partial.jsonl"

# Mean-degradation thresholds above which a generated sample is discarded.
# Low-light has no published threshold and is unfiltered by default.
DEFAULT_THRESHOLDS: dict[DegradationKind, float | None] = {
    DegradationKind.HAZE: 0.3,
    DegradationKind.RAIN: 0.23,
    DegradationKind.SNOW: 0.45,
    DegradationKind.MOTION_BLUR: 0.07,
    DegradationKind.RAINDROP: 0.1,
    DegradationKind.LOW_LIGHT: None,
}


@dataclass(frozen=True)
class GenerationPlan:
    clean_path: str
    source_degradation: DegradationKind | None
    targets: tuple[DegradationKind, ...]


@dataclass(frozen=True)
class FilterRule:
    degradation: DegradationKind
    threshold: float | None

    @classmethod
    def default(cls, degradation: DegradationKind | str, overrides: Mapping[str, float | None] | None = None) -> "FilterRule":
        kind = DegradationKind.parse(degradation)
        if overrides and kind.value in overrides:
            return cls(kind, overrides[kind.value])
        return cls(kind, DEFAULT_THRESHOLDS[kind])


def plan(corpus: Sequence[tuple[str, DegradationKind | str | None]]) -> list[GenerationPlan]:
    """One plan per clean image targeting every degradation it was not paired with."""
    plans = []
    for clean_path, source in corpus:
        src = DegradationKind.parse(source) if source is not None else None
        targets = tuple(k for k in ALL_KINDS if k is not src)
        plans.append(GenerationPlan(str(clean_path), src, targets))
    return plans


def filter_sample(x_gen: np.ndarray, clean: np.ndarray, rule: FilterRule) -> tuple[bool, float]:
    mu = stats_of_map(degradation_map(x_gen, clean)).mu
    kept = rule.threshold is None or mu <= rule.threshold
    return kept, mu


def quantize(image: np.ndarray) -> np.ndarray:
    """The exact array :func:`toyworld.load_png` returns for ``image`` written as PNG."""
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / 255.0


def derive_seed(master_seed: int, index: int, degradation: DegradationKind | str) -> int:
    """Stable per-(image, degradation) seed, independent of run order."""
    kind = DegradationKind.parse(degradation)
    digest = hashlib.sha256(f"{int(master_seed)}:{int(index)}:{kind.value}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class SynthesisConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    random_sigma_rate: float = 1.0 / 20.0
    thresholds: dict[str, float | None] = field(default_factory=dict)
    workers: int = 1


def _check_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output directory {out_dir} is not writable: {exc}") from exc


def _load_partial(path: Path) -> dict[tuple[int, str], ManifestRecord]:
    done: dict[tuple[int, str], ManifestRecord] = {}
    if not path.exists():
        return done
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            rec = ManifestRecord.from_doc(json.loads(line), path.parent)
        except (ValueError, TypeError):
            # A torn trailing line from an interrupted run; regenerate it.
            continue
        if Path(rec.gen_path).exists() and Path(rec.gt_path).exists():
            done[rec.key] = rec
    return done


def _generate_one(
    model: GenDeg,
    scm: SCMNet | None,
    histograms: Mapping[DegradationKind, Sequence[StatsHistogram]],
    item: tuple[int, GenerationPlan, DegradationKind],
    master_seed: int,
    out_dir: Path,
    cfg: SynthesisConfig,
    checkpoint_id: str,
) -> ManifestRecord:
    index, p, kind = item
    seed = derive_seed(master_seed, index, kind)
    rng = np.random.default_rng(seed)
    sources = histograms.get(kind) or ()
    if not sources:
        raise KeyError(f"no histogram registered for {kind.value}")
    hist = sources[int(rng.integers(0, len(sources)))]
    s = sample_mu_sigma(hist, rng, cfg.random_sigma_rate)
    clean = toyworld.load_png(p.clean_path)
    x_gen = sample(model, clean, kind, s.mu_gen, s.sigma_gen, cfg=cfg.guidance, rng=rng)

    route = route_ground_truth(kind)
    gen_path = out_dir / kind.value / f"{index}.png"
    if route.mode is GtMode.SCM_CORRECTED and scm is not None:
        x_out, gt_mode = apply_scm(x_gen, clean, scm), GtMode.SCM_CORRECTED.value
        gt_path = Path(p.clean_path)
    else:
        x_out, gt_mode = x_gen, GtMode.VAE_ROUND_TRIP.value
        gt = quantize(round_trip_clean(model.codec, clean))
        gt_path = out_dir / "gt" / kind.value / f"{index}.png"
        toyworld.save_png(gt_path, gt)
    x_out = quantize(x_out)
    toyworld.save_png(gen_path, x_out)

    # Realized stats are measured against the clean image for every route.
    kept, mu_real = filter_sample(x_out, clean, FilterRule.default(kind, cfg.thresholds))
    sigma_real = stats_of_map(degradation_map(x_out, clean)).sigma
    return ManifestRecord(
        index=index,
        clean_path=str(Path(p.clean_path).resolve()),
        gen_path=str(gen_path.resolve()),
        gt_path=str(gt_path.resolve()),
        degradation=kind.value,
        mu_gen=s.mu_gen,
        sigma_gen=s.sigma_gen,
        mu_realized=mu_real,
        sigma_realized=sigma_real,
        kept=bool(kept),
        seed=seed,
        generator_checkpoint_id=checkpoint_id,
        gt_mode=gt_mode,
        source="generated",
    )


def synthesize(
    plans: Sequence[GenerationPlan],
    histograms: Mapping[DegradationKind, Sequence[StatsHistogram]],
    model: GenDeg,
    master_seed: int,
    out_dir: str | Path,
    cfg: SynthesisConfig | None = None,
    scm: SCMNet | None = None,
    checkpoint_id: str = "",
    overwrite: bool = False,
    limit: int | None = None,
) -> list[ManifestRecord]:
    """Generate every (plan, target) pair and write ``out_dir/manifest.jsonl``.

    Finished records are appended to a partial manifest as they complete, so
    an interrupted run resumes where it stopped.  ``limit`` stops after that
    many new generations (used to simulate interruption).  Discarded samples
    keep their rows with ``kept=false``.
    """
    cfg = cfg or SynthesisConfig()
    out_dir = Path(out_dir)
    _check_writable(out_dir)
    final = out_dir / MANIFEST_NAME
    partial = out_dir / PARTIAL_NAME
    if final.exists() and not overwrite:
        raise FileExistsError(f"{final} exists; pass overwrite to regenerate")
    if overwrite:
        final.unlink(missing_ok=True)
    done = _load_partial(partial)
    if done:
        write_manifest(partial, [done[k] for k in sorted(done)])
    items = [(i, p, k) for i, p in enumerate(plans) for k in p.targets]
    todo = [it for it in items if (it[0], it[2].value) not in done]
    if limit is not None:
        todo = todo[:limit]
    log.info("synthesis: %d planned, %d already done, %d to generate", len(items), len(done), len(todo))

    def work(item):
        return _generate_one(model, scm, histograms, item, master_seed, out_dir, cfg, checkpoint_id)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        for rec in pool.map(work, todo):
            append_record(partial, rec)
            done[rec.key] = rec

    if limit is not None and len(done) < len(items):
        return [done[k] for k in sorted(done)]
    records = [done[(i, k.value)] for i, p, k in items]
    write_manifest(final, records)
    partial.unlink(missing_ok=True)
    return records
