"""Command-line entry point: ``degforge <command> [--config PATH] [flags]``.

Exit codes: 0 success, 2 config error, 3 precondition error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from degforge import checkpoint as ckpt
from degforge import toyworld
from degforge.config import ConfigError, RunConfig, load_config
from degforge.degstats import StatsHistogram, build_histograms
from degforge.manifest import ManifestRecord, read_manifest, write_manifest
from degforge.toyworld import DegradationKind, ImagePair

log = logging.getLogger("degforge")

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_RUNTIME = 0, 2, 3, 4
CACHE_ENV = "DEGFORGE_CACHE"


class PreconditionError(RuntimeError):
    pass


class Context:
    def __init__(self, cfg: RunConfig, dry_run: bool):
        self.cfg = cfg
        self.dry_run = dry_run
        self.out = Path(cfg.out)

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    @property
    def kinds(self) -> list[DegradationKind]:
        return [DegradationKind.parse(k) for k in self.cfg.toyworld.degradations]

    @property
    def generator_dir(self) -> Path:
        return Path(self.cfg.generator.checkpoint) if self.cfg.generator.checkpoint else self.path("generator")

    def guard(self, target: Path) -> None:
        """Refuse to clobber unless overwrite is set."""
        if target.exists() and any(target.iterdir() if target.is_dir() else [target]) and not self.cfg.overwrite:
            raise PreconditionError(f"{target} already exists; rerun with --overwrite to replace it")


def _report_plan(plan: dict) -> None:
    print(json.dumps({"dry_run": True, **plan}, indent=2, sort_keys=True, default=str))


def _existing_records(ctx: Context, name: str) -> list[ManifestRecord]:
    path = ctx.path("toyworld", f"{name}.jsonl")
    if not path.exists():
        raise PreconditionError(f"toy corpus manifest {path} missing; run `degforge toyworld` first")
    return read_manifest(path)


def _pairs_from_records(records: list[ManifestRecord]) -> list[ImagePair]:
    return [
        ImagePair(toyworld.load_png(r.clean_path), toyworld.load_png(r.gen_path), DegradationKind.parse(r.degradation), source=r.source)
        for r in records
    ]


# -- commands -----------------------------------------------------------------


def cmd_toyworld(ctx: Context) -> dict:
    tw = ctx.cfg.toyworld
    lo, hi = tw.severity_range
    splits = {
        "train": (tw.scenes_per_degradation, (lo, hi), 0),
        "heldout_within": (tw.held_out_per_degradation, (lo, hi), 1),
        "heldout_ood": (tw.held_out_per_degradation, (hi, 1.0) if hi < 1.0 else (0.0, lo), 2),
    }
    plan = {"command": "toyworld", "out": str(ctx.path("toyworld")), "splits": {k: {"n_per_kind": v[0], "severity": v[1]} for k, v in splits.items()}, "kinds": [k.value for k in ctx.kinds], "seed": ctx.cfg.seed}
    if ctx.dry_run:
        return plan
    root = ctx.path("toyworld")
    ctx.guard(root / "train.jsonl")
    for split, (n, sev, salt) in splits.items():
        records = []
        for kind in ctx.kinds:
            pairs = toyworld.make_corpus(kind, n, seed=ctx.cfg.seed * 1000 + salt, size=tw.size, severity_range=sev)
            for i, p in enumerate(pairs):
                clean_path = root / split / "clean" / kind.value / f"{i}.png"
                deg_path = root / split / "degraded" / kind.value / f"{i}.png"
                toyworld.save_png(clean_path, p.clean)
                toyworld.save_png(deg_path, p.degraded)
                records.append(ManifestRecord(index=i, clean_path=str(clean_path.resolve()), gen_path=str(deg_path.resolve()), gt_path=str(clean_path.resolve()), degradation=kind.value, gt_mode="clean", source="existing"))
        write_manifest(root / f"{split}.jsonl", records)
    return plan


def cmd_stats(ctx: Context) -> dict:
    plan = {"command": "stats", "input": str(ctx.path("toyworld", "train.jsonl")), "out": str(ctx.path("stats"))}
    if ctx.dry_run:
        return plan
    pairs = _pairs_from_records(_existing_records(ctx, "train"))
    ctx.guard(ctx.path("stats"))
    for kind, hist in build_histograms(pairs).items():
        hist.save(ctx.path("stats", f"{kind.value}.json"))
    return plan


def _codec_cache_key(ctx: Context) -> str:
    doc = {"codec": ctx.cfg.codec.model_dump(), "toyworld": ctx.cfg.toyworld.model_dump(), "seed": ctx.cfg.seed}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _train_codec(ctx: Context, pairs: list[ImagePair]):
    from degforge.latentcodec import CodecConfig, LatentCodec, train_codec

    cc = ctx.cfg.codec
    codec = LatentCodec(CodecConfig(f=cc.f, c=cc.c, mode=cc.mode, width=cc.width))
    cache = os.environ.get(CACHE_ENV)
    cache_dir = Path(cache) / f"codec-{_codec_cache_key(ctx)}" if cache else None
    if cache_dir is not None and (cache_dir / ckpt.MANIFEST).exists() and not codec.is_identity:
        codec.config.scale = ckpt.read_manifest(cache_dir)["codec"]["scale"]
        codec.load_state_dict(ckpt.load_section(cache_dir, "codec"))
        codec.requires_grad_(False)
        log.info("codec loaded from cache %s", cache_dir)
        return codec.eval()
    images = np.concatenate([np.stack([p.clean for p in pairs]), np.stack([p.degraded for p in pairs])])
    train_codec(codec, images, steps=cc.steps, batch_size=cc.batch_size, lr=cc.lr, seed=ctx.cfg.seed)
    if cache_dir is not None and not codec.is_identity:
        ckpt.save_container(cache_dir, {"kind": "codec", "codec": codec.config.to_dict()}, {"codec": codec.state_dict()}, overwrite=True)
    return codec.eval()


def cmd_train_gen(ctx: Context) -> dict:
    from degforge.diffusion import Denoiser, DenoiserConfig, GenDeg, GenTrainConfig, make_schedule, train_generator

    gc = ctx.cfg.generator
    plan = {"command": "train-gen", "out": str(ctx.generator_dir), "T": gc.T, "steps": gc.steps, "codec_steps": ctx.cfg.codec.steps, "seed": ctx.cfg.seed}
    if ctx.dry_run:
        return plan
    pairs = _pairs_from_records(_existing_records(ctx, "train"))
    ctx.guard(ctx.generator_dir)
    torch.manual_seed(ctx.cfg.seed)
    codec = _train_codec(ctx, pairs)
    denoiser = Denoiser(DenoiserConfig(latent_channels=codec.config.c, channels=tuple(gc.channels)))
    model = GenDeg(make_schedule(gc.T, gc.schedule), codec, denoiser=denoiser)
    tcfg = GenTrainConfig(steps=gc.steps, batch_size=gc.batch_size, lr=gc.lr, cond_dropout=gc.cond_dropout, seed=ctx.cfg.seed)
    losses = train_generator(model, pairs, tcfg)
    ckpt.save_generator(model, ctx.generator_dir, training={**tcfg.to_dict(), "final_loss": float(np.mean(losses[-50:]))}, seed=ctx.cfg.seed, overwrite=True)
    return plan


def _require_generator(ctx: Context) -> Path:
    path = ctx.generator_dir
    if not (path / ckpt.MANIFEST).exists():
        raise PreconditionError(f"generator checkpoint required (none at {path}); run `degforge train-gen` first")
    return path


def cmd_train_scm(ctx: Context) -> dict:
    from degforge.scm import SCMNet, SCMTrainConfig, save_scm, train_scm

    sc = ctx.cfg.scm
    plan = {"command": "train-scm", "checkpoint": str(ctx.generator_dir), "steps": sc.steps, "seed": ctx.cfg.seed}
    if ctx.dry_run:
        return plan
    path = _require_generator(ctx)
    if ckpt.has_section(path, "scm") and not ctx.cfg.overwrite:
        raise PreconditionError(f"{path} already has an SCM section; rerun with --overwrite to replace it")
    generator = ckpt.load_generator(path)
    pairs = _pairs_from_records(_existing_records(ctx, "train"))
    torch.manual_seed(ctx.cfg.seed)
    params = SCMNet(width=sc.width)
    tcfg = SCMTrainConfig(steps=sc.steps, batch_size=sc.batch_size, lr=sc.lr, seed=ctx.cfg.seed)
    try:
        train_scm(generator, pairs, params, tcfg)
    except ValueError as exc:
        raise PreconditionError(str(exc)) from exc
    save_scm(params, str(path), training=vars(tcfg))
    return plan


def cmd_synth(ctx: Context) -> dict:
    from degforge.diffusion import GuidanceConfig
    from degforge.scm import load_scm
    from degforge.synthesis import SynthesisConfig, plan as make_plan, synthesize

    sy = ctx.cfg.synth
    out_dir = ctx.path("synth")
    records = _existing_records(ctx, "train")
    # One plan per distinct clean image; its source is the degradation it came paired with.
    corpus = [(r.clean_path, r.degradation) for r in records]
    if sy.max_images is not None:
        corpus = corpus[: sy.max_images]
    plans = make_plan(corpus)
    plan = {"command": "synth", "out": str(out_dir), "images": len(plans), "generations": sum(len(p.targets) for p in plans), "seed": ctx.cfg.seed, "guidance": [sy.s_img, sy.s_text, sy.sampling_steps]}
    if ctx.dry_run:
        return plan
    path = _require_generator(ctx)
    hists: dict[DegradationKind, list[StatsHistogram]] = {}
    for kind in DegradationKind:
        hp = ctx.path("stats", f"{kind.value}.json")
        if hp.exists():
            hists[kind] = [StatsHistogram.load(hp)]
    needed = {k for p in plans for k in p.targets}
    missing = sorted(k.value for k in needed - set(hists))
    if missing:
        raise PreconditionError(f"no histograms for {missing}; run `degforge stats` over a corpus covering them")
    if (out_dir / "manifest.jsonl").exists() and not ctx.cfg.overwrite:
        raise PreconditionError(f"{out_dir / 'manifest.jsonl'} exists; rerun with --overwrite to regenerate")
    model = ckpt.load_generator(path)
    scfg = SynthesisConfig(
        guidance=GuidanceConfig(s_img=sy.s_img, s_text=sy.s_text, steps=sy.sampling_steps),
        random_sigma_rate=sy.random_sigma_rate,
        thresholds=dict(sy.thresholds),
        workers=ctx.cfg.workers,
    )
    synthesize(plans, hists, model, ctx.cfg.seed, out_dir, scfg, scm=load_scm(str(path)), checkpoint_id=ckpt.checkpoint_id(path), overwrite=ctx.cfg.overwrite)
    return plan


def cmd_mix(ctx: Context) -> dict:
    from degforge.restoration import training_regimes

    plan = {"command": "mix", "out": str(ctx.path("mix")), "regimes": ["existing", "generated", "combined"]}
    if ctx.dry_run:
        return plan
    existing = _existing_records(ctx, "train")
    gen_path = ctx.path("synth", "manifest.jsonl")
    if not gen_path.exists():
        raise PreconditionError(f"generated manifest {gen_path} missing; run `degforge synth` first")
    ctx.guard(ctx.path("mix"))
    regimes = training_regimes(existing, read_manifest(gen_path))
    counts = {}
    for name, rows in regimes.items():
        write_manifest(ctx.path("mix", f"{name}.jsonl"), rows)
        counts[name] = len(rows)
    ctx.path("mix", "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
    plan["counts"] = counts
    return plan


def cmd_train_restore(ctx: Context) -> dict:
    from degforge.restoration import Restorer, RestorerConfig, TrainConfig, save_restorer, train_restorer
    from degforge.restoration.training import write_curve

    rc = ctx.cfg.restore
    manifest = ctx.path("mix", f"{rc.regime}.jsonl")
    plan = {"command": "train-restore", "manifest": str(manifest), "epochs": rc.epochs, "out": str(ctx.path("restorer"))}
    if ctx.dry_run:
        return plan
    if not manifest.exists():
        raise PreconditionError(f"training manifest {manifest} missing; run `degforge mix` first")
    ctx.guard(ctx.path("restorer"))
    size = ctx.cfg.toyworld.size
    model_cfg = RestorerConfig(decoder_kernel=rc.decoder_kernel)
    if size % model_cfg.required_multiple:
        raise PreconditionError(f"image size {size} is not a multiple of {model_cfg.required_multiple}")
    torch.manual_seed(ctx.cfg.seed)
    model = Restorer(model_cfg)
    tcfg = TrainConfig(epochs=rc.epochs, lr=rc.lr, warmup_epochs=rc.warmup_epochs, batch_size=rc.batch_size, workers=ctx.cfg.workers)
    curve = train_restorer(model, read_manifest(manifest), tcfg, seed=ctx.cfg.seed)
    save_restorer(model, ctx.path("restorer"), training={**tcfg.to_dict(), "regime": rc.regime}, seed=ctx.cfg.seed, overwrite=True)
    write_curve(ctx.path("restorer", "loss_curve.csv"), curve)
    return plan


def cmd_eval(ctx: Context) -> dict:
    from degforge.evalkit import FeatureSet, build_report, degradation_features, feature_wasserstein
    from degforge.restoration import load_restorer, restore

    plan = {"command": "eval", "out": str(ctx.path("eval"))}
    if ctx.dry_run:
        return plan
    rpath = ctx.path("restorer")
    if not (rpath / ckpt.MANIFEST).exists():
        raise PreconditionError(f"restorer checkpoint required (none at {rpath}); run `degforge train-restore` first")
    ctx.guard(ctx.path("eval"))
    model = load_restorer(rpath)
    train = _existing_records(ctx, "train")
    datasets, splits, wad = {}, {}, {}
    for split, name in (("within", "heldout_within"), ("ood", "heldout_ood")):
        recs = _existing_records(ctx, name)
        for kind in ctx.kinds:
            rows = [r for r in recs if r.degradation == kind.value]
            if not rows:
                continue
            key = f"{split}/{kind.value}"
            pairs = [(restore(model, toyworld.load_png(r.gen_path)), toyworld.load_png(r.gt_path)) for r in rows]
            datasets[key], splits[key] = pairs, split
            ref = [r for r in train if r.degradation == kind.value]
            f_ref = degradation_features([toyworld.load_png(r.gen_path) for r in ref], [toyworld.load_png(r.clean_path) for r in ref])
            f_set = degradation_features([toyworld.load_png(r.gen_path) for r in rows], [toyworld.load_png(r.clean_path) for r in rows])
            wad[key] = feature_wasserstein(FeatureSet(f_set, key), FeatureSet(f_ref, "train"), ctx.cfg.eval.wasserstein_projections, rng=ctx.cfg.seed)
    report = build_report(datasets, splits)
    report.write(ctx.path("eval"))
    ctx.path("eval", "radar.json").write_text(json.dumps(report.radar(), indent=2, sort_keys=True) + "\n")
    ctx.path("eval", "wasserstein.json").write_text(json.dumps(dict(sorted(wad.items())), indent=2) + "\n")
    return plan


PIPELINE = ("toyworld", "stats", "train-gen", "train-scm", "synth", "mix", "train-restore", "eval")

COMMANDS: dict[str, Callable[[Context], dict]] = {
    "toyworld": cmd_toyworld,
    "stats": cmd_stats,
    "train-gen": cmd_train_gen,
    "train-scm": cmd_train_scm,
    "synth": cmd_synth,
    "mix": cmd_mix,
    "train-restore": cmd_train_restore,
    "eval": cmd_eval,
}


def cmd_pipeline(ctx: Context) -> dict:
    timings = {}
    for name in PIPELINE:
        t0 = time.perf_counter()
        COMMANDS[name](ctx)
        timings[name] = round(time.perf_counter() - t0, 2)
        log.info("%s finished in %.1fs", name, timings[name])
    return {"command": "pipeline", "timings": timings}


COMMANDS["pipeline"] = cmd_pipeline


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", type=str, help="run directory")
    common.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    common.add_argument("--overwrite", action="store_true", default=None, help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="degforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _fail(code: int, kind: str, message: str, details=None) -> int:
    doc = {"error": kind, "message": message}
    if details:
        doc["details"] = details
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers, "out": args.out, "overwrite": args.overwrite})
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), [{"key": k, "message": m} for k, m in exc.errors])
    except (OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    torch.set_num_threads(cfg.workers)
    ctx = Context(cfg, args.dry_run)
    try:
        result = COMMANDS[args.command](ctx)
    except PreconditionError as exc:
        return _fail(EXIT_PRECONDITION, "precondition", str(exc))
    except (ckpt.CheckpointError, FileExistsError, PermissionError) as exc:
        return _fail(EXIT_PRECONDITION, "precondition", str(exc))
    except Exception as exc:  # noqa: BLE001
        log.exception("command %s failed", args.command)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    if args.dry_run:
        _report_plan(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
