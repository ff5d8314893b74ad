"""Checkpoint container: one directory, a JSON manifest and flat float32 blobs.

Layout::

    <dir>/manifest.json      schema_version, configs, blob index
    <dir>/<section>.bin      little-endian float32, tensors back to back

The blob index maps each tensor name to ``{offset, shape}`` (offset in
elements).  Sections are independent; optional ones (e.g. ``scm``) may be
added to an existing container.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


def _write_blob(path: Path, tensors: Mapping[str, torch.Tensor]) -> dict[str, Any]:
    index: dict[str, Any] = {}
    offset = 0
    chunks = []
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.ravel())
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    path.write_bytes(flat.astype("<f4").tobytes())
    return {"file": path.name, "count": int(offset), "tensors": index}


def _read_blob(path: Path, entry: Mapping[str, Any]) -> dict[str, torch.Tensor]:
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    if flat.size != entry["count"]:
        raise CheckpointError(f"blob {path.name} has {flat.size} values, index says {entry['count']}")
    out = {}
    for name, spec in entry["tensors"].items():
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        chunk = flat[spec["offset"] : spec["offset"] + n].reshape(spec["shape"])
        out[name] = torch.from_numpy(chunk.astype(np.float32))
    return out


def save_container(
    path: str | Path,
    meta: Mapping[str, Any],
    sections: Mapping[str, Mapping[str, torch.Tensor]],
    overwrite: bool = False,
) -> Path:
    path = Path(path)
    if (path / MANIFEST).exists():
        if not overwrite:
            raise FileExistsError(f"checkpoint {path} exists; pass overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {name: _write_blob(path / f"{name}.bin", tensors) for name, tensors in sections.items()}
    manifest = {"schema_version": SCHEMA_VERSION, **meta, "blobs": blobs}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema_version {manifest.get('schema_version')!r}")
    return manifest


def load_section(path: str | Path, section: str) -> dict[str, torch.Tensor]:
    manifest = read_manifest(path)
    if section not in manifest["blobs"]:
        raise CheckpointError(f"checkpoint {path} has no section {section!r}")
    entry = manifest["blobs"][section]
    return _read_blob(Path(path) / entry["file"], entry)


def add_section(path: str | Path, section: str, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, Any] | None = None) -> None:
    """Add or replace one section of an existing container."""
    path = Path(path)
    manifest = read_manifest(path)
    manifest["blobs"][section] = _write_blob(path / f"{section}.bin", tensors)
    if meta:
        manifest.update(meta)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def checkpoint_id(path: str | Path) -> str:
    """Short content hash of the manifest and blobs."""
    path = Path(path)
    h = hashlib.sha256()
    manifest = read_manifest(path)
    h.update(json.dumps(manifest, sort_keys=True).encode())
    for entry in sorted(manifest["blobs"].values(), key=lambda e: e["file"]):
        h.update((path / entry["file"]).read_bytes())
    return h.hexdigest()[:16]


def save_generator(model, path: str | Path, training: Mapping[str, Any] | None = None, seed: int = 0, overwrite: bool = False) -> Path:
    meta = {
        "kind": "generator",
        "schedule": model.schedule.to_dict(),
        "codec": model.codec.config.to_dict(),
        "denoiser_config": model.denoiser.config.to_dict(),
        "fusion_config": {"n_bins": model.fusion.n_bins, "n_tokens": model.fusion.n_tokens, "text_dim": model.fusion.text_dim},
        "ranges": model.ranges,
        "caption": model.caption,
        "training": dict(training or {}),
        "rng_seed": int(seed),
    }
    sections = {"fusion": model.fusion.state_dict(), "denoiser": model.denoiser.state_dict()}
    if not model.codec.is_identity:
        sections["codec"] = model.codec.state_dict()
    return save_container(path, meta, sections, overwrite=overwrite)


def load_generator(path: str | Path):
    from degforge.conditioning import PromptFusion
    from degforge.diffusion.denoiser import Denoiser, DenoiserConfig
    from degforge.diffusion.generator import GenDeg
    from degforge.diffusion.schedule import make_schedule
    from degforge.latentcodec import CodecConfig, LatentCodec

    manifest = read_manifest(path)
    if manifest.get("kind") != "generator":
        raise CheckpointError(f"{path} is not a generator checkpoint")
    codec = LatentCodec(CodecConfig(**manifest["codec"]))
    if not codec.is_identity:
        codec.load_state_dict(load_section(path, "codec"))
    codec.eval()
    dcfg = dict(manifest["denoiser_config"])
    dcfg["channels"] = tuple(dcfg["channels"])
    fusion = PromptFusion(init_noise=0.0, **manifest["fusion_config"])
    fusion.load_state_dict(load_section(path, "fusion"))
    denoiser = Denoiser(DenoiserConfig(**dcfg))
    denoiser.load_state_dict(load_section(path, "denoiser"))
    sched = make_schedule(manifest["schedule"]["T"], manifest["schedule"]["kind"])
    model = GenDeg(sched, codec, fusion, denoiser, ranges=manifest["ranges"], caption=manifest["caption"])
    return model.freeze()


def has_section(path: str | Path, section: str) -> bool:
    return section in read_manifest(path)["blobs"]
