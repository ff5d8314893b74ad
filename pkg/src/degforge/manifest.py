"""JSON Lines dataset manifests.

Paths are stored relative to the manifest's directory so a manifest is
byte-identical wherever the run lives; :func:`read_manifest` resolves them
back to absolute paths.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

MANIFEST_SCHEMA_VERSION = 1
PATH_FIELDS = ("clean_path", "gen_path", "gt_path")


@dataclass
class ManifestRecord:
    index: int
    clean_path: str
    gen_path: str
    gt_path: str
    degradation: str
    mu_gen: float | None = None
    sigma_gen: float | None = None
    mu_realized: float | None = None
    sigma_realized: float | None = None
    kept: bool = True
    seed: int | None = None
    generator_checkpoint_id: str | None = None
    gt_mode: str = "clean"
    source: str = "generated"

    @property
    def key(self) -> tuple[int, str]:
        return self.index, self.degradation

    def to_line(self, base: Path | None = None) -> str:
        doc = {"schema_version": MANIFEST_SCHEMA_VERSION}
        for k, v in asdict(self).items():
            if k in PATH_FIELDS and base is not None:
                v = _relative(v, base)
            doc[k] = v
        return json.dumps(doc, ensure_ascii=False)

    @classmethod
    def from_doc(cls, doc: dict, base: Path | None = None) -> "ManifestRecord":
        doc = dict(doc)
        version = doc.pop("schema_version", None)
        if version != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema_version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown manifest fields {sorted(unknown)}")
        missing = {"index", "clean_path", "gen_path", "gt_path", "degradation"} - set(doc)
        if missing:
            raise ValueError(f"manifest row missing fields {sorted(missing)}")
        if base is not None:
            for k in PATH_FIELDS:
                doc[k] = str((base / doc[k]).resolve()) if not os.path.isabs(doc[k]) else doc[k]
        return cls(**doc)


def _relative(path: str, base: Path) -> str:
    p = Path(path)
    if not p.is_absolute():
        return p.as_posix()
    return Path(os.path.relpath(p.resolve(), base.resolve())).as_posix()


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    text = "".join(r.to_line(base) + "\n" for r in records)
    path.write_text(text, encoding="utf-8")
    return path


def append_record(path: str | Path, record: ManifestRecord) -> None:
    path = Path(path)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(record.to_line(path.parent) + "\n")
        fh.flush()


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    base = path.parent
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.from_doc(json.loads(line), base))
            except (ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records
