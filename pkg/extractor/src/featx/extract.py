"""Batch feature extraction over an image-store index.

The index is the JSONL emitted by the downloader (one object per stored
image with ``sha256``, ``stored_path`` and ``category``); the output is a
labeled feature archive whose record ids are the image content hashes, plus
a sidecar JSON describing the backbone and its preprocessing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .archive import read_records, write_records
from .backbones import load_backbone


class ExtractionError(Exception):
    pass


@dataclass(frozen=True)
class IndexEntry:
    sha256: str
    stored_path: str
    category: str


def read_index(path: str | Path) -> list[IndexEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            entries.append(
                IndexEntry(sha256=doc["sha256"], stored_path=doc["stored_path"], category=doc["category"])
            )
    return entries


@dataclass
class ExtractorJob:
    index_path: str
    backbone_id: str
    out_path: str
    batch_size: int = 64
    device: str = "cpu"
    store_root: str | None = None  # default: two levels above the index file

    def resolved_store_root(self) -> Path:
        if self.store_root is not None:
            return Path(self.store_root)
        return Path(self.index_path).resolve().parent.parent


def sidecar_path(out_path: str | Path) -> Path:
    return Path(str(out_path) + ".json")


def extract(job: ExtractorJob) -> Path:
    """Embed every indexed image through the frozen backbone; returns the
    archive path. Deterministic: evaluation mode, no augmentation, and each
    image's vector is independent of batch composition."""
    entries = read_index(job.index_path)
    model, spec = load_backbone(job.backbone_id)
    device = torch.device(job.device)
    model.to(device)
    root = job.resolved_store_root()

    ids: list[str] = []
    labels: list[str] = []
    rows: list[np.ndarray] = []
    batch_tensors: list[torch.Tensor] = []

    def flush() -> None:
        if not batch_tensors:
            return
        with torch.inference_mode():
            out = model(torch.stack(batch_tensors).to(device))
        if out.shape[1] != spec.dim:
            raise ExtractionError(f"backbone emitted dim {out.shape[1]}, declared {spec.dim}")
        rows.append(out.cpu().numpy().astype(np.float32))
        batch_tensors.clear()

    for entry in entries:
        image_path = root / entry.stored_path
        if not image_path.exists():
            raise ExtractionError(f"indexed image missing: {image_path}")
        try:
            with Image.open(image_path) as img:
                tensor = spec.preprocess(img)
        except OSError as exc:
            raise ExtractionError(f"cannot decode {image_path}: {exc}") from exc
        batch_tensors.append(tensor)
        ids.append(entry.sha256)
        labels.append(entry.category)
        if len(batch_tensors) >= job.batch_size:
            flush()
    flush()

    matrix = np.vstack(rows) if rows else np.empty((0, spec.dim), dtype=np.float32)
    write_records(job.out_path, spec.dim, ids, matrix, labels)
    sidecar = {
        "backbone": spec.id,
        "dim": spec.dim,
        "preprocess": spec.preprocess.to_dict(),
        "count": len(ids),
    }
    sidecar_path(job.out_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(job.out_path)


@dataclass
class VerifyReport:
    violations: list[str] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


def verify_archive(archive_path: str | Path, index_path: str | Path) -> VerifyReport:
    """Check id coverage against the index, dim uniformity, and finiteness."""
    report = VerifyReport()
    entries = read_index(index_path)
    try:
        dim, ids, vectors, labels = read_records(archive_path)
    except Exception as exc:
        report.add(f"unreadable archive: {exc}")
        return report

    if dim < 1:
        report.add(f"dim {dim} not positive")
    if vectors.shape != (len(ids), dim):
        report.add(f"vector block {vectors.shape} inconsistent with {len(ids)} ids x dim {dim}")

    archive_ids = set(ids)
    for entry in entries:
        if entry.sha256 not in archive_ids:
            report.add(f"missing id {entry.sha256}")
    index_ids = {entry.sha256 for entry in entries}
    for id_ in ids:
        if id_ not in index_ids:
            report.add(f"extra id {id_} not in index")

    for i, id_ in enumerate(ids):
        if not np.all(np.isfinite(vectors[i])):
            report.add(f"non-finite values in record {id_}")

    if labels is not None:
        category = {entry.sha256: entry.category for entry in entries}
        for i, id_ in enumerate(ids):
            want = category.get(id_)
            if want is not None and labels[i] != want:
                report.add(f"label mismatch for {id_}: archive {labels[i]!r}, index {want!r}")
    return report
