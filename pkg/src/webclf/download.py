"""Parallel image fetching into a content-addressed store.

Stored files are named by the sha256 of their post-resize bytes, so repeated
downloads are idempotent and a link manifest plus an unchanged source is
enough to rebuild the exact same store.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from urllib.parse import urlsplit

import requests
from PIL import Image

from .crawl import LinkRecord
from .errors import FetchError, StorageError

log = logging.getLogger(__name__)

PER_HOST_CONNECTIONS = 4


@dataclass(frozen=True)
class ResizePolicy:
    """Either a fixed target (re-encoded as PNG) or a max-side cap.

    Under the cap, images that need no resize pass through byte-for-byte;
    resized ones are re-encoded as PNG so hashes stay stable.
    """

    kind: str  # "fixed" | "max-side"
    width: int = 0
    height: int = 0
    cap: int = 0

    @classmethod
    def fixed(cls, width: int, height: int) -> "ResizePolicy":
        return cls(kind="fixed", width=width, height=height)

    @classmethod
    def max_side(cls, cap: int) -> "ResizePolicy":
        return cls(kind="max-side", cap=cap)

    @classmethod
    def parse(cls, spec: str) -> "ResizePolicy":
        kind, _, arg = spec.partition(":")
        if kind == "fixed":
            w, _, h = arg.partition("x")
            return cls.fixed(int(w), int(h))
        if kind == "max-side":
            return cls.max_side(int(arg))
        raise ValueError(f"unknown resize policy {spec!r} (want fixed:WxH or max-side:N)")


@dataclass(frozen=True)
class ImageRecord:
    sha256: str
    source_url: str
    category_name: str
    timestep: int
    width: int
    height: int
    stored_path: str

    def to_json(self) -> dict:
        return {
            "sha256": self.sha256,
            "source_url": self.source_url,
            "category": self.category_name,
            "timestep": self.timestep,
            "width": self.width,
            "height": self.height,
            "stored_path": self.stored_path,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ImageRecord":
        return cls(
            sha256=doc["sha256"],
            source_url=doc["source_url"],
            category_name=doc["category"],
            timestep=int(doc["timestep"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            stored_path=doc["stored_path"],
        )


@dataclass
class DatasetShard:
    timestep: int
    records: list[ImageRecord] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (url, reason)


def fetch(link: LinkRecord, timeout: float = 10.0, session: requests.Session | None = None) -> bytes:
    """Download one URL; failures raise FetchError with a short reason tag."""
    get = (session or requests).get
    try:
        response = get(link.url, timeout=timeout)
    except requests.Timeout as exc:
        raise FetchError(link.url, "timeout") from exc
    except requests.RequestException as exc:
        raise FetchError(link.url, "connection") from exc
    if response.status_code != 200:
        raise FetchError(link.url, f"http-{response.status_code}")
    return response.content


@dataclass(frozen=True)
class ProcessedImage:
    data: bytes
    sha256: str
    width: int
    height: int
    format: str  # file extension without the dot


def postprocess(data: bytes, policy: ResizePolicy) -> ProcessedImage:
    """Decode, resize per policy, re-encode, and hash the stored bytes."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            source_format = (img.format or "png").lower()
            if policy.kind == "fixed":
                out = img.convert("RGB").resize((policy.width, policy.height), Image.Resampling.LANCZOS)
                data, fmt = _encode_png(out), "png"
                width, height = policy.width, policy.height
            else:
                width, height = img.size
                if max(width, height) > policy.cap:
                    scale = policy.cap / max(width, height)
                    width = max(1, round(width * scale))
                    height = max(1, round(height * scale))
                    out = img.convert("RGB").resize((width, height), Image.Resampling.LANCZOS)
                    data, fmt = _encode_png(out), "png"
                else:
                    fmt = source_format  # untouched bytes pass through
    except FetchError:
        raise
    except Exception as exc:
        raise FetchError("<bytes>", "undecodable") from exc
    digest = hashlib.sha256(data).hexdigest()
    return ProcessedImage(data=data, sha256=digest, width=width, height=height, format=fmt)


def _encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class ImageStore:
    """Content-addressed image files plus per-timestep JSONL indexes."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "images").mkdir(parents=True, exist_ok=True)
        (self.root / "index").mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def image_path(self, sha256: str, fmt: str) -> Path:
        return self.root / "images" / sha256[:2] / f"{sha256}.{fmt}"

    def put(self, processed: ProcessedImage) -> Path:
        path = self.image_path(processed.sha256, processed.format)
        if path.exists():
            return path
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}.{threading.get_ident()}")
            tmp.write_bytes(processed.data)
            tmp.replace(path)
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path

    def index_path(self, timestep: int) -> Path:
        return self.root / "index" / f"t{timestep}.jsonl"

    def write_index(self, shard: DatasetShard) -> Path:
        path = self.index_path(shard.timestep)
        with open(path, "w", encoding="utf-8") as fh:
            for record in shard.records:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
        return path

    def read_index(self, timestep: int) -> list[ImageRecord]:
        records = []
        with open(self.index_path(timestep), encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(ImageRecord.from_json(json.loads(line)))
        return records


class _HostGate:
    """Caps simultaneous connections per host; politeness, not correctness."""

    def __init__(self, per_host: int = PER_HOST_CONNECTIONS):
        self.per_host = per_host
        self._gates: dict[str, threading.Semaphore] = {}
        self._lock = threading.Lock()

    def gate(self, url: str) -> threading.Semaphore:
        host = urlsplit(url).netloc
        with self._lock:
            if host not in self._gates:
                self._gates[host] = threading.Semaphore(self.per_host)
            return self._gates[host]


def download_all(
    records: Sequence[LinkRecord],
    store: ImageStore,
    policy: ResizePolicy,
    parallelism: int = 8,
    timeout: float = 10.0,
) -> list[DatasetShard]:
    """Fetch every link into the store, one shard per timestep.

    Within a shard, links resolving to identical stored bytes collapse onto
    the first occurrence (in link order); the rest join the failure list as
    ``duplicate``. The resulting record set does not depend on parallelism.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    host_gate = _HostGate()
    sessions = threading.local()

    def grab(link: LinkRecord) -> tuple[LinkRecord, ProcessedImage | None, str | None]:
        if not hasattr(sessions, "s"):
            sessions.s = requests.Session()
        with host_gate.gate(link.url):
            try:
                raw = fetch(link, timeout=timeout, session=sessions.s)
                return link, postprocess(raw, policy), None
            except FetchError as exc:
                return link, None, exc.reason

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        outcomes = list(pool.map(grab, records))

    by_timestep: dict[int, DatasetShard] = {}
    seen_hashes: dict[int, set[str]] = {}
    for link, processed, reason in outcomes:  # manifest order: dedup is deterministic
        shard = by_timestep.setdefault(link.timestep, DatasetShard(timestep=link.timestep))
        if processed is None:
            shard.failures.append((link.url, reason))
            continue
        hashes = seen_hashes.setdefault(link.timestep, set())
        if processed.sha256 in hashes:
            shard.failures.append((link.url, "duplicate"))
            continue
        hashes.add(processed.sha256)
        path = store.put(processed)
        shard.records.append(
            ImageRecord(
                sha256=processed.sha256,
                source_url=link.url,
                category_name=link.category_name,
                timestep=link.timestep,
                width=processed.width,
                height=processed.height,
                stored_path=str(path.relative_to(store.root)),
            )
        )

    shards = [by_timestep[t] for t in sorted(by_timestep)]
    for shard in shards:
        store.write_index(shard)
        if shard.failures:
            log.info(
                "timestep %d: %d stored, %d failed/collapsed",
                shard.timestep,
                len(shard.records),
                len(shard.failures),
            )
    return shards


def export_link_manifest(
    links: Sequence[LinkRecord], shards: Sequence[DatasetShard], path: str | Path
) -> None:
    """Write the shippable manifest: crawl records plus the sha256 of each
    successfully stored image (the store itself never needs to travel)."""
    hash_by_url: dict[tuple[int, str], str] = {}
    for shard in shards:
        for record in shard.records:
            hash_by_url[(shard.timestep, record.source_url)] = record.sha256
    with open(path, "w", encoding="utf-8") as fh:
        for link in links:
            doc = link.to_json()
            sha = hash_by_url.get((link.timestep, link.url))
            if sha is not None:
                doc["sha256"] = sha
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
