"""Embedding boundary: pluggable image->vector backends and the on-disk
feature archive.

The archive is the contract between this package and any external feature
extractor: little-endian, 32-bit floats, byte-exact layout::

    magic "C2CF" | version u32 | dim u32 | count u64 | labels_present u8
    per record: id_len u16 + id utf-8 | (label_len u16 + label utf-8) | dim * f32
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
from PIL import Image

from .errors import ArchiveError, EmbeddingError

MAGIC = b"C2CF"
VERSION = 1

_HEADER = struct.Struct("<4sIIQB")
_U16 = struct.Struct("<H")


@dataclass(frozen=True)
class FeatureVector:
    id: str
    values: np.ndarray  # float32, shape (dim,)
    label: str | None = None


class FeatureArchive:
    """In-memory view of one archive: ids, optional labels, a (n, dim) f32 matrix."""

    def __init__(self, dim: int, ids: list[str], vectors: np.ndarray, labels: list[str] | None = None):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32).reshape(len(ids), dim)
        if labels is not None and len(labels) != len(ids):
            raise ArchiveError("labels and ids differ in length")
        self.dim = dim
        self.ids = list(ids)
        self.vectors = vectors
        self.labels = list(labels) if labels is not None else None

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterable[FeatureVector]:
        for i, id_ in enumerate(self.ids):
            label = self.labels[i] if self.labels is not None else None
            yield FeatureVector(id=id_, values=self.vectors[i], label=label)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureArchive):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.labels == other.labels
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def write_archive(archive: FeatureArchive, path: str | Path) -> None:
    buf = io.BytesIO()
    labels_present = archive.labels is not None
    buf.write(_HEADER.pack(MAGIC, VERSION, archive.dim, len(archive), labels_present))
    for i, id_ in enumerate(archive.ids):
        id_bytes = id_.encode("utf-8")
        buf.write(_U16.pack(len(id_bytes)))
        buf.write(id_bytes)
        if labels_present:
            label_bytes = archive.labels[i].encode("utf-8")
            buf.write(_U16.pack(len(label_bytes)))
            buf.write(label_bytes)
        row = archive.vectors[i]
        if not np.all(np.isfinite(row)):
            raise ArchiveError(f"non-finite values in vector {id_!r}")
        buf.write(row.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_archive(path: str | Path) -> FeatureArchive:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, dim, count, labels_flag = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")

    offset = _HEADER.size
    row_bytes = 4 * dim
    ids: list[str] = []
    labels: list[str] | None = [] if labels_flag else None
    vectors = np.empty((count, dim), dtype=np.float32)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ArchiveError(f"{path}: truncated at byte {offset}")
        piece = data[offset : offset + n]
        offset += n
        return piece

    for i in range(count):
        (id_len,) = _U16.unpack(take(2))
        ids.append(take(id_len).decode("utf-8"))
        if labels is not None:
            (label_len,) = _U16.unpack(take(2))
            labels.append(take(label_len).decode("utf-8"))
        vectors[i] = np.frombuffer(take(row_bytes), dtype="<f4")
    if offset != len(data):
        raise ArchiveError(f"{path}: {len(data) - offset} trailing bytes")
    return FeatureArchive(dim=dim, ids=ids, vectors=vectors, labels=labels)


def l2_normalize(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Scale rows (or a single vector) to unit length; zero vectors are an error."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        norm = np.linalg.norm(x)
        if norm <= eps:
            raise ValueError("cannot normalize a zero vector")
        return x / norm
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= eps):
        raise ValueError("cannot normalize zero rows")
    return x / norms


class EmbeddingBackend(Protocol):
    """Deterministic image-bytes -> fixed-dim vector mapping."""

    id: str
    dim: int

    def embed_bytes(self, data: bytes) -> np.ndarray: ...


class MockProjectionBackend:
    """Seeded orthonormal projection of coarse pixel statistics.

    Downscales to an 8x8 luminance grid, centers it, and projects with a
    fixed orthonormal matrix, so identical bytes always map to identical
    vectors and geometric structure in pixel space survives into feature
    space. Test substrate only.
    """

    GRID = 8

    def __init__(self, seed: int = 0, dim: int = 64):
        cells = self.GRID * self.GRID
        if not 1 <= dim <= cells:
            raise ValueError(f"dim must be in 1..{cells}")
        self.id = f"mock:{seed}:{dim}"
        self.dim = dim
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((cells, cells)))
        self._projection = np.ascontiguousarray(q[:dim])

    def embed_bytes(self, data: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(data)) as img:
                grid = img.convert("L").resize((self.GRID, self.GRID), Image.Resampling.BOX)
                stats = np.asarray(grid, dtype=np.float64).reshape(-1) / 255.0
        except Exception as exc:
            raise EmbeddingError(f"undecodable image bytes: {exc}") from exc
        return (self._projection @ (stats - 0.5)).astype(np.float32)


class ArchiveLookupBackend:
    """Serves precomputed vectors from one or more archives, keyed by id."""

    def __init__(self, archives: Iterable[FeatureArchive], id: str = "archive"):
        self.id = id
        self._table: dict[str, np.ndarray] = {}
        self.dim = 0
        for archive in archives:
            if self.dim and archive.dim != self.dim:
                raise ArchiveError(
                    f"archive dim {archive.dim} disagrees with {self.dim}"
                )
            self.dim = archive.dim
            for i, id_ in enumerate(archive.ids):
                self._table[id_] = archive.vectors[i]
        if not self.dim:
            raise ArchiveError("no archives given to lookup backend")

    def lookup(self, id_: str) -> np.ndarray:
        try:
            return self._table[id_]
        except KeyError:
            raise EmbeddingError(f"no precomputed feature for id {id_!r}") from None

    def embed_bytes(self, data: bytes) -> np.ndarray:
        raise EmbeddingError("lookup backend embeds by id, not by bytes")


def embed_image(path: str | Path, sha256: str, backend: EmbeddingBackend, label: str | None = None) -> FeatureVector:
    """Embed one stored image; the vector id is the image's content hash."""
    if isinstance(backend, ArchiveLookupBackend):
        values = backend.lookup(sha256)
    else:
        values = backend.embed_bytes(Path(path).read_bytes())
    values = np.asarray(values, dtype=np.float32)
    if values.shape != (backend.dim,):
        raise EmbeddingError(f"backend returned shape {values.shape}, want ({backend.dim},)")
    if not np.all(np.isfinite(values)):
        raise EmbeddingError(f"backend returned non-finite values for {sha256}")
    return FeatureVector(id=sha256, values=values, label=label)


def parse_backend(spec: str, archive_paths: Iterable[str | Path] = ()) -> EmbeddingBackend:
    """Instantiate a backend from its id string.

    ``mock[:seed[:dim]]`` builds the seeded projection backend; ``archive``
    builds a lookup over the supplied archive paths.
    """
    parts = spec.split(":")
    if parts[0] == "mock":
        seed = int(parts[1]) if len(parts) > 1 else 0
        dim = int(parts[2]) if len(parts) > 2 else 64
        return MockProjectionBackend(seed=seed, dim=dim)
    if parts[0] == "archive":
        archives = [read_archive(p) for p in archive_paths]
        return ArchiveLookupBackend(archives)
    raise ValueError(f"unknown backend spec {spec!r}")
