"""Binary feature archive I/O.

Wire format (little-endian throughout)::

    magic "C2CF" | version u32 = 1 | dim u32 | count u64 | labels_present u8
    per record: id_len u16 + id utf-8 | (label_len u16 + label utf-8) | dim * f32

This mirrors the consumer side's reader byte for byte; conformance tests on
the consumer package are the authority on the layout.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"C2CF"
VERSION = 1

_HEADER = struct.Struct("<4sIIQB")
_U16 = struct.Struct("<H")


class ArchiveFormatError(Exception):
    pass


def write_records(
    path: str | Path,
    dim: int,
    ids: list[str],
    vectors: np.ndarray,
    labels: list[str] | None = None,
) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4").reshape(len(ids), dim)
    if labels is not None and len(labels) != len(ids):
        raise ArchiveFormatError("labels and ids differ in length")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(ids), labels is not None))
        for i, id_ in enumerate(ids):
            id_bytes = id_.encode("utf-8")
            fh.write(_U16.pack(len(id_bytes)))
            fh.write(id_bytes)
            if labels is not None:
                label_bytes = labels[i].encode("utf-8")
                fh.write(_U16.pack(len(label_bytes)))
                fh.write(label_bytes)
            fh.write(vectors[i].tobytes())


def read_records(path: str | Path) -> tuple[int, list[str], np.ndarray, list[str] | None]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ArchiveFormatError(f"{path}: truncated header")
    magic, version, dim, count, labels_flag = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveFormatError(f"{path}: unsupported version {version}")
    offset = _HEADER.size
    ids: list[str] = []
    labels: list[str] | None = [] if labels_flag else None
    vectors = np.empty((count, dim), dtype=np.float32)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ArchiveFormatError(f"{path}: truncated at byte {offset}")
        piece = data[offset : offset + n]
        offset += n
        return piece

    for i in range(count):
        (id_len,) = _U16.unpack(take(2))
        ids.append(take(id_len).decode("utf-8"))
        if labels is not None:
            (label_len,) = _U16.unpack(take(2))
            labels.append(take(label_len).decode("utf-8"))
        vectors[i] = np.frombuffer(take(4 * dim), dtype="<f4")
    return dim, ids, vectors, labels
