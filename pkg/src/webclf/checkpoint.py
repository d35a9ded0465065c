"""Deterministic binary checkpoints for learner state.

Layout: magic "WCKP" | version u32 LE | header_len u32 LE | header JSON
(sorted keys) | concatenated raw array bytes in header order. Identical
state always serializes to identical bytes, which keeps rerun artifacts
hash-stable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArchiveError
from .learner import LearnerState, LinearHead, MLPHead, TrainConfig

MAGIC = b"WCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def _collect_arrays(state: LearnerState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    head = state.head
    if head is not None:
        for name, value in head.params().items():
            arrays[f"head.{name}"] = value
        for i, moment in enumerate(head.optimizer.m):
            arrays[f"adam.m{i}"] = moment
        for i, moment in enumerate(head.optimizer.v):
            arrays[f"adam.v{i}"] = moment
    if state.ncm is not None:
        arrays["ncm.sums"] = state.ncm.sums
        arrays["ncm.counts"] = state.ncm.counts
    return arrays


def save_checkpoint(state: LearnerState, path: str | Path) -> None:
    arrays = _collect_arrays(state)
    meta = {
        "method": state.method,
        "dim": state.dim,
        "seed": state.seed,
        "classes": state.registry.names,
        "timesteps_seen": state.timesteps_seen,
        "step_count": state.head.step_count if state.head is not None else 0,
        "adam_t": state.head.optimizer.t if state.head is not None else 0,
        "lr": state.head.optimizer.lr if state.head is not None else None,
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays.items()
        ],
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for spec in meta["arrays"]:
            fh.write(np.ascontiguousarray(arrays[spec["name"]]).tobytes())


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> LearnerState:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ArchiveError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported checkpoint version {version}")
    offset = _PREFIX.size
    meta = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    arrays: dict[str, np.ndarray] = {}
    for spec in meta["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(data):
            raise ArchiveError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = (
            np.frombuffer(data[offset : offset + nbytes], dtype=dtype).reshape(spec["shape"]).copy()
        )
        offset += nbytes

    state = LearnerState(dim=meta["dim"], method=meta["method"], config=config, seed=meta["seed"])
    state.registry.add(meta["classes"])
    state.timesteps_seen = meta["timesteps_seen"]

    head = state.head
    if head is not None:
        head.expand(len(meta["classes"]))
        if isinstance(head, LinearHead):
            head.weights[:] = arrays["head.weights"]
            head.bias[:] = arrays["head.bias"]
        elif isinstance(head, MLPHead):
            for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
                getattr(head, name)[:] = arrays[f"head.{name}"]
        head.step_count = meta["step_count"]
        head.optimizer.t = meta["adam_t"]
        head.optimizer.lr = meta["lr"]
        for i in range(len(head.optimizer.m)):
            head.optimizer.m[i][:] = arrays[f"adam.m{i}"]
            head.optimizer.v[i][:] = arrays[f"adam.v{i}"]
    if state.ncm is not None:
        state.ncm.expand(len(meta["classes"]))
        state.ncm.sums[:] = arrays["ncm.sums"]
        state.ncm.counts[:] = arrays["ncm.counts"]
    return state
