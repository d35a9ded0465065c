"""Feature-pool cleaning and the class-balanced batch sampler.

Both cleaning passes are off by default in pipeline runs; they are exposed
behind flags because their effect on downstream accuracy is usually small,
while the sampler is used by every training run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CurationError
from .features import l2_normalize

DEDUP_THRESHOLD = 0.99
NOISE_SIM_THRESHOLD = 0.2
NOISE_FRACTION = 0.5


@dataclass
class CurationReport:
    input_count: int
    duplicate_count: int = 0
    noisy_count: int = 0
    per_class: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def kept_count(self) -> int:
        return self.input_count - self.duplicate_count - self.noisy_count

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "duplicate_count": self.duplicate_count,
            "noisy_count": self.noisy_count,
            "kept_count": self.kept_count,
            "per_class": self.per_class,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _normalized(vectors: np.ndarray) -> np.ndarray:
    try:
        return l2_normalize(np.asarray(vectors, dtype=np.float64))
    except ValueError:
        raise CurationError("pool contains zero vectors; cosine cleaning undefined") from None


def deduplicate(
    vectors: np.ndarray,
    labels: Sequence[str] | None = None,
    threshold: float = DEDUP_THRESHOLD,
) -> tuple[list[int], CurationReport]:
    """Greedy scan in pool order: drop anything too close to an already-kept vector.

    A vector is a duplicate iff its cosine similarity to some kept vector
    strictly exceeds ``threshold``; the first occurrence of a duplicate group
    always survives. Returns kept indices plus a report.
    """
    if not 0.0 < threshold <= 1.0:
        raise CurationError(f"dedup threshold {threshold} outside (0, 1]")
    unit = _normalized(vectors)
    n = len(unit)
    kept: list[int] = []
    dup_by_class: dict[str, int] = {}
    kept_rows = np.empty((n, unit.shape[1]), dtype=np.float64)
    for i in range(n):
        if kept and np.max(kept_rows[: len(kept)] @ unit[i]) > threshold:
            if labels is not None:
                dup_by_class[labels[i]] = dup_by_class.get(labels[i], 0) + 1
            continue
        kept_rows[len(kept)] = unit[i]
        kept.append(i)

    report = CurationReport(input_count=n, duplicate_count=n - len(kept))
    if labels is not None:
        for name in sorted(set(labels)):
            report.per_class[name] = {"duplicates": dup_by_class.get(name, 0)}
    return kept, report


def remove_noisy(
    vectors: np.ndarray,
    labels: Sequence[str],
    sim_threshold: float = NOISE_SIM_THRESHOLD,
    fraction: float = NOISE_FRACTION,
) -> tuple[list[int], CurationReport]:
    """Drop samples that are far from most of their own class.

    A sample is noisy iff its cosine similarity is below ``sim_threshold``
    for at least ``fraction`` of the other samples in its class, judged on
    the pool as given (no cascading). Singleton classes pass through.
    """
    if not 0.0 < sim_threshold < 1.0 or not 0.0 < fraction < 1.0:
        raise CurationError("noise thresholds must lie in (0, 1)")
    if len(labels) != len(vectors):
        raise CurationError("labels and vectors differ in length")
    unit = _normalized(vectors)

    by_class: dict[str, list[int]] = {}
    for i, name in enumerate(labels):
        by_class.setdefault(name, []).append(i)

    noisy: set[int] = set()
    noisy_by_class: dict[str, int] = {}
    for name, idx in by_class.items():
        if len(idx) < 2:
            continue
        block = unit[idx]
        sims = block @ block.T
        low = sims < sim_threshold
        np.fill_diagonal(low, False)
        counts = low.sum(axis=1)
        for local, count in enumerate(counts):
            if count >= fraction * (len(idx) - 1):
                noisy.add(idx[local])
                noisy_by_class[name] = noisy_by_class.get(name, 0) + 1

    kept = [i for i in range(len(unit)) if i not in noisy]
    report = CurationReport(input_count=len(unit), noisy_count=len(noisy))
    for name in sorted(by_class):
        report.per_class[name] = {"noisy": noisy_by_class.get(name, 0)}
    return kept, report


def clean_pool(
    vectors: np.ndarray,
    labels: Sequence[str],
    dedup: bool = False,
    dedup_threshold: float = DEDUP_THRESHOLD,
    noise: bool = False,
    noise_sim: float = NOISE_SIM_THRESHOLD,
    noise_fraction: float = NOISE_FRACTION,
) -> tuple[list[int], CurationReport]:
    """Run the enabled passes in order (duplicates first, then noise)."""
    indices = list(range(len(vectors)))
    report = CurationReport(input_count=len(vectors))
    if dedup:
        kept, dup_report = deduplicate(vectors, labels, threshold=dedup_threshold)
        indices = kept
        report.duplicate_count = dup_report.duplicate_count
        for name, counts in dup_report.per_class.items():
            report.per_class.setdefault(name, {}).update(counts)
    if noise:
        sub_labels = [labels[i] for i in indices]
        kept_local, noise_report = remove_noisy(
            np.asarray(vectors)[indices], sub_labels, sim_threshold=noise_sim, fraction=noise_fraction
        )
        indices = [indices[i] for i in kept_local]
        report.noisy_count = noise_report.noisy_count
        for name, counts in noise_report.per_class.items():
            report.per_class.setdefault(name, {}).update(counts)
    return indices, report


class SamplerState:
    """Per-class decks with reshuffle-on-exhaustion; deterministic given seed."""

    def __init__(self, labels: Sequence[object], seed: int):
        if len(labels) == 0:
            raise CurationError("cannot sample from an empty pool")
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        grouped: dict[object, list[int]] = {}
        for i, name in enumerate(labels):
            grouped.setdefault(name, []).append(i)
        self.classes = sorted(grouped, key=str)
        self.class_indices = {name: np.asarray(grouped[name], dtype=np.int64) for name in self.classes}
        self._decks = {name: self._rng.permutation(self.class_indices[name]) for name in self.classes}
        self._cursors = {name: 0 for name in self.classes}

    def _draw_from(self, name: object) -> int:
        deck = self._decks[name]
        cursor = self._cursors[name]
        if cursor >= len(deck):
            deck = self._rng.permutation(self.class_indices[name])
            self._decks[name] = deck
            cursor = 0
        self._cursors[name] = cursor + 1
        return int(deck[cursor])

    def draw(self, count: int) -> np.ndarray:
        """Draw ``count`` indices: class uniform over classes, sample uniform within."""
        picks = self._rng.integers(0, len(self.classes), size=count)
        return np.asarray([self._draw_from(self.classes[c]) for c in picks], dtype=np.int64)


def balanced_batches(labels: Sequence[object], batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches with equal expected class representation."""
    if batch_size < 1:
        raise CurationError("batch_size must be >= 1")
    state = SamplerState(labels, seed)
    while True:
        yield state.draw(batch_size)
