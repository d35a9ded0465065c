"""Continual-learning metrics over per-timestep evaluation results."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    """Fraction of exact matches."""
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot score an empty evaluation set")
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    return correct / len(labels)


class EvalMatrix:
    """Accuracy A[t][j] on timestep-j test data measured after training timestep t.

    Entries are stored as (correct, total) counts so pooled accuracies are
    exact; defined for j <= t only (lower triangle).
    """

    def __init__(self):
        self._correct: dict[tuple[int, int], int] = {}
        self._total: dict[int, int] = {}

    @property
    def num_timesteps(self) -> int:
        return max((t for t, _ in self._correct), default=0)

    def record(self, t: int, j: int, correct: int, total: int) -> None:
        if j > t:
            raise ValueError(f"entry ({t}, {j}) above the diagonal")
        if not 0 <= correct <= total or total < 1:
            raise ValueError(f"bad counts correct={correct} total={total}")
        known = self._total.get(j)
        if known is not None and known != total:
            raise ValueError(f"test partition {j} changed size: {known} -> {total}")
        self._total[j] = total
        self._correct[(t, j)] = correct

    def record_accuracy(self, t: int, j: int, acc: float, total: int) -> None:
        self.record(t, j, round(acc * total), total)

    def entry(self, t: int, j: int) -> float:
        return self._correct[(t, j)] / self._total[j]

    def _check_full(self) -> None:
        for t in range(1, self.num_timesteps + 1):
            for j in range(1, t + 1):
                if (t, j) not in self._correct:
                    raise ValueError(f"missing entry ({t}, {j}); lower triangle incomplete")

    def cumulative_accuracy(self, t: int) -> float:
        """Pooled accuracy over the union of test partitions 1..t."""
        correct = sum(self._correct[(t, j)] for j in range(1, t + 1))
        total = sum(self._total[j] for j in range(1, t + 1))
        return correct / total

    def to_dict(self) -> dict:
        return {
            "totals": {str(j): n for j, n in sorted(self._total.items())},
            "correct": {f"{t},{j}": c for (t, j), c in sorted(self._correct.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalMatrix":
        matrix = cls()
        totals = {int(j): n for j, n in doc["totals"].items()}
        for key, correct in doc["correct"].items():
            t, j = (int(p) for p in key.split(","))
            matrix.record(t, j, correct, totals[j])
        return matrix


def avg_incremental_accuracy(matrix: "EvalMatrix | Sequence[float]") -> float:
    """Mean over timesteps of the pooled cumulative accuracy.

    Also accepts a plain sequence of per-timestep cumulative accuracies.
    """
    if isinstance(matrix, EvalMatrix):
        t_max = matrix.num_timesteps
        if t_max == 0:
            raise ValueError("empty matrix")
        matrix._check_full()
        values = [matrix.cumulative_accuracy(t) for t in range(1, t_max + 1)]
    else:
        values = list(matrix)
        if not values:
            raise ValueError("empty accuracy sequence")
    return float(np.mean(values))


def forgetting(matrix: EvalMatrix) -> float:
    """Average drop from each task's running-best accuracy to its final one.

    Non-positive by construction; zero when no task ever loses accuracy.
    """
    t_max = matrix.num_timesteps
    if t_max < 2:
        raise ValueError("forgetting needs at least 2 timesteps")
    matrix._check_full()
    drops = []
    for j in range(1, t_max):
        final = matrix.entry(t_max, j)
        best = max(matrix.entry(t, j) for t in range(j, t_max + 1))
        drops.append(final - best)
    return float(np.mean(drops))


def report_dict(matrix: EvalMatrix, method: str = "", budget: str = "", seed: int = 0) -> dict:
    t_max = matrix.num_timesteps
    fgt = forgetting(matrix) if t_max >= 2 else None
    return {
        "avg_acc": avg_incremental_accuracy(matrix),
        "fgt": fgt,
        "per_timestep": [
            {"t": t, "cum_acc": matrix.cumulative_accuracy(t)} for t in range(1, t_max + 1)
        ],
        "method": method,
        "budget": budget,
        "seed": seed,
    }


def emit_report(
    matrix: EvalMatrix,
    path: str | Path,
    format: str = "json",
    method: str = "",
    budget: str = "",
    seed: int = 0,
) -> None:
    """Write the run report as JSON or a markdown table."""
    doc = report_dict(matrix, method=method, budget=budget, seed=seed)
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    elif format in ("markdown", "markdown-table", "md"):
        lines = [
            f"# Run report ({method or 'n/a'}, budget={budget or 'n/a'}, seed={seed})",
            "",
            "| timestep | cumulative accuracy |",
            "| --- | --- |",
        ]
        for row in doc["per_timestep"]:
            lines.append(f"| {row['t']} | {row['cum_acc']:.4f} |")
        lines.append("")
        lines.append(f"Average incremental accuracy: {doc['avg_acc']:.4f}")
        fgt = doc["fgt"]
        lines.append(f"Forgetting: {'n/a' if fgt is None else f'{fgt:.4f}'}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {format!r}")
