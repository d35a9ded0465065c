"""Turns category names into sanitized, engine-ready query strings."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .stream import Timestep, category_key


@dataclass(frozen=True)
class QueryPlan:
    """One query to send to one engine for one category."""

    category_name: str  # canonical registry key
    query_text: str
    engine_id: str
    top_k: int | None = None  # None = unlimited
    safe_search: bool = True
    time_range: tuple[int, int] | None = None
    timestep: int = 0


class ReplacementMap:
    """Whole-phrase substitutions applied to names before querying.

    Shipped as an editable JSON file of {"term": "substitute"}; reviewing the
    entries stays an operator duty.
    """

    def __init__(self, entries: dict[str, str] | None = None):
        self.entries: dict[str, str] = {}
        for term, substitute in (entries or {}).items():
            if not term.strip() or not substitute.strip():
                raise ValueError("replacement terms and substitutes must be non-empty")
            if term.strip().casefold() == substitute.strip().casefold():
                raise ValueError(f"replacement maps {term!r} to itself")
            self.entries[term.strip()] = substitute.strip()
        self._pattern = self._compile()

    @classmethod
    def load(cls, path: str | Path) -> "ReplacementMap":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: replacement map must be a JSON object")
        return cls(doc)

    def _compile(self) -> re.Pattern | None:
        if not self.entries:
            return None
        # Longest term first so a phrase wins over any word inside it.
        terms = sorted(self.entries, key=len, reverse=True)
        alternation = "|".join(re.escape(t) for t in terms)
        return re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)

    def apply(self, name: str) -> str:
        if self._pattern is None:
            return name
        lookup = {t.casefold(): s for t, s in self.entries.items()}
        return self._pattern.sub(lambda m: lookup[m.group(0).casefold()], name)


def sanitize(name: str, replacements: ReplacementMap) -> str:
    """Replace whole-phrase, case-insensitive occurrences of mapped terms.

    A single left-to-right pass: substituted text is never rescanned, so the
    result is stable under repeated application as long as no substitute is
    itself a mapped term.
    """
    return replacements.apply(name)


def build_queries(
    timestep: Timestep,
    engines: list[str],
    replacements: ReplacementMap,
    top_k: int | None = None,
) -> list[QueryPlan]:
    """One plan per (category, engine): sanitized name plus the best suffix.

    The category's own suffix wins over the timestep's domain suffix; with
    neither, the bare sanitized name is sent.
    """
    if not engines:
        raise ValueError("engines must be non-empty")
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1 or None for unlimited")

    plans = []
    for cat in timestep.categories:
        text = sanitize(cat.name.strip(), replacements)
        suffix = cat.suffix if cat.suffix is not None else timestep.domain_suffix
        if suffix:
            text = f"{text} {suffix.strip()}"
        for engine_id in engines:
            plans.append(
                QueryPlan(
                    category_name=category_key(cat.name),
                    query_text=text,
                    engine_id=engine_id,
                    top_k=top_k,
                    safe_search=True,
                    time_range=timestep.time_range,
                    timestep=timestep.index,
                )
            )
    return plans
