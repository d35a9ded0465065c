"""Timestep streams of category names.

A stream manifest is the single input that drives a run: an ordered list of
timesteps, each unveiling a set of category names, optionally scoped to a
visual domain or a time window. Manifests are plain JSON documents and are
immutable once loaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

SETTINGS = ("class-incremental", "domain-incremental", "time-incremental")


def category_key(name: str) -> str:
    """Canonical identity of a category: whitespace-trimmed, case-folded."""
    return name.strip().casefold()


@dataclass(frozen=True)
class CategorySpec:
    """One class name, plus optional query refinements."""

    name: str
    suffix: str | None = None
    replacement: str | None = None

    @property
    def key(self) -> str:
        return category_key(self.name)


@dataclass(frozen=True)
class Timestep:
    index: int
    categories: tuple[CategorySpec, ...]
    domain_suffix: str | None = None
    time_range: tuple[int, int] | None = None


@dataclass(frozen=True)
class StreamManifest:
    name: str
    setting: str
    timesteps: tuple[Timestep, ...]
    test_refs: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    timestep: int | None
    field: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.violations

    def add(self, timestep: int | None, field_name: str, message: str) -> None:
        self.violations.append(Violation(timestep, field_name, message))


def validate(manifest: StreamManifest) -> ValidationReport:
    """Check every manifest invariant; empty report means valid."""
    report = ValidationReport()

    if manifest.setting not in SETTINGS:
        report.add(None, "setting", f"unknown setting {manifest.setting!r}")
    if not manifest.timesteps:
        report.add(None, "timesteps", "manifest has no timesteps")

    prev_index = 0
    seen_across: dict[str, int] = {}
    for pos, ts in enumerate(manifest.timesteps):
        if pos == 0 and ts.index != 1:
            report.add(ts.index, "index", "first timestep index must be 1")
        elif ts.index <= prev_index:
            report.add(ts.index, "index", "timestep indices must be strictly increasing")
        prev_index = ts.index

        if not ts.categories:
            report.add(ts.index, "categories", "timestep has no categories")

        seen_here: set[str] = set()
        for cat in ts.categories:
            key = cat.key
            if not key:
                report.add(ts.index, "categories", "category name empty after trimming")
                continue
            if cat.replacement is not None and not cat.replacement.strip():
                report.add(ts.index, "categories", f"empty replacement for {cat.name!r}")
            if key in seen_here:
                report.add(ts.index, "categories", f"duplicate category {cat.name!r} within timestep")
            seen_here.add(key)
            if manifest.setting == "class-incremental":
                first = seen_across.get(key)
                if first is not None and first != ts.index:
                    report.add(
                        ts.index,
                        "categories",
                        f"category {cat.name!r} already introduced at timestep {first}",
                    )
                seen_across.setdefault(key, ts.index)

        if ts.time_range is not None:
            start, end = ts.time_range
            if start > end:
                report.add(ts.index, "time_range", "time_range start exceeds end")
        elif manifest.setting == "time-incremental":
            report.add(ts.index, "time_range", "time-incremental timestep missing time_range")

    return report


def _parse_category(raw: object, index: int) -> CategorySpec:
    if not isinstance(raw, dict) or "name" not in raw:
        raise ManifestError(f"timestep {index}: category entry must be an object with a name")
    return CategorySpec(
        name=str(raw["name"]),
        suffix=raw.get("suffix"),
        replacement=raw.get("replacement"),
    )


def _parse_timestep(raw: dict) -> Timestep:
    index = int(raw.get("index", 0))
    cats = tuple(_parse_category(c, index) for c in raw.get("categories", []))
    time_range = None
    if raw.get("time_range") is not None:
        tr = raw["time_range"]
        time_range = (int(tr["start"]), int(tr["end"]))
    return Timestep(
        index=index,
        categories=cats,
        domain_suffix=raw.get("domain_suffix"),
        time_range=time_range,
    )


def manifest_from_dict(doc: dict) -> StreamManifest:
    """Build a manifest from a parsed JSON document, then validate it."""
    try:
        timesteps = tuple(_parse_timestep(t) for t in doc.get("timesteps", []))
        test_refs = {int(k): str(v) for k, v in (doc.get("test_refs") or {}).items()}
        manifest = StreamManifest(
            name=str(doc.get("name", "")),
            setting=str(doc.get("setting", "")),
            timesteps=timesteps,
            test_refs=test_refs,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc

    report = validate(manifest)
    if not report.ok():
        first = report.violations[0]
        where = f"timestep {first.timestep}" if first.timestep is not None else "manifest"
        raise ManifestError(f"{where}, {first.field}: {first.message}")
    return manifest


def load_manifest(path: str | Path) -> StreamManifest:
    """Load and validate a manifest JSON file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top-level JSON value must be an object")
    return manifest_from_dict(doc)


def manifest_to_dict(manifest: StreamManifest) -> dict:
    doc: dict = {
        "name": manifest.name,
        "setting": manifest.setting,
        "timesteps": [],
    }
    for ts in manifest.timesteps:
        entry: dict = {
            "index": ts.index,
            "categories": [
                {
                    "name": c.name,
                    **({"suffix": c.suffix} if c.suffix is not None else {}),
                    **({"replacement": c.replacement} if c.replacement is not None else {}),
                }
                for c in ts.categories
            ],
        }
        if ts.domain_suffix is not None:
            entry["domain_suffix"] = ts.domain_suffix
        if ts.time_range is not None:
            entry["time_range"] = {"start": ts.time_range[0], "end": ts.time_range[1]}
        doc["timesteps"].append(entry)
    if manifest.test_refs:
        doc["test_refs"] = {str(k): v for k, v in sorted(manifest.test_refs.items())}
    return doc


def save_manifest(manifest: StreamManifest, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def cumulative_categories(manifest: StreamManifest, t: int) -> list[CategorySpec]:
    """All categories introduced in timestep positions 1..t, first-seen order.

    Repeats across timesteps (domain/time settings) collapse by canonical
    name; the earliest spec wins so suffixes and class indices stay stable.
    """
    if not 1 <= t <= len(manifest.timesteps):
        raise ValueError(f"t={t} out of range 1..{len(manifest.timesteps)}")
    out: list[CategorySpec] = []
    seen: set[str] = set()
    for ts in manifest.timesteps[:t]:
        for cat in ts.categories:
            if cat.key not in seen:
                seen.add(cat.key)
                out.append(cat)
    return out
