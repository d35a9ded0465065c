from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from webclf.errors import ManifestError
from webclf.stream import (
    CategorySpec,
    StreamManifest,
    Timestep,
    cumulative_categories,
    load_manifest,
    manifest_from_dict,
    save_manifest,
    validate,
)


def make_manifest(setting="class-incremental", groups=None, **kwargs):
    groups = groups if groups is not None else [["cat"], ["dog"]]
    timesteps = tuple(
        Timestep(index=i + 1, categories=tuple(CategorySpec(name=n) for n in names), **kwargs)
        for i, names in enumerate(groups)
    )
    return StreamManifest(name="m", setting=setting, timesteps=timesteps)


def write_manifest_doc(tmp_path, doc):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def trend_style_doc(timesteps=21, total_classes=39):
    # class-incremental, one or two fresh classes a timestep
    names = [f"product{i}" for i in range(total_classes)]
    per = [[] for _ in range(timesteps)]
    for i, name in enumerate(names):
        per[i % timesteps].append(name)
    return {
        "name": "trends",
        "setting": "class-incremental",
        "timesteps": [
            {"index": t + 1, "categories": [{"name": n} for n in group]}
            for t, group in enumerate(per)
        ],
    }


def test_load_trend_style_manifest(tmp_path):
    path = write_manifest_doc(tmp_path, trend_style_doc())
    manifest = load_manifest(path)
    assert len(manifest.timesteps) == 21
    assert len(cumulative_categories(manifest, 21)) == 39


def test_load_minimal_manifest(tmp_path):
    doc = {
        "name": "tiny",
        "setting": "class-incremental",
        "timesteps": [{"index": 1, "categories": [{"name": "cat"}]}],
    }
    manifest = load_manifest(write_manifest_doc(tmp_path, doc))
    assert len(manifest.timesteps) == 1
    assert manifest.timesteps[0].categories[0].name == "cat"


def test_repeated_class_rejected_in_class_incremental(tmp_path):
    doc = {
        "name": "bad",
        "setting": "class-incremental",
        "timesteps": [
            {"index": 1, "categories": [{"name": "dog"}]},
            {"index": 2, "categories": [{"name": "dog"}]},
        ],
    }
    with pytest.raises(ManifestError, match="already introduced"):
        load_manifest(write_manifest_doc(tmp_path, doc))


def test_malformed_json_is_a_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(path)


def test_validate_pacs_style_domain_manifest():
    domains = ["photo", "art", "cartoon", "sketch"]
    names = ["dog", "elephant", "giraffe", "guitar", "horse", "house", "person"]
    manifest = StreamManifest(
        name="domains",
        setting="domain-incremental",
        timesteps=tuple(
            Timestep(
                index=i + 1,
                categories=tuple(CategorySpec(name=n) for n in names),
                domain_suffix=d,
            )
            for i, d in enumerate(domains)
        ),
    )
    assert validate(manifest).ok()
    assert len(cumulative_categories(manifest, 4)) == 7


def test_time_incremental_requires_time_range():
    manifest = make_manifest(setting="time-incremental")
    report = validate(manifest)
    assert not report.ok()
    assert any(v.field == "time_range" for v in report.violations)


def test_empty_category_list_is_one_violation():
    manifest = StreamManifest(
        name="m",
        setting="class-incremental",
        timesteps=(Timestep(index=1, categories=()),),
    )
    report = validate(manifest)
    assert [v.field for v in report.violations] == ["categories"]


def test_cumulative_categories_counts():
    groups = [[f"c{10*t + i}" for i in range(10)] for t in range(10)]
    manifest = make_manifest(groups=groups)
    assert len(cumulative_categories(manifest, 3)) == 30
    assert cumulative_categories(manifest, 1) == list(manifest.timesteps[0].categories)
    with pytest.raises(ValueError):
        cumulative_categories(manifest, 11)


def test_cumulative_collapse_keeps_earliest_spec():
    groups = [["dog"], ["dog"], ["dog"], ["dog"]]
    manifest = StreamManifest(
        name="m",
        setting="domain-incremental",
        timesteps=tuple(
            Timestep(
                index=i + 1,
                categories=(CategorySpec(name="dog", suffix=f"s{i}"),),
            )
            for i in range(4)
        ),
    )
    cats = cumulative_categories(manifest, 4)
    assert len(cats) == 1
    assert cats[0].suffix == "s0"


def test_cumulative_is_monotone_prefix():
    groups = [["a", "b"], ["b", "c"], ["a", "d"]]
    manifest = make_manifest(setting="domain-incremental", groups=groups)
    previous: list = []
    for t in range(1, 4):
        current = cumulative_categories(manifest, t)
        assert current[: len(previous)] == previous
        previous = current
    assert len(previous) == 4  # distinct names in the whole manifest


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=4))
def test_roundtrip_identity(timesteps, per_step):
    groups = [[f"c{t}_{i}" for i in range(per_step)] for t in range(timesteps)]
    manifest = make_manifest(groups=groups)
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.json"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest


def test_roundtrip_preserves_optional_fields(tmp_path):
    manifest = StreamManifest(
        name="full",
        setting="time-incremental",
        timesteps=(
            Timestep(
                index=1,
                categories=(CategorySpec(name="bus", suffix="vehicle", replacement="coach"),),
                domain_suffix="photo",
                time_range=(100, 200),
            ),
        ),
        test_refs={1: "t1.c2cf"},
    )
    path = tmp_path / "m.json"
    save_manifest(manifest, path)
    assert load_manifest(path) == manifest


def test_first_violated_invariant_is_named(tmp_path):
    doc = {
        "name": "bad",
        "setting": "class-incremental",
        "timesteps": [{"index": 2, "categories": [{"name": "cat"}]}],
    }
    with pytest.raises(ManifestError, match="index"):
        manifest_from_dict(doc)
