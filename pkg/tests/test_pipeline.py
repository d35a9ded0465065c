from __future__ import annotations

import json

import numpy as np
import pytest

from webclf.checkpoint import load_checkpoint, save_checkpoint
from webclf.errors import ConfigError
from webclf.features import MockProjectionBackend
from webclf.learner import LearnerState, TrainConfig
from webclf.mocknet import make_cluster_corpus, make_test_archive, save_corpus
from webclf.pipeline import RunConfig, resume, run_pipeline
from webclf.stream import CategorySpec, StreamManifest, Timestep, save_manifest

CLASSES = [f"class{k:02d}" for k in range(6)]


@pytest.fixture()
def synthetic_setup(tmp_path, mock_server):
    """3-timestep class-incremental stream over the deterministic mock stack."""
    corpus = make_cluster_corpus(CLASSES, per_class=25, corpus_seed=7)
    save_corpus(corpus, tmp_path / "corpus.json")
    backend = MockProjectionBackend(seed=0, dim=64)
    test_refs = {}
    for t in range(3):
        names = CLASSES[2 * t : 2 * t + 2]
        make_test_archive(
            names, per_class=15, corpus_seed=7, backend=backend,
            path=tmp_path / f"test_t{t + 1}.c2cf", class_indices=[2 * t, 2 * t + 1],
        )
        test_refs[t + 1] = f"test_t{t + 1}.c2cf"
    manifest = StreamManifest(
        name="synthetic",
        setting="class-incremental",
        timesteps=tuple(
            Timestep(index=t + 1, categories=tuple(CategorySpec(name=n) for n in CLASSES[2 * t : 2 * t + 2]))
            for t in range(3)
        ),
        test_refs=test_refs,
    )
    save_manifest(manifest, tmp_path / "manifest.json")

    def make_config(out="run", **overrides) -> RunConfig:
        base = dict(
            manifest=str(tmp_path / "manifest.json"),
            out=str(tmp_path / out),
            engines=["mock"],
            corpus=str(tmp_path / "corpus.json"),
            mock_base_url=mock_server.base_url,
            backend="mock:0:64",
            method="knn",
            budget="normal",
            reference_size=12800,
            batch_size=512,
            seed=11,
        )
        base.update(overrides)
        return RunConfig(**base)

    return tmp_path, make_config


def test_smoke_run_produces_report(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    run_dir = run_pipeline(make_config())
    report = json.loads((run_dir / "report.json").read_text())
    assert len(report["per_timestep"]) == 3
    assert report["method"] == "knn"
    assert (run_dir / "report.md").exists()
    assert report["avg_acc"] > 0.9  # separable by construction


def test_rerun_same_seed_byte_identical_report(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    first = run_pipeline(make_config(out="run-a", method="linear"))
    second = run_pipeline(make_config(out="run-b", method="linear"))
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()


def test_top_k_limits_downloads(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    limited = run_pipeline(make_config(out="run-topk", top_k=10))
    unlimited = run_pipeline(make_config(out="run-all"))

    def downloaded(run_dir, t=1):
        index = (run_dir / "store" / "index" / f"t{t}.jsonl").read_text().splitlines()
        return len(index)

    # oracle: corpus has 25/class; 1 engine; 2 classes per timestep
    assert downloaded(limited) == 2 * 10
    assert downloaded(unlimited) == 2 * 25


def test_resume_after_interruption_matches_uninterrupted(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    reference = run_pipeline(make_config(out="run-full", method="linear"))

    config = make_config(out="run-interrupted", method="linear")
    interrupted = run_pipeline(config)
    # wipe everything from timestep 3 onward, as if the process died mid-run
    for marker in (interrupted / "stages").iterdir():
        if "t3" in marker.name or marker.name.startswith("report"):
            marker.unlink()
    (interrupted / "report.json").unlink()
    for stale in [
        interrupted / "links" / "t3.jsonl",
        interrupted / "features" / "t3.c2cf",
        interrupted / "checkpoints" / "t3.bin",
        interrupted / "eval" / "t3.json",
    ]:
        if stale.exists():
            stale.unlink()

    resumed = resume(interrupted)
    assert (resumed / "report.json").read_bytes() == (reference / "report.json").read_bytes()


def test_resume_of_complete_run_is_noop(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    run_dir = run_pipeline(make_config(out="run-done"))
    before = (run_dir / "report.json").read_bytes()
    resumed = resume(run_dir)
    assert (resumed / "report.json").read_bytes() == before


def test_resume_with_mutated_config_refused(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    run_dir = run_pipeline(make_config(out="run-mut"))
    config_path = run_dir / "config.json"
    doc = json.loads(config_path.read_text())
    doc["seed"] = 999
    config_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    with pytest.raises(ConfigError, match="modified"):
        resume(run_dir)


def test_fresh_dir_with_different_config_refused(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    run_pipeline(make_config(out="run-locked"))
    with pytest.raises(ConfigError, match="different config"):
        run_pipeline(make_config(out="run-locked", seed=12345))


def test_report_rebuildable_from_eval_files(synthetic_setup):
    from webclf.metrics import emit_report
    from webclf.pipeline import build_eval_matrix

    tmp_path, make_config = synthetic_setup
    run_dir = run_pipeline(make_config(out="run-rebuild"))
    original = (run_dir / "report.json").read_bytes()
    (run_dir / "report.json").unlink()
    matrix = build_eval_matrix(run_dir, timesteps=3)
    emit_report(matrix, run_dir / "report.json", format="json", method="knn", budget="normal", seed=11)
    assert (run_dir / "report.json").read_bytes() == original


def test_cleaning_enabled_run_emits_reports(synthetic_setup):
    tmp_path, make_config = synthetic_setup
    run_dir = run_pipeline(make_config(out="run-clean", dedup=True, noise=True))
    for t in (1, 2, 3):
        assert (run_dir / "features" / f"t{t}.curated.c2cf").exists()
        report = json.loads((run_dir / "curation" / f"t{t}.json").read_text())
        assert report["input_count"] == report["kept_count"] + report["duplicate_count"] + report["noisy_count"]


def test_cleaning_can_use_dedicated_feature_space(synthetic_setup):
    from webclf.features import read_archive, write_archive, FeatureArchive

    tmp_path, make_config = synthetic_setup
    # plain run provides the per-timestep archives to build a cleaning space from
    base = run_pipeline(make_config(out="run-base"))
    cleaning_paths = []
    for t in (1, 2, 3):
        archive = read_archive(base / "features" / f"t{t}.c2cf")
        doubled = FeatureArchive(
            dim=archive.dim, ids=archive.ids, vectors=archive.vectors * 2.0, labels=archive.labels
        )
        path = tmp_path / f"cleaning_t{t}.c2cf"
        write_archive(doubled, path)
        cleaning_paths.append(str(path))

    run_dir = run_pipeline(
        make_config(out="run-cleanspace", dedup=True, cleaning_features=cleaning_paths)
    )
    assert (run_dir / "features" / "t1.curated.c2cf").exists()


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        RunConfig(manifest="m", out="o", method="nope").validate()
    with pytest.raises(ConfigError):
        RunConfig(manifest="m", out="o", budget="enormous").validate()
    with pytest.raises(ConfigError):
        RunConfig(manifest="m", out="o", top_k=0).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"manifest": "m", "out": "o", "bogus_key": 1})


def test_checkpoint_roundtrip_linear():
    rng = np.random.default_rng(0)
    state = LearnerState(dim=8, method="linear", config=TrainConfig(batch_size=16, seed=2), seed=2)
    x = rng.standard_normal((40, 8)).astype(np.float32)
    labels = ["a"] * 20 + ["b"] * 20
    state.run_timestep(["a", "b"], x, labels, budget=6)

    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.bin"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path, config=state.config)

    assert loaded.registry.names == state.registry.names
    assert loaded.head.step_count == state.head.step_count
    assert np.array_equal(loaded.head.weights, state.head.weights)
    assert np.array_equal(loaded.head.optimizer.m[0], state.head.optimizer.m[0])


def test_checkpoint_roundtrip_ncm():
    rng = np.random.default_rng(1)
    state = LearnerState(dim=4, method="ncm", seed=0)
    x = rng.standard_normal((10, 4)).astype(np.float32)
    state.run_timestep(["a", "b"], x, ["a"] * 5 + ["b"] * 5, budget=None)

    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.bin"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
    assert np.array_equal(loaded.ncm.sums, state.ncm.sums)
    assert np.array_equal(loaded.ncm.counts, state.ncm.counts)


def test_checkpoint_bytes_deterministic():
    state = LearnerState(dim=4, method="linear", seed=3)
    state.run_timestep(["a"], np.ones((2, 4), dtype=np.float32), ["a", "a"], budget=1)

    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.bin", Path(tmp) / "b.bin"
        save_checkpoint(state, p1)
        save_checkpoint(state, p2)
        assert p1.read_bytes() == p2.read_bytes()
