"""End-to-end orchestration: manifest -> crawl -> download -> embed ->
curate -> train -> evaluate, with per-stage artifacts and resume.

Every stage writes its outputs plus a marker file before the next stage
starts; re-running a directory skips completed stages, so an interrupted
run continues where it stopped and finishes with the same artifacts an
uninterrupted run would have produced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engines as engine_registry
from .checkpoint import load_checkpoint, save_checkpoint
from .crawl import EngineAdapter, LinkManifest, crawl
from .curation import clean_pool
from .download import ImageRecord, ImageStore, ResizePolicy, download_all, export_link_manifest
from .errors import ConfigError, StageError, WebclfError
from .features import (
    EmbeddingBackend,
    FeatureArchive,
    embed_image,
    parse_backend,
    read_archive,
    write_archive,
)
from .learner import BUDGET_MULTIPLIERS, METHODS, BudgetProfile, LearnerState, TrainConfig, compute_budget
from .metrics import EvalMatrix, emit_report
from .mocknet import MockEngine, MockImageServer, load_corpus
from .queries import ReplacementMap, build_queries
from .stream import StreamManifest, category_key, load_manifest

log = logging.getLogger(__name__)

DEFAULT_REPLACEMENTS = Path(__file__).parent / "data" / "replacements.json"


@dataclass
class RunConfig:
    manifest: str
    out: str
    engines: list[str] = field(default_factory=lambda: ["mock"])
    corpus: str | None = None
    mock_port: int = 8606
    mock_base_url: str | None = None
    mock_latency: float = 0.0
    replacements: str | None = None
    top_k: int | None = None
    resize: str = "max-side:512"
    backend: str = "mock:0:64"
    features: list[str] = field(default_factory=list)
    dedup: bool = False
    dedup_threshold: float = 0.99
    noise: bool = False
    noise_sim: float = 0.2
    noise_frac: float = 0.5
    cleaning_features: list[str] = field(default_factory=list)  # stronger space for cleaning decisions
    method: str = "linear"
    budget: str = "normal"
    reference_size: int = 5000
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0
    crawl_workers: int = 4
    download_parallelism: int = 8
    timeout: float = 10.0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.budget not in BUDGET_MULTIPLIERS:
            raise ConfigError(f"budget must be one of {tuple(BUDGET_MULTIPLIERS)}, got {self.budget!r}")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1 or null for unlimited")
        if self.reference_size < 1 or self.batch_size < 1:
            raise ConfigError("reference_size and batch_size must be >= 1")
        if not self.engines:
            raise ConfigError("at least one engine required")
        try:
            ResizePolicy.parse(self.resize)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.backend.startswith("archive") and not self.features:
            raise ConfigError("backend 'archive' needs --features archive paths")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            config = cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


class RunDirectory:
    """Filesystem layout of one run, plus stage markers."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def marker(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.json"

    def is_done(self, stage: str) -> bool:
        return self.marker(stage).exists()

    def mark_done(self, stage: str) -> None:
        path = self.marker(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"stage": stage, "ok": True}) + "\n", encoding="utf-8")

    def log_event(self, **event) -> None:
        with open(self.path("run_log.jsonl"), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def links_path(self, t: int) -> Path:
        return self.path("links", f"t{t}.jsonl")

    def features_path(self, t: int, curated: bool = False) -> Path:
        name = f"t{t}.curated.c2cf" if curated else f"t{t}.c2cf"
        return self.path("features", name)

    def checkpoint_path(self, t: int) -> Path:
        return self.path("checkpoints", f"t{t}.bin")

    def eval_path(self, t: int) -> Path:
        return self.path("eval", f"t{t}.json")


def _init_run_dir(run: RunDirectory, config: RunConfig) -> None:
    config_path = run.root / "config.json"
    if config_path.exists():
        stored = RunConfig.load(config_path)
        if stored.digest() != config.digest():
            raise ConfigError(
                f"run directory {run.root} was created with a different config; refusing to resume"
            )
    else:
        run.root.mkdir(parents=True, exist_ok=True)
        config_path.write_text(config.canonical_json(), encoding="utf-8")
        (run.root / "config.sha256").write_text(config.digest() + "\n", encoding="utf-8")


def resume(run_dir: str | Path) -> Path:
    """Continue an interrupted run from its first incomplete stage."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{run_dir} has no config.json; not a run directory")
    config = RunConfig.load(config_path)
    recorded = (run_dir / "config.sha256").read_text(encoding="utf-8").strip()
    if recorded != config.digest():
        raise ConfigError(f"{run_dir}: config.json was modified after the run started")
    return run_pipeline(config)


def _build_adapters(config: RunConfig, base_url: str) -> list[EngineAdapter]:
    adapters: list[EngineAdapter] = []
    for engine_id in config.engines:
        if engine_id.startswith("mock"):
            if config.corpus is None:
                raise ConfigError(f"engine {engine_id!r} needs a corpus file")
            corpus_path = Path(config.corpus)
            if corpus_path.is_dir():
                corpus_path = corpus_path / f"{engine_id}.json"
            adapters.append(
                MockEngine(
                    id=engine_id,
                    corpus=load_corpus(corpus_path),
                    base_url=base_url,
                    latency=config.mock_latency,
                )
            )
        else:
            adapters.append(engine_registry.make_adapter(engine_id))
    return adapters


def _load_replacements(config: RunConfig) -> ReplacementMap:
    path = Path(config.replacements) if config.replacements else DEFAULT_REPLACEMENTS
    return ReplacementMap.load(path)


def _embed_index(records: list[ImageRecord], backend: EmbeddingBackend, store_root: Path) -> FeatureArchive:
    ids, labels, rows = [], [], []
    for record in records:
        vector = embed_image(store_root / record.stored_path, record.sha256, backend, label=record.category_name)
        ids.append(vector.id)
        labels.append(record.category_name)
        rows.append(vector.values)
    matrix = np.vstack(rows) if rows else np.empty((0, backend.dim), dtype=np.float32)
    return FeatureArchive(dim=backend.dim, ids=ids, vectors=matrix, labels=labels)


def _rebuild_store(state: LearnerState, run: RunDirectory, upto: int, curated: bool) -> None:
    for t in range(1, upto + 1):
        archive = read_archive(run.features_path(t, curated=curated and run.features_path(t, curated=True).exists()))
        class_indices = np.asarray([state.registry.index_of(name) for name in archive.labels], dtype=np.int64)
        state.store.extend(archive.vectors, class_indices)


def _evaluate(state: LearnerState, manifest: StreamManifest, manifest_dir: Path, t: int) -> dict[int, tuple[int, int]]:
    results: dict[int, tuple[int, int]] = {}
    for j in range(1, t + 1):
        ref = manifest.test_refs.get(manifest.timesteps[j - 1].index)
        if ref is None:
            continue
        archive = read_archive((manifest_dir / ref) if not Path(ref).is_absolute() else ref)
        if archive.labels is None:
            raise StageError("eval", f"test archive {ref} has no labels")
        predictions = state.predict(archive.vectors.astype(np.float64))
        truth = [category_key(lbl) for lbl in archive.labels]
        correct = sum(1 for p, y in zip(predictions, truth) if p == y)
        results[j] = (correct, len(truth))
    return results


def run_pipeline(config: RunConfig) -> Path:
    """Execute (or resume) a full run; returns the run directory."""
    config.validate()
    manifest_path = Path(config.manifest)
    manifest = load_manifest(manifest_path)
    for position, timestep in enumerate(manifest.timesteps, start=1):
        if timestep.index != position:
            raise ConfigError("pipeline runs need contiguous timestep indices starting at 1")
    run = RunDirectory(config.out)
    _init_run_dir(run, config)

    replacements = _load_replacements(config)
    policy = ResizePolicy.parse(config.resize)
    cleaning = config.dedup or config.noise
    profile = BudgetProfile(kind=config.budget, reference_size=config.reference_size, batch_size=config.batch_size)
    budget = compute_budget(profile)
    train_config = TrainConfig(lr=config.lr, batch_size=config.batch_size, seed=config.seed)

    server: MockImageServer | None = None
    base_url = config.mock_base_url or ""
    needs_mock = any(e.startswith("mock") for e in config.engines)
    if needs_mock and not base_url:
        server = MockImageServer(port=config.mock_port).start()
        base_url = server.base_url

    state: LearnerState | None = None
    backend: EmbeddingBackend | None = None

    def ensure_backend() -> EmbeddingBackend:
        nonlocal backend
        if backend is None:
            backend = parse_backend(config.backend, archive_paths=config.features)
        return backend

    def ensure_state(previous_t: int) -> LearnerState:
        nonlocal state
        if state is None:
            state = LearnerState(
                dim=ensure_backend().dim, method=config.method, config=train_config, seed=config.seed
            )
            if previous_t >= 1:
                state = load_checkpoint(run.checkpoint_path(previous_t), config=train_config)
                _rebuild_store(state, run, previous_t, curated=cleaning)
        return state

    try:
        adapters = _build_adapters(config, base_url)
        store = ImageStore(run.path("store"))

        for position, timestep in enumerate(manifest.timesteps, start=1):
            stage = f"crawl_t{position}"
            if not run.is_done(stage):
                started = time.monotonic()
                plans = build_queries(timestep, config.engines, replacements, top_k=config.top_k)
                try:
                    link_manifest = crawl(plans, adapters, concurrency=config.crawl_workers)
                except WebclfError as exc:
                    raise StageError(stage, str(exc)) from exc
                link_manifest.save(run.links_path(position))
                run.path("links", f"t{position}.stats.json").write_text(
                    json.dumps(link_manifest.stats.to_dict(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8",
                )
                run.mark_done(stage)
                run.log_event(stage=stage, timestep=position, wall_ms=int(1000 * (time.monotonic() - started)))

            stage = f"download_t{position}"
            if not run.is_done(stage):
                started = time.monotonic()
                links = LinkManifest.load(run.links_path(position)).records
                try:
                    shards = download_all(
                        links, store, policy, parallelism=config.download_parallelism, timeout=config.timeout
                    )
                except WebclfError as exc:
                    raise StageError(stage, str(exc)) from exc
                export_link_manifest(links, shards, run.path("links", f"t{position}.export.jsonl"))
                run.mark_done(stage)
                run.log_event(stage=stage, timestep=position, wall_ms=int(1000 * (time.monotonic() - started)))

            stage = f"embed_t{position}"
            if not run.is_done(stage):
                started = time.monotonic()
                records = store.read_index(position)
                try:
                    archive = _embed_index(records, ensure_backend(), store.root)
                except WebclfError as exc:
                    raise StageError(stage, str(exc)) from exc
                write_archive(archive, run.features_path(position))
                run.mark_done(stage)
                run.log_event(stage=stage, timestep=position, wall_ms=int(1000 * (time.monotonic() - started)))

            if cleaning:
                stage = f"curate_t{position}"
                if not run.is_done(stage):
                    started = time.monotonic()
                    archive = read_archive(run.features_path(position))
                    try:
                        decision_vectors = archive.vectors
                        if config.cleaning_features:
                            # decisions in the dedicated cleaning space, joined by id
                            from .features import ArchiveLookupBackend

                            lookup = ArchiveLookupBackend(
                                [read_archive(p) for p in config.cleaning_features], id="cleaning"
                            )
                            decision_vectors = np.stack([lookup.lookup(i) for i in archive.ids])
                        kept, report = clean_pool(
                            decision_vectors,
                            archive.labels or [],
                            dedup=config.dedup,
                            dedup_threshold=config.dedup_threshold,
                            noise=config.noise,
                            noise_sim=config.noise_sim,
                            noise_fraction=config.noise_frac,
                        )
                    except WebclfError as exc:
                        raise StageError(stage, str(exc)) from exc
                    curated = FeatureArchive(
                        dim=archive.dim,
                        ids=[archive.ids[i] for i in kept],
                        vectors=archive.vectors[kept],
                        labels=[archive.labels[i] for i in kept],
                    )
                    write_archive(curated, run.features_path(position, curated=True))
                    report.save(run.path("curation", f"t{position}.json"))
                    run.mark_done(stage)
                    run.log_event(stage=stage, timestep=position, wall_ms=int(1000 * (time.monotonic() - started)))

            stage = f"train_t{position}"
            if not run.is_done(stage):
                started = time.monotonic()
                learner = ensure_state(position - 1)
                train_path = run.features_path(position, curated=cleaning)
                if not train_path.exists():
                    train_path = run.features_path(position)
                archive = read_archive(train_path)
                categories = [c.key for c in timestep.categories]
                try:
                    summary = learner.run_timestep(
                        categories, archive.vectors, [category_key(l) for l in archive.labels or []], budget
                    )
                except WebclfError as exc:
                    raise StageError(stage, str(exc)) from exc
                save_checkpoint(learner, run.checkpoint_path(position))
                run.mark_done(stage)
                run.log_event(
                    stage=stage,
                    timestep=position,
                    method=config.method,
                    iterations=summary["iterations"],
                    wall_ms=int(1000 * (time.monotonic() - started)),
                )

            stage = f"eval_t{position}"
            if not run.is_done(stage) and manifest.test_refs:
                started = time.monotonic()
                learner = ensure_state(position)
                try:
                    results = _evaluate(learner, manifest, manifest_path.parent, position)
                except WebclfError as exc:
                    raise StageError(stage, str(exc)) from exc
                run.eval_path(position).write_text(
                    json.dumps(
                        {"t": position, "results": {str(j): list(c) for j, c in sorted(results.items())}},
                        sort_keys=True,
                    )
                    + "\n",
                    encoding="utf-8",
                )
                run.mark_done(stage)
                run.log_event(stage=stage, timestep=position, wall_ms=int(1000 * (time.monotonic() - started)))

        if manifest.test_refs and not run.is_done("report"):
            matrix = EvalMatrix()
            for position in range(1, len(manifest.timesteps) + 1):
                doc = json.loads(run.eval_path(position).read_text(encoding="utf-8"))
                for j, (correct, total) in doc["results"].items():
                    matrix.record(position, int(j), correct, total)
            emit_report(
                matrix, run.path("report.json"), format="json",
                method=config.method, budget=config.budget, seed=config.seed,
            )
            emit_report(
                matrix, run.path("report.md"), format="markdown",
                method=config.method, budget=config.budget, seed=config.seed,
            )
            run.mark_done("report")
    finally:
        if server is not None:
            server.stop()

    return run.root


def build_eval_matrix(run_dir: str | Path, timesteps: int) -> EvalMatrix:
    """Reconstruct the evaluation matrix from a run's per-timestep files."""
    run = RunDirectory(run_dir)
    matrix = EvalMatrix()
    for t in range(1, timesteps + 1):
        doc = json.loads(run.eval_path(t).read_text(encoding="utf-8"))
        for j, (correct, total) in doc["results"].items():
            matrix.record(t, int(j), correct, total)
    return matrix
