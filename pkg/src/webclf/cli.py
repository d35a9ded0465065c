"""Command-line entry point.

Each pipeline stage is independently invocable for debugging; ``run`` chains
them end to end over a config file, and ``resume`` picks up an interrupted
run directory. Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .crawl import LinkManifest, crawl
from .curation import clean_pool
from .download import ImageStore, ResizePolicy, download_all, export_link_manifest
from .errors import ConfigError, StageError, WebclfError
from .features import FeatureArchive, parse_backend, read_archive, write_archive
from .learner import BudgetProfile, LearnerState, TrainConfig, compute_budget
from .metrics import emit_report
from .pipeline import RunConfig, RunDirectory, build_eval_matrix, resume, run_pipeline, DEFAULT_REPLACEMENTS
from .queries import ReplacementMap, build_queries
from .stream import load_manifest, validate, manifest_from_dict

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_common_crawl_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--engines", nargs="+", default=["mock"], help="engine ids (mock* or real adapters)")
    p.add_argument("--corpus", help="mock corpus JSON (file, or directory of <engine>.json)")
    p.add_argument("--top-k", type=int, default=None, help="per-engine result cap (default unlimited)")
    p.add_argument("--replacements", help="replacement map JSON", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="webclf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    stream = sub.add_parser("stream", help="manifest tooling")
    stream_sub = stream.add_subparsers(dest="stream_command", required=True)
    stream_validate = stream_sub.add_parser("validate", help="check a manifest's invariants")
    stream_validate.add_argument("--manifest", required=True)

    crawl_p = sub.add_parser("crawl", help="run queries for one timestep of a manifest")
    crawl_p.add_argument("--manifest", required=True)
    crawl_p.add_argument("--timestep", type=int, default=1)
    crawl_p.add_argument("--out", required=True, help="output links JSONL")
    crawl_p.add_argument("--workers", type=int, default=4)
    crawl_p.add_argument("--mock-base-url", default="", help="base URL joined onto relative corpus URLs")
    _add_common_crawl_flags(crawl_p)

    dl = sub.add_parser("download", help="fetch a links JSONL into an image store")
    dl.add_argument("--links", required=True)
    dl.add_argument("--out", required=True, help="image store root")
    dl.add_argument("--resize", default="max-side:512")
    dl.add_argument("--parallelism", type=int, default=8)
    dl.add_argument("--timeout", type=float, default=10.0)
    dl.add_argument("--export", help="write shippable link manifest (with sha256) here")

    imp = sub.add_parser("extract-import", help="join external feature archives onto an image index")
    imp.add_argument("--index", required=True, help="per-timestep image index JSONL")
    imp.add_argument("--features", nargs="+", required=True, help="externally produced archives")
    imp.add_argument("--out", required=True, help="output labeled archive")

    cur = sub.add_parser("curate", help="clean a labeled feature archive")
    cur.add_argument("--features", required=True)
    cur.add_argument("--out", required=True)
    cur.add_argument("--report", help="write the cleaning report JSON here")
    cur.add_argument("--dedup", action="store_true")
    cur.add_argument("--dedup-threshold", type=float, default=0.99)
    cur.add_argument("--noise", action="store_true")
    cur.add_argument("--noise-sim", type=float, default=0.2)
    cur.add_argument("--noise-frac", type=float, default=0.5)

    train = sub.add_parser("train", help="train over per-timestep labeled archives")
    train.add_argument("--features", nargs="+", required=True, help="archives in timestep order")
    train.add_argument("--method", choices=("linear", "mlp", "ncm", "knn"), default="linear")
    train.add_argument("--budget", choices=("tight", "normal", "relaxed"), default="normal")
    train.add_argument("--reference-size", type=int, required=True)
    train.add_argument("--batch-size", type=int, default=512)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True, help="checkpoint directory")

    ev = sub.add_parser("eval", help="rebuild the report from a run directory's eval files")
    ev.add_argument("--run", required=True)
    ev.add_argument("--timesteps", type=int, required=True)
    ev.add_argument("--method", default="")
    ev.add_argument("--budget", default="")
    ev.add_argument("--seed", type=int, default=0)

    run_p = sub.add_parser("run", help="end-to-end pipeline from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--manifest")
    run_p.add_argument("--out")
    run_p.add_argument("--method")
    run_p.add_argument("--budget")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--top-k", type=int, dest="top_k")
    run_p.add_argument("--backend")

    res = sub.add_parser("resume", help="continue an interrupted run directory")
    res.add_argument("--run", required=True)

    return parser


def _cmd_stream_validate(args) -> int:
    doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    try:
        manifest = manifest_from_dict(doc)
    except WebclfError as exc:
        print(f"INVALID: {exc}")
        return EXIT_CONFIG
    report = validate(manifest)
    if report.ok():
        print(f"OK: {manifest.name}: {len(manifest.timesteps)} timesteps, setting={manifest.setting}")
        return EXIT_OK
    for violation in report.violations:
        print(f"timestep={violation.timestep} field={violation.field}: {violation.message}")
    return EXIT_CONFIG


def _cmd_crawl(args) -> int:
    from .pipeline import _build_adapters  # shared adapter construction

    manifest = load_manifest(args.manifest)
    positions = {ts.index: ts for ts in manifest.timesteps}
    if args.timestep not in positions:
        raise ConfigError(f"manifest has no timestep {args.timestep}")
    replacements = ReplacementMap.load(args.replacements or DEFAULT_REPLACEMENTS)
    plans = build_queries(positions[args.timestep], args.engines, replacements, top_k=args.top_k)
    config = RunConfig(
        manifest=args.manifest, out=".", engines=args.engines, corpus=args.corpus,
        mock_base_url=args.mock_base_url or None,
    )
    adapters = _build_adapters(config, args.mock_base_url)
    manifest_links = crawl(plans, adapters, concurrency=args.workers)
    manifest_links.save(args.out)
    print(f"{len(manifest_links)} records -> {args.out}")
    return EXIT_OK


def _cmd_download(args) -> int:
    links = LinkManifest.load(args.links).records
    store = ImageStore(args.out)
    shards = download_all(
        links, store, ResizePolicy.parse(args.resize),
        parallelism=args.parallelism, timeout=args.timeout,
    )
    stored = sum(len(s.records) for s in shards)
    failed = sum(len(s.failures) for s in shards)
    if args.export:
        export_link_manifest(links, shards, args.export)
    print(f"{stored} stored, {failed} failed/collapsed across {len(shards)} timesteps")
    return EXIT_OK


def _cmd_extract_import(args) -> int:
    store_root = Path(args.index).resolve().parent.parent
    records = []
    with open(args.index, encoding="utf-8") as fh:
        from .download import ImageRecord

        for line in fh:
            if line.strip():
                records.append(ImageRecord.from_json(json.loads(line)))
    backend = parse_backend("archive", archive_paths=args.features)
    ids, labels, rows = [], [], []
    for record in records:
        rows.append(backend.lookup(record.sha256))
        ids.append(record.sha256)
        labels.append(record.category_name)
    matrix = np.vstack(rows) if rows else np.empty((0, backend.dim), dtype=np.float32)
    write_archive(FeatureArchive(dim=backend.dim, ids=ids, vectors=matrix, labels=labels), args.out)
    print(f"{len(ids)} vectors -> {args.out} (store root assumed {store_root})")
    return EXIT_OK


def _cmd_curate(args) -> int:
    archive = read_archive(args.features)
    kept, report = clean_pool(
        archive.vectors,
        archive.labels or [],
        dedup=args.dedup,
        dedup_threshold=args.dedup_threshold,
        noise=args.noise,
        noise_sim=args.noise_sim,
        noise_fraction=args.noise_frac,
    )
    cleaned = FeatureArchive(
        dim=archive.dim,
        ids=[archive.ids[i] for i in kept],
        vectors=archive.vectors[kept],
        labels=[archive.labels[i] for i in kept] if archive.labels else None,
    )
    write_archive(cleaned, args.out)
    if args.report:
        report.save(args.report)
    print(f"kept {report.kept_count}/{report.input_count} "
          f"({report.duplicate_count} duplicates, {report.noisy_count} noisy)")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .stream import category_key

    profile = BudgetProfile(kind=args.budget, reference_size=args.reference_size, batch_size=args.batch_size)
    budget = compute_budget(profile)
    state: LearnerState | None = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for position, path in enumerate(args.features, start=1):
        archive = read_archive(path)
        if archive.labels is None:
            raise ConfigError(f"{path}: training archives must be labeled")
        if state is None:
            state = LearnerState(
                dim=archive.dim, method=args.method,
                config=TrainConfig(batch_size=args.batch_size, seed=args.seed), seed=args.seed,
            )
        labels = [category_key(l) for l in archive.labels]
        categories = sorted(set(labels), key=labels.index)
        summary = state.run_timestep(categories, archive.vectors, labels, budget)
        save_checkpoint(state, out / f"t{position}.bin")
        print(f"t{position}: {summary['classes']} classes, {summary['iterations']} iterations, "
              f"store={summary['store_size']}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    matrix = build_eval_matrix(args.run, args.timesteps)
    run = RunDirectory(args.run)
    emit_report(matrix, run.path("report.json"), format="json",
                method=args.method, budget=args.budget, seed=args.seed)
    emit_report(matrix, run.path("report.md"), format="markdown",
                method=args.method, budget=args.budget, seed=args.seed)
    print(json.dumps(json.loads((run.root / "report.json").read_text()), indent=2))
    return EXIT_OK


def _cmd_run(args) -> int:
    config = RunConfig.load(args.config)
    for key in ("manifest", "out", "method", "budget", "seed", "top_k", "backend"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    config.validate()
    run_dir = run_pipeline(config)
    report = run_dir / "report.json"
    if report.exists():
        print(report.read_text(encoding="utf-8").rstrip())
    print(f"run complete: {run_dir}")
    return EXIT_OK


def _cmd_resume(args) -> int:
    run_dir = resume(args.run)
    print(f"run complete: {run_dir}")
    return EXIT_OK


COMMANDS = {
    ("stream", "validate"): _cmd_stream_validate,
    ("crawl",): _cmd_crawl,
    ("download",): _cmd_download,
    ("extract-import",): _cmd_extract_import,
    ("curate",): _cmd_curate,
    ("train",): _cmd_train,
    ("eval",): _cmd_eval,
    ("run",): _cmd_run,
    ("resume",): _cmd_resume,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    key = (args.command,) if args.command != "stream" else (args.command, args.stream_command)
    try:
        return COMMANDS[key](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_STAGE
    except WebclfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
