"""Full boundary crossing: images downloaded by the consumer package,
features extracted here, then imported and trained on downstream purely
through the shared file formats."""

from __future__ import annotations

import json

import numpy as np

from featx.extract import ExtractorJob, extract


def test_download_extract_import_train(tmp_path, mock_server=None):
    from webclf.crawl import crawl
    from webclf.download import ImageStore, ResizePolicy, download_all
    from webclf.features import read_archive
    from webclf.learner import LearnerState, TrainConfig
    from webclf.mocknet import MockImageServer, MockEngine, make_cluster_corpus
    from webclf.queries import QueryPlan
    from webclf.stream import category_key

    classes = ["alpha", "beta"]
    corpus = make_cluster_corpus(classes, per_class=12, corpus_seed=21)
    with MockImageServer() as server:
        adapter = MockEngine(id="mock", corpus=corpus, base_url=server.base_url)
        plans = [
            QueryPlan(category_name=category_key(c), query_text=c, engine_id="mock", timestep=1)
            for c in classes
        ]
        links = crawl(plans, [adapter], concurrency=2).records
        store = ImageStore(tmp_path / "store")
        download_all(links, store, ResizePolicy.fixed(32, 32), parallelism=4)

    index = tmp_path / "store" / "index" / "t1.jsonl"
    out = tmp_path / "t1.c2cf"
    extract(ExtractorJob(index_path=str(index), backbone_id="tiny-gray-32",
                         out_path=str(out), batch_size=8))

    archive = read_archive(out)  # consumer side reads our output directly
    assert len(archive) == 24
    assert set(archive.labels) == {"alpha", "beta"}

    state = LearnerState(dim=archive.dim, method="knn",
                         config=TrainConfig(batch_size=16, seed=0), seed=0)
    state.run_timestep(["alpha", "beta"], archive.vectors, archive.labels, budget=None)
    predictions = state.predict(archive.vectors.astype(np.float64))
    train_accuracy = float(np.mean([p == y for p, y in zip(predictions, archive.labels)]))
    assert train_accuracy == 1.0  # self-retrieval through the whole file chain

    sidecar = json.loads((tmp_path / "t1.c2cf.json").read_text())
    assert sidecar["dim"] == archive.dim
