"""Deterministic web stand-ins for tests and offline runs.

The image server synthesizes every image from its URL alone, so any number
of processes serving the same paths produce identical bytes. Images are
coarse block grids whose block intensities encode a class mean plus noise;
pushed through the seeded projection backend they land in well-separated
Gaussian clusters, which gives end-to-end runs a known ground truth.
"""

from __future__ import annotations

import io
import json
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from .crawl import RawHit
from .queries import QueryPlan
from .stream import category_key

GRID = 8          # blocks per side; must match the projection backend's grid
BLOCK = 8         # pixels per block side
CLUSTER_AMP = 48.0    # intensity offset along each class direction
CLUSTER_SIGMA = 8.0   # per-block noise standard deviation
MOCK_EPOCH = 1_600_000_000


def _class_basis(corpus_seed: int) -> np.ndarray:
    """Orthonormal class directions in block space, fixed by the corpus seed."""
    cells = GRID * GRID
    rng = np.random.default_rng(corpus_seed)
    q, _ = np.linalg.qr(rng.standard_normal((cells, cells)))
    return q


def cluster_image_bytes(corpus_seed: int, class_index: int, noise_seed: int) -> bytes:
    """PNG bytes for one synthetic sample of one class, fully determined by
    the three integers."""
    cells = GRID * GRID
    basis = _class_basis(corpus_seed)
    noise = np.random.default_rng((corpus_seed, class_index, noise_seed)).standard_normal(cells)
    values = 128.0 + CLUSTER_AMP * basis[class_index % cells] + CLUSTER_SIGMA * noise
    blocks = np.clip(np.rint(values), 0, 255).astype(np.uint8).reshape(GRID, GRID)
    pixels = np.kron(blocks, np.ones((BLOCK, BLOCK), dtype=np.uint8))
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()


_IMG_PATH = re.compile(r"^/img/(\d+)/(\d+)/(\d+)\.png$")
_SLOW_PATH = re.compile(r"^/slow/(\d+)(/.*)$")


class _Handler(BaseHTTPRequestHandler):
    def do_GET(self):  # noqa: N802 (http.server API)
        path = self.path.split("?", 1)[0]
        slow = _SLOW_PATH.match(path)
        if slow:
            time.sleep(int(slow.group(1)) / 1000.0)
            path = slow.group(2)
        match = _IMG_PATH.match(path)
        if not match:
            self.send_error(404)
            return
        data = cluster_image_bytes(*(int(g) for g in match.groups()))
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):  # silence per-request stderr noise
        pass


class MockImageServer:
    """Threaded local HTTP server generating images on demand.

    Usable as a context manager; ``base_url`` is stable for the lifetime of
    the server. Pass ``port=0`` to grab any free port.
    """

    def __init__(self, port: int = 0):
        self._server = ThreadingHTTPServer(("127.0.0.1", port), _Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "MockImageServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockImageServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def image_url(base_url: str, corpus_seed: int, class_index: int, noise_seed: int) -> str:
    return f"{base_url}/img/{corpus_seed}/{class_index}/{noise_seed}.png"


def make_cluster_corpus(
    categories: list[str],
    per_class: int,
    corpus_seed: int,
    noise_offset: int = 0,
    timestamp_start: int = MOCK_EPOCH,
    timestamp_step: int = 3600,
) -> dict:
    """Corpus config mapping each category to deterministic hits.

    URLs are server-relative; an engine joins them onto its base URL. Class
    indices follow list order, so the same category list and seed always
    rebuild the same corpus.
    """
    corpus: dict = {}
    for class_index, name in enumerate(categories):
        hits = []
        for i in range(per_class):
            noise_seed = noise_offset + i
            hits.append(
                {
                    "url": f"/img/{corpus_seed}/{class_index}/{noise_seed}.png",
                    "timestamp": timestamp_start + (class_index * per_class + i) * timestamp_step,
                    "payload_seed": noise_seed,
                }
            )
        corpus[name] = hits
    return corpus


def save_corpus(corpus: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(corpus, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def make_test_archive(
    categories: list[str],
    per_class: int,
    corpus_seed: int,
    backend,
    path: str | Path,
    noise_offset: int = 1_000_000,
    class_indices: list[int] | None = None,
):
    """Labeled feature archive of held-out samples from the same clusters.

    ``class_indices`` are the cluster directions each category was generated
    with (defaults to list position, matching a corpus built from the same
    category list); ``noise_offset`` keeps test noise seeds disjoint from any
    training corpus built with small offsets.
    """
    from .features import FeatureArchive, write_archive

    if class_indices is None:
        class_indices = list(range(len(categories)))
    ids, labels, rows = [], [], []
    for class_index, name in zip(class_indices, categories):
        for i in range(per_class):
            noise_seed = noise_offset + i
            data = cluster_image_bytes(corpus_seed, class_index, noise_seed)
            rows.append(backend.embed_bytes(data))
            ids.append(f"test-{class_index}-{noise_seed}")
            labels.append(category_key(name))
    matrix = np.vstack(rows)
    archive = FeatureArchive(dim=backend.dim, ids=ids, vectors=matrix, labels=labels)
    write_archive(archive, path)
    return archive


@dataclass
class MockEngine:
    """Deterministic engine adapter backed by a corpus config.

    Relevance order is corpus order. Entries flagged ``"unsafe": true`` are
    withheld whenever the plan asks for safe search. An optional per-query
    latency emulates slow engines for concurrency tests.
    """

    id: str
    corpus: dict
    base_url: str = ""
    supports_time_filter: bool = True
    rate_limit: float = 1000.0
    latency: float = 0.0

    def __post_init__(self):
        self.corpus = {category_key(name): hits for name, hits in self.corpus.items()}

    def clock(self) -> int:
        # Deterministic stand-in for wall-clock query time.
        return MOCK_EPOCH

    def query(self, plan: QueryPlan) -> list[RawHit]:
        if self.latency:
            time.sleep(self.latency)
        hits = []
        for entry in self.corpus.get(plan.category_name, []):
            if plan.safe_search and entry.get("unsafe"):
                continue
            if plan.time_range is not None:
                ts = entry.get("timestamp")
                if ts is None or not plan.time_range[0] <= ts <= plan.time_range[1]:
                    continue
            url = entry["url"]
            if url.startswith("/"):
                url = self.base_url + url
            hits.append(RawHit(url=url, timestamp=entry.get("timestamp")))
        return hits
