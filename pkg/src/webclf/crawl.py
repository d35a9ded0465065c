"""Concurrent multi-engine query execution and link aggregation.

Each engine gets its own FIFO work queue, a fixed worker pool, and a token
bucket capping its request rate. Results aggregate into a deterministic,
URL-deduplicated link manifest regardless of scheduling order.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence
from urllib.parse import urlsplit

from .errors import CrawlError, PlanRejected
from .queries import QueryPlan

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawHit:
    """One engine result in relevance order; timestamp is engine metadata."""

    url: str
    timestamp: int | None = None


@dataclass(frozen=True)
class LinkRecord:
    url: str
    engine_id: str
    category_name: str
    timestep: int
    rank: int
    queried_at: int
    timestamp: int | None = None

    def to_json(self) -> dict:
        doc = {
            "url": self.url,
            "engine": self.engine_id,
            "category": self.category_name,
            "timestep": self.timestep,
            "rank": self.rank,
            "queried_at": self.queried_at,
        }
        if self.timestamp is not None:
            doc["timestamp"] = self.timestamp
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "LinkRecord":
        return cls(
            url=doc["url"],
            engine_id=doc["engine"],
            category_name=doc["category"],
            timestep=int(doc["timestep"]),
            rank=int(doc["rank"]),
            queried_at=int(doc["queried_at"]),
            timestamp=doc.get("timestamp"),
        )


class EngineAdapter(Protocol):
    """Behavioral contract every engine implementation satisfies."""

    id: str
    supports_time_filter: bool
    rate_limit: float  # max requests per second

    def query(self, plan: QueryPlan) -> list[RawHit]: ...


class TokenBucket:
    """Blocking rate limiter: at most ``rate`` acquisitions per second."""

    def __init__(self, rate: float, burst: float | None = None):
        self.rate = max(rate, 1e-9)
        self.capacity = burst if burst is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


def _valid_url(url: str) -> bool:
    parts = urlsplit(url)
    return parts.scheme in ("http", "https") and bool(parts.netloc)


def search(adapter: EngineAdapter, plan: QueryPlan, limiter: TokenBucket | None = None) -> list[LinkRecord]:
    """Execute one plan against its engine, enforcing the plan's constraints."""
    if plan.engine_id != adapter.id:
        raise PlanRejected(f"plan targets {plan.engine_id!r}, adapter is {adapter.id!r}")
    if plan.time_range is not None and not adapter.supports_time_filter:
        raise PlanRejected(f"engine {adapter.id!r} does not support time-filtered queries")
    if limiter is not None:
        limiter.acquire()

    hits = adapter.query(plan)
    if plan.top_k is not None:
        hits = hits[: plan.top_k]
    queried_at = getattr(adapter, "clock", None)
    records = []
    for rank, hit in enumerate(hits, start=1):
        if not _valid_url(hit.url):
            log.debug("dropping malformed url from %s: %r", adapter.id, hit.url)
            continue
        records.append(
            LinkRecord(
                url=hit.url,
                engine_id=adapter.id,
                category_name=plan.category_name,
                timestep=plan.timestep,
                rank=rank,
                queried_at=queried_at() if callable(queried_at) else int(time.time()),
                timestamp=hit.timestamp,
            )
        )
    return records


@dataclass
class CrawlStats:
    per_engine: dict[str, int] = field(default_factory=dict)
    per_category: dict[str, int] = field(default_factory=dict)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (plan description, reason)
    duplicate_urls: int = 0

    def to_dict(self) -> dict:
        return {
            "per_engine": dict(sorted(self.per_engine.items())),
            "per_category": dict(sorted(self.per_category.items())),
            "failures": sorted(list(f) for f in self.failures),  # stable across scheduling
            "duplicate_urls": self.duplicate_urls,
        }


@dataclass
class LinkManifest:
    records: list[LinkRecord]
    stats: CrawlStats = field(default_factory=CrawlStats)

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LinkManifest":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(LinkRecord.from_json(json.loads(line)))
        return cls(records=records)


def _dedup_and_order(records: list[LinkRecord], stats: CrawlStats) -> list[LinkRecord]:
    """Per-category URL dedup: lowest rank wins, ties go to the
    lexicographically first engine. Output order is canonical, independent
    of completion order."""
    best: dict[tuple[str, str], LinkRecord] = {}
    for record in records:
        key = (record.category_name, record.url)
        held = best.get(key)
        if held is None or (record.rank, record.engine_id) < (held.rank, held.engine_id):
            best[key] = record
    stats.duplicate_urls = len(records) - len(best)
    ordered = sorted(
        best.values(),
        key=lambda r: (r.timestep, r.category_name, r.rank, r.engine_id, r.url),
    )
    for record in ordered:
        stats.per_category[record.category_name] = stats.per_category.get(record.category_name, 0) + 1
    return ordered


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff_base: float = 1.0  # seconds; doubles per retry


def crawl(
    plans: Sequence[QueryPlan],
    adapters: Iterable[EngineAdapter],
    concurrency: int = 4,
    retry: RetryPolicy | None = None,
) -> LinkManifest:
    """Run all plans with per-engine worker pools; returns a complete manifest.

    Individual plan failures are recorded, not fatal; the call only raises
    when every plan failed.
    """
    retry = retry or RetryPolicy()
    by_id = {adapter.id: adapter for adapter in adapters}
    missing = sorted({p.engine_id for p in plans} - set(by_id))
    if missing:
        raise CrawlError(f"no adapter for engines: {missing}")

    queues: dict[str, queue.Queue] = {eid: queue.Queue() for eid in by_id}
    limiters = {eid: TokenBucket(by_id[eid].rate_limit) for eid in by_id}
    for plan in plans:
        queues[plan.engine_id].put(plan)

    results: list[LinkRecord] = []
    stats = CrawlStats(per_engine={eid: 0 for eid in sorted(by_id)})
    lock = threading.Lock()

    def worker(engine_id: str) -> None:
        adapter = by_id[engine_id]
        task_queue = queues[engine_id]
        while True:
            try:
                plan = task_queue.get_nowait()
            except queue.Empty:
                return
            last_error: Exception | None = None
            records: list[LinkRecord] | None = None
            for attempt in range(retry.attempts):
                try:
                    records = search(adapter, plan, limiter=limiters[engine_id])
                    break
                except PlanRejected as exc:
                    last_error = exc
                    break  # not retryable
                except Exception as exc:
                    last_error = exc
                    if attempt + 1 < retry.attempts:
                        time.sleep(retry.backoff_base * (2**attempt))
            with lock:
                if records is not None:
                    results.extend(records)
                    stats.per_engine[engine_id] += len(records)
                else:
                    stats.failures.append(
                        (f"{engine_id}:{plan.query_text}", str(last_error))
                    )

    threads = []
    for engine_id in sorted(by_id):
        for _ in range(max(1, concurrency)):
            thread = threading.Thread(target=worker, args=(engine_id,), daemon=True)
            thread.start()
            threads.append(thread)
    for thread in threads:
        thread.join()

    if plans and len(stats.failures) == len(plans):
        raise CrawlError(f"all {len(plans)} plans failed; first: {stats.failures[0][1]}")

    ordered = _dedup_and_order(results, stats)
    return LinkManifest(records=ordered, stats=stats)


@dataclass
class TimeFilterResult:
    records: list[LinkRecord]
    dropped_missing: int = 0
    dropped_outside: int = 0


def filter_links_by_time(records: Sequence[LinkRecord], time_range: tuple[int, int]) -> TimeFilterResult:
    """Keep records whose engine timestamp falls inside [start, end].

    Records without a timestamp cannot be placed and are dropped (counted
    separately from out-of-range drops).
    """
    start, end = time_range
    kept: list[LinkRecord] = []
    missing = outside = 0
    for record in records:
        if record.timestamp is None:
            missing += 1
        elif start <= record.timestamp <= end:
            kept.append(record)
        else:
            outside += 1
    return TimeFilterResult(records=kept, dropped_missing=missing, dropped_outside=outside)
