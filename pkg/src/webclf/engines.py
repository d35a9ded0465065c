"""Best-effort adapters for public image search engines.

These talk to live, terms-of-service-bound endpoints whose markup changes
without notice; they are provided for interactive use, are not exercised in
CI, and may need maintenance at any time. The deterministic mock engine is
the supported test substrate.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field

import requests

from .crawl import RawHit
from .errors import CrawlError
from .queries import QueryPlan

log = logging.getLogger(__name__)

USER_AGENT = "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/120.0 Safari/537.36"


def _session() -> requests.Session:
    session = requests.Session()
    session.headers["User-Agent"] = USER_AGENT
    return session


@dataclass
class BingImages:
    id: str = "bing"
    supports_time_filter: bool = False
    rate_limit: float = 1.0
    _session: requests.Session = field(default_factory=_session, repr=False)

    def query(self, plan: QueryPlan) -> list[RawHit]:
        params = {
            "q": plan.query_text,
            "first": 1,
            "count": min(plan.top_k or 150, 150),
            "adlt": "strict" if plan.safe_search else "off",
        }
        response = self._session.get("https://www.bing.com/images/async", params=params, timeout=15)
        response.raise_for_status()
        urls = re.findall(r'murl&quot;:&quot;(.*?)&quot;', response.text)
        return [RawHit(url=u.encode().decode("unicode_escape")) for u in urls]


@dataclass
class GoogleImages:
    id: str = "google"
    supports_time_filter: bool = False
    rate_limit: float = 0.5
    _session: requests.Session = field(default_factory=_session, repr=False)

    def query(self, plan: QueryPlan) -> list[RawHit]:
        params = {"q": plan.query_text, "tbm": "isch", "safe": "active" if plan.safe_search else "off"}
        response = self._session.get("https://www.google.com/search", params=params, timeout=15)
        response.raise_for_status()
        urls = re.findall(r'\["(https?://[^"]+?\.(?:jpg|jpeg|png|gif))",\d+,\d+\]', response.text)
        return [RawHit(url=u) for u in urls]


@dataclass
class DuckDuckGoImages:
    id: str = "duckduckgo"
    supports_time_filter: bool = False
    rate_limit: float = 1.0
    _session: requests.Session = field(default_factory=_session, repr=False)

    def query(self, plan: QueryPlan) -> list[RawHit]:
        front = self._session.get("https://duckduckgo.com/", params={"q": plan.query_text}, timeout=15)
        match = re.search(r'vqd=([\d-]+)&', front.text) or re.search(r'vqd="([\d-]+)"', front.text)
        if not match:
            raise CrawlError("duckduckgo: could not obtain vqd token")
        params = {
            "l": "us-en",
            "o": "json",
            "q": plan.query_text,
            "vqd": match.group(1),
            "p": "1" if plan.safe_search else "-1",
        }
        response = self._session.get("https://duckduckgo.com/i.js", params=params, timeout=15)
        response.raise_for_status()
        return [RawHit(url=item["image"]) for item in response.json().get("results", [])]


@dataclass
class FlickrSearch:
    """Uses the public REST API; set FLICKR_API_KEY. Supports timestamp filters."""

    id: str = "flickr"
    supports_time_filter: bool = True
    rate_limit: float = 1.0
    api_key: str = field(default_factory=lambda: os.environ.get("FLICKR_API_KEY", ""))
    _session: requests.Session = field(default_factory=_session, repr=False)

    def query(self, plan: QueryPlan) -> list[RawHit]:
        if not self.api_key:
            raise CrawlError("flickr: FLICKR_API_KEY not set")
        params = {
            "method": "flickr.photos.search",
            "api_key": self.api_key,
            "text": plan.query_text,
            "safe_search": 1 if plan.safe_search else 3,
            "per_page": min(plan.top_k or 500, 500),
            "extras": "url_m,date_upload",
            "format": "json",
            "nojsoncallback": 1,
            "sort": "relevance",
        }
        if plan.time_range is not None:
            params["min_upload_date"], params["max_upload_date"] = plan.time_range
        response = self._session.get("https://api.flickr.com/services/rest/", params=params, timeout=15)
        response.raise_for_status()
        doc = response.json()
        if doc.get("stat") != "ok":
            raise CrawlError(f"flickr: {doc.get('message', 'unknown error')}")
        hits = []
        for photo in doc["photos"]["photo"]:
            url = photo.get("url_m")
            if url:
                stamp = photo.get("dateupload")
                hits.append(RawHit(url=url, timestamp=int(stamp) if stamp else None))
        return hits


ADAPTERS = {
    "bing": BingImages,
    "google": GoogleImages,
    "duckduckgo": DuckDuckGoImages,
    "flickr": FlickrSearch,
}


def make_adapter(engine_id: str):
    try:
        return ADAPTERS[engine_id]()
    except KeyError:
        raise CrawlError(f"unknown engine {engine_id!r}; known: {sorted(ADAPTERS)} or mock*") from None
