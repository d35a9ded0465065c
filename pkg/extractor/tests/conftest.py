from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image


@pytest.fixture()
def image_store(tmp_path):
    """A small content-addressed store plus its index JSONL, as produced by
    the downloader: store/images/<2-hex>/<sha>.png and store/index/t1.jsonl."""
    root = tmp_path / "store"
    rng = np.random.default_rng(17)
    entries = []
    for i in range(10):
        pixels = rng.integers(0, 256, size=(48, 48), dtype=np.uint8)
        buf = io.BytesIO()
        Image.fromarray(pixels, mode="L").save(buf, format="PNG")
        data = buf.getvalue()
        sha = hashlib.sha256(data).hexdigest()
        rel = Path("images") / sha[:2] / f"{sha}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        (root / rel).write_bytes(data)
        entries.append(
            {
                "sha256": sha,
                "source_url": f"http://example.test/{i}.png",
                "category": f"class{i % 2}",
                "timestep": 1,
                "width": 48,
                "height": 48,
                "stored_path": str(rel),
            }
        )
    index = root / "index" / "t1.jsonl"
    index.parent.mkdir(parents=True, exist_ok=True)
    index.write_text("".join(json.dumps(e) + "\n" for e in entries), encoding="utf-8")
    return root, index, entries
