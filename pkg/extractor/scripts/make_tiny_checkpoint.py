#!/usr/bin/env python3
"""Regenerate the packaged tiny checkpoint (fixed seed, CPU-only)."""

from featx.backbones import CHECKPOINT_DIR, make_tiny_checkpoint

if __name__ == "__main__":
    path = make_tiny_checkpoint(CHECKPOINT_DIR / "tiny-gray-32.pt")
    print(f"wrote {path}")
