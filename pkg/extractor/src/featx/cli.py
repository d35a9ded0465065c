"""featx command line: extract features, verify archives, rebuild the tiny
test checkpoint."""

from __future__ import annotations

import argparse
import sys

from .backbones import BackboneError, CHECKPOINT_DIR, make_tiny_checkpoint
from .extract import ExtractorJob, ExtractionError, extract, verify_archive


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="embed an image index through a frozen backbone")
    ex.add_argument("--index", required=True, help="image index JSONL")
    ex.add_argument("--backbone", required=True, help="backbone id (e.g. tiny-gray-32)")
    ex.add_argument("--batch", type=int, default=64)
    ex.add_argument("--out", required=True, help="output archive path")
    ex.add_argument("--device", default="cpu")
    ex.add_argument("--store-root", default=None, help="image store root (default: from index location)")

    ver = sub.add_parser("verify", help="check an archive against its image index")
    ver.add_argument("--archive", required=True)
    ver.add_argument("--index", required=True)

    tiny = sub.add_parser("make-tiny", help="regenerate the packaged tiny checkpoint")
    tiny.add_argument("--out", default=str(CHECKPOINT_DIR / "tiny-gray-32.pt"))

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            job = ExtractorJob(
                index_path=args.index,
                backbone_id=args.backbone,
                out_path=args.out,
                batch_size=args.batch,
                device=args.device,
                store_root=args.store_root,
            )
            path = extract(job)
            print(f"archive written: {path} (+ {path}.json sidecar)")
            return 0
        if args.command == "verify":
            report = verify_archive(args.archive, args.index)
            if report.ok():
                print("OK: archive consistent with index")
                return 0
            for violation in report.violations:
                print(violation)
            return 1
        if args.command == "make-tiny":
            path = make_tiny_checkpoint(args.out)
            print(f"checkpoint written: {path}")
            return 0
    except (BackboneError, ExtractionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
