"""Acceptance: the extractor's output must be consumable by the downstream
package bit-for-bit (its reader is the conformance oracle for the archive
format), and extraction must be exactly repeatable."""

from __future__ import annotations

from featx.extract import ExtractorJob, extract, verify_archive


def test_archive_conformance_against_consumer(image_store, tmp_path):
    from webclf.features import read_archive  # the consumer-side reader

    root, index, entries = image_store
    out = tmp_path / "t1.c2cf"
    extract(ExtractorJob(index_path=str(index), backbone_id="tiny-gray-32",
                         out_path=str(out), batch_size=4))

    archive = read_archive(out)
    assert archive.dim == 32
    assert len(archive) == 10

    # ids join the image index 1:1
    index_ids = [e["sha256"] for e in entries]
    assert archive.ids == index_ids
    assert archive.labels == [e["category"] for e in entries]

    report = verify_archive(out, index)
    assert report.ok(), report.violations
    print("[PASS] archive conformance: consumer read_archive + verify_archive clean")


def test_extraction_determinism(image_store, tmp_path):
    root, index, _ = image_store
    a, b = tmp_path / "a.c2cf", tmp_path / "b.c2cf"
    extract(ExtractorJob(index_path=str(index), backbone_id="tiny-gray-32",
                         out_path=str(a), batch_size=10))
    extract(ExtractorJob(index_path=str(index), backbone_id="tiny-gray-32",
                         out_path=str(b), batch_size=10))

    from featx.archive import read_records

    _, ids_a, vec_a, _ = read_records(a)
    _, ids_b, vec_b, _ = read_records(b)
    assert ids_a == ids_b
    assert vec_a.tobytes() == vec_b.tobytes()  # bitwise-identical vectors
    print("[PASS] extraction determinism: repeated runs bitwise identical")
