"""Byte-level contract of the dump writer and manifest writer."""

import hashlib
import json
import struct

import numpy as np
import pytest

from shield_extractor.dump_format import (
    MAGIC,
    VERSION,
    DumpRecord,
    check_record,
    content_hash,
    dump_bytes,
    read_header,
    write_dump_atomic,
    write_manifest,
)
from shield_extractor.errors import SourceDataError


def tiny_record(**overrides) -> DumpRecord:
    fields = dict(
        id="t-0",
        label=1,
        grid_rows=1,
        grid_cols=2,
        prompt_len=5,
        text_range=(2, 3),
        patch_range=(0, 1),
        token_embeddings=np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
        patch_embeddings=np.array([[0.5, -0.5, 0.25], [1.5, 2.5, -1.25]]),
        state=np.array([9.0, 8.0, 7.0]),
        attention=np.full((5, 5), 0.2),
        raw_text="tiny text",
    )
    fields.update(overrides)
    return DumpRecord(**fields)


def test_byte_layout_matches_hand_construction():
    rec = tiny_record()
    # independent construction of the expected bytes, field by field
    header = {
        "id": "t-0", "label": 1, "n_t": 2, "d_t": 3, "n_v": 2, "d_v": 3,
        "grid_rows": 1, "grid_cols": 2, "d_sp": 3, "n": 5,
        "text_range": [2, 3], "patch_range": [0, 1], "raw_text": "tiny text",
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(
        np.asarray(a, dtype="<f4").tobytes(order="C")
        for a in (rec.token_embeddings, rec.patch_embeddings, rec.state, rec.attention))
    expected = MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload
    assert dump_bytes(rec) == expected


def test_written_file_parses_back(tmp_path):
    rec = tiny_record()
    path = tmp_path / "t.shd"
    write_dump_atomic(rec, path)
    data = path.read_bytes()
    assert data == dump_bytes(rec)
    header = read_header(path)
    assert header["id"] == "t-0"
    assert header["raw_text"] == "tiny text"
    # payload arrays recoverable at the documented offsets
    header_len = struct.unpack("<II", data[4:12])[1]
    flat = np.frombuffer(data[12 + header_len:], dtype="<f4")
    assert np.array_equal(flat[:6].reshape(2, 3), [[1, 2, 3], [4, 5, 6]])
    assert not list(tmp_path.glob("*.tmp"))


def test_atomic_write_replaces_existing(tmp_path):
    path = tmp_path / "t.shd"
    write_dump_atomic(tiny_record(), path)
    write_dump_atomic(tiny_record(raw_text="other text"), path)
    assert read_header(path)["raw_text"] == "other text"
    assert not list(tmp_path.glob("*.tmp"))


@pytest.mark.parametrize("mutation, fragment", [
    (dict(prompt_len=4), "attention shape"),
    (dict(grid_rows=3), "does not cover"),
    (dict(text_range=(1, 2)), "overlap"),
    (dict(text_range=(2, 4)), "does not span"),
    (dict(patch_range=(-1, 0)), "does not span"),
    (dict(label=2), "label"),
    (dict(attention=np.full((5, 5), -0.1)), "negative"),
    (dict(state=np.array([np.nan, 1.0, 2.0])), "non-finite"),
])
def test_check_record_flags_bad_records(mutation, fragment):
    problems = check_record(tiny_record(**mutation))
    assert any(fragment in p for p in problems), problems


def test_writer_refuses_invalid_record():
    with pytest.raises(SourceDataError, match="refusing to write"):
        dump_bytes(tiny_record(label=5))


def test_valid_record_has_no_violations():
    assert check_record(tiny_record()) == []


def test_content_hash_is_text_keyed_blake2b():
    expected = hashlib.blake2b(b"text:" + "some meme text".encode(), digest_size=8)
    assert content_hash("some meme text") == expected.hexdigest()
    assert content_hash("some meme text") != content_hash("other meme text")


def test_read_header_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.shd"
    bad.write_bytes(b"not a dump at all")
    with pytest.raises(SourceDataError, match="not a dump"):
        read_header(bad)

    truncated = tmp_path / "trunc.shd"
    truncated.write_bytes(dump_bytes(tiny_record())[:40])
    with pytest.raises(SourceDataError):
        read_header(truncated)

    short_payload = tmp_path / "short.shd"
    short_payload.write_bytes(dump_bytes(tiny_record())[:-8])
    with pytest.raises(SourceDataError, match="payload size"):
        read_header(short_payload)


def test_manifest_rows_and_determinism(tmp_path):
    entries = [
        {"split": "train", "path": "train/a.shd", "id": "a", "content_hash": content_hash("a")},
        {"split": "test", "path": "test/b.shd", "id": "b", "content_hash": content_hash("b")},
    ]
    path = tmp_path / "manifest.jsonl"
    write_manifest(entries, path)
    first = path.read_bytes()
    rows = [json.loads(line) for line in first.decode().splitlines()]
    assert [set(r) for r in rows] == [{"split", "path", "id", "content_hash"}] * 2
    assert rows[0]["path"] == "train/a.shd"
    write_manifest(entries, path)
    assert path.read_bytes() == first
    assert not list(tmp_path.glob("*.tmp"))
