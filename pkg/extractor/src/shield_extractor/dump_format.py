"""Standalone writer for SHIELD dump v1 files and dataset manifests.

This package deliberately does not import the classification engine; the
binary format is the contract between the two.  Layout, integers little
endian:

    offset  size          content
    0       4             magic bytes b"SHLD"
    4       4             u32 format version, currently 1
    8       4             u32 header length in bytes
    12      header_len    UTF-8 JSON header, compact, keys sorted
    ...     rest          payload: row-major float32 arrays, no padding,
                          in order: token embeddings (n_t x d_t),
                          patch embeddings (n_v x d_v), state vector (d_sp),
                          attention matrix (n x n)

Header fields: id, label, n_t, d_t, n_v, d_v, grid_rows, grid_cols, d_sp,
n, text_range [i1, i2], patch_range [j1, j2], raw_text (we always embed the
meme text).  Ranges are end-inclusive positions into the n prompt tokens.

Manifests are JSON lines of {split, path, id, content_hash} with paths
relative to the manifest's directory; the hash is the engine's dedup key,
an 8-byte blake2b over the raw text.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SourceDataError

MAGIC = b"SHLD"
VERSION = 1

SPLITS = ("train", "valid", "test")


@dataclass
class DumpRecord:
    """One meme's extracted tensors plus the header bookkeeping."""

    id: str
    label: int  # 1 hateful, 0 not, -1 unlabeled
    grid_rows: int
    grid_cols: int
    prompt_len: int
    text_range: tuple[int, int]   # inclusive positions of the meme text
    patch_range: tuple[int, int]  # inclusive positions of the patch block
    token_embeddings: np.ndarray  # (n_t, d_t)
    patch_embeddings: np.ndarray  # (n_v, d_v)
    state: np.ndarray             # (d_sp,)
    attention: np.ndarray         # (n, n), nonnegative
    raw_text: str

    def __post_init__(self):
        self.token_embeddings = np.asarray(self.token_embeddings, dtype="<f4", order="C")
        self.patch_embeddings = np.asarray(self.patch_embeddings, dtype="<f4", order="C")
        self.state = np.asarray(self.state, dtype="<f4", order="C")
        self.attention = np.asarray(self.attention, dtype="<f4", order="C")


def check_record(rec: DumpRecord) -> list[str]:
    """Return every violated structural rule; empty means writable."""
    out: list[str] = []
    if rec.token_embeddings.ndim != 2 or rec.patch_embeddings.ndim != 2:
        return ["embedding blocks must be 2-D"]
    if rec.state.ndim != 1 or rec.attention.ndim != 2:
        return ["state must be 1-D and attention 2-D"]
    n_t, d_t = rec.token_embeddings.shape
    n_v, d_v = rec.patch_embeddings.shape
    n = rec.prompt_len
    if min(n_t, d_t, n_v, d_v, rec.state.shape[0], n) < 1:
        out.append("all dimensions must be at least 1")
    if rec.grid_rows < 1 or rec.grid_cols < 1 or rec.grid_rows * rec.grid_cols != n_v:
        out.append(f"grid {rec.grid_rows}x{rec.grid_cols} does not cover {n_v} patches")
    if rec.attention.shape != (n, n):
        out.append(f"attention shape {rec.attention.shape} is not ({n}, {n})")
    i1, i2 = rec.text_range
    j1, j2 = rec.patch_range
    if not (0 <= i1 <= i2 < n) or i2 - i1 + 1 != n_t:
        out.append(f"text range [{i1}, {i2}] does not span {n_t} tokens inside 0..{n - 1}")
    if not (0 <= j1 <= j2 < n) or j2 - j1 + 1 != n_v:
        out.append(f"patch range [{j1}, {j2}] does not span {n_v} patches inside 0..{n - 1}")
    if not (i2 < j1 or j2 < i1):
        out.append("text and patch ranges overlap")
    for name, arr in (("token embeddings", rec.token_embeddings),
                      ("patch embeddings", rec.patch_embeddings),
                      ("state", rec.state), ("attention", rec.attention)):
        if not np.all(np.isfinite(arr)):
            out.append(f"{name} contain non-finite values")
    if np.any(rec.attention < 0):
        out.append("attention has negative entries")
    if rec.label not in (-1, 0, 1):
        out.append(f"label must be -1, 0 or 1, got {rec.label}")
    return out


def dump_bytes(rec: DumpRecord) -> bytes:
    violations = check_record(rec)
    if violations:
        raise SourceDataError("refusing to write invalid dump: " + "; ".join(violations))
    header = {
        "id": rec.id,
        "label": int(rec.label),
        "n_t": rec.token_embeddings.shape[0],
        "d_t": rec.token_embeddings.shape[1],
        "n_v": rec.patch_embeddings.shape[0],
        "d_v": rec.patch_embeddings.shape[1],
        "grid_rows": rec.grid_rows,
        "grid_cols": rec.grid_cols,
        "d_sp": rec.state.shape[0],
        "n": rec.prompt_len,
        "text_range": [int(rec.text_range[0]), int(rec.text_range[1])],
        "patch_range": [int(rec.patch_range[0]), int(rec.patch_range[1])],
        "raw_text": rec.raw_text,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = io.BytesIO()
    blob.write(MAGIC)
    blob.write(struct.pack("<II", VERSION, len(head)))
    blob.write(head)
    for arr in (rec.token_embeddings, rec.patch_embeddings, rec.state, rec.attention):
        blob.write(arr.tobytes(order="C"))
    return blob.getvalue()


def write_dump_atomic(rec: DumpRecord, path) -> None:
    """Write via a temp file in the same directory so readers never see a torn file."""
    path = Path(path)
    data = dump_bytes(rec)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(raw_text: str) -> str:
    """The engine's dedup key for a dump that embeds its raw text."""
    h = hashlib.blake2b(digest_size=8)
    h.update(b"text:")
    h.update(raw_text.encode("utf-8"))
    return h.hexdigest()


def read_header(path) -> dict:
    """Parse and sanity-check an existing dump file's header.

    Used to decide whether a previous run's file can be reused.  Raises
    SourceDataError for anything unusable: wrong magic or version, mangled
    header, or a payload whose size disagrees with the header.
    """
    path = Path(path)
    with open(path, "rb") as f:
        start = f.read(12)
        if len(start) != 12 or start[:4] != MAGIC:
            raise SourceDataError(f"{path}: not a dump file")
        version, header_len = struct.unpack("<II", start[4:])
        if version != VERSION:
            raise SourceDataError(f"{path}: unsupported dump version {version}")
        raw = f.read(header_len)
        if len(raw) != header_len:
            raise SourceDataError(f"{path}: truncated header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SourceDataError(f"{path}: bad header: {e}") from e
        if not isinstance(header, dict):
            raise SourceDataError(f"{path}: header must be a JSON object")
        try:
            counts = (header["n_t"] * header["d_t"], header["n_v"] * header["d_v"],
                      header["d_sp"], header["n"] * header["n"])
        except (KeyError, TypeError) as e:
            raise SourceDataError(f"{path}: header is missing size fields: {e}") from e
        payload = f.read()
    if len(payload) != 4 * sum(counts):
        raise SourceDataError(f"{path}: payload size disagrees with header")
    return header


def write_manifest(entries: list[dict], path) -> None:
    """Write {split, path, id, content_hash} rows as JSON lines, atomically."""
    path = Path(path)
    lines = []
    for e in entries:
        row = {"split": e["split"], "path": e["path"], "id": e["id"],
               "content_hash": e["content_hash"]}
        lines.append(json.dumps(row, sort_keys=True) + "\n")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.writelines(lines)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
