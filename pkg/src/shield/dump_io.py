"""SHIELD dump v1 serialization, validation, hashing, dedup and synthetic data.

File layout, all integers little-endian:

    offset  size          content
    0       4             magic bytes b"SHLD"
    4       4             u32 format version, currently 1
    8       4             u32 header length in bytes
    12      header_len    UTF-8 JSON header
    ...     rest          payload: row-major float32 arrays, no padding,
                          in order: token embeddings (n_t x d_t),
                          patch embeddings (n_v x d_v), state vector (d_sp),
                          attention matrix (n x n)

Header JSON fields: id, label, n_t, d_t, n_v, d_v, grid_rows, grid_cols,
d_sp, n, text_range [i1, i2], patch_range [j1, j2], and optionally raw_text.
Both ranges are end-inclusive positions into the n prompt tokens.

Arrays are held in memory as float32 so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DumpConsistencyError,
    DumpFormatError,
    DumpLengthError,
    InvalidDumpError,
)

log = logging.getLogger(__name__)

MAGIC = b"SHLD"
VERSION = 1

_HEADER_INT_FIELDS = ("label", "n_t", "d_t", "n_v", "d_v", "grid_rows", "grid_cols", "d_sp", "n")


@dataclass
class MemeDump:
    """One serialized meme: embeddings, language-model state and attention."""

    id: str
    label: int  # 1 hateful, 0 not, -1 unlabeled
    grid_rows: int
    grid_cols: int
    prompt_len: int               # n: total prompt token count
    text_range: tuple[int, int]   # [i1, i2] inclusive positions of the meme text
    patch_range: tuple[int, int]  # [j1, j2] inclusive positions of the patch block
    token_embeddings: np.ndarray  # (n_t, d_t) float32
    patch_embeddings: np.ndarray  # (n_v, d_v) float32
    llm_state: np.ndarray         # (d_sp,) float32, last hidden state
    attention: np.ndarray         # (n, n) float32, nonnegative
    raw_text: str | None = None

    def __post_init__(self):
        self.token_embeddings = np.asarray(self.token_embeddings, dtype=np.float32, order="C")
        self.patch_embeddings = np.asarray(self.patch_embeddings, dtype=np.float32, order="C")
        self.llm_state = np.asarray(self.llm_state, dtype=np.float32, order="C")
        self.attention = np.asarray(self.attention, dtype=np.float32, order="C")
        self.text_range = (int(self.text_range[0]), int(self.text_range[1]))
        self.patch_range = (int(self.patch_range[0]), int(self.patch_range[1]))

    @property
    def n_tokens(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def token_dim(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def n_patches(self) -> int:
        return self.patch_embeddings.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patch_embeddings.shape[1]

    @property
    def state_dim(self) -> int:
        return self.llm_state.shape[0]


def validate_dump(dump: MemeDump) -> list[str]:
    """Return every violated structural rule; an empty list means valid."""
    out: list[str] = []
    if dump.token_embeddings.ndim != 2:
        return [f"token embeddings must be 2-D, got shape {dump.token_embeddings.shape}"]
    if dump.patch_embeddings.ndim != 2:
        return [f"patch embeddings must be 2-D, got shape {dump.patch_embeddings.shape}"]
    if dump.llm_state.ndim != 1:
        return [f"state vector must be 1-D, got shape {dump.llm_state.shape}"]
    if dump.attention.ndim != 2:
        return [f"attention must be 2-D, got shape {dump.attention.shape}"]

    n_t, d_t = dump.token_embeddings.shape
    n_v, d_v = dump.patch_embeddings.shape
    n = dump.prompt_len
    if min(n_t, d_t, n_v, d_v, dump.state_dim, n) < 1:
        out.append("all dimensions must be at least 1")
    if dump.grid_rows < 1 or dump.grid_cols < 1:
        out.append(f"grid must be at least 1x1, got {dump.grid_rows}x{dump.grid_cols}")
    elif dump.grid_rows * dump.grid_cols != n_v:
        out.append(f"grid {dump.grid_rows}x{dump.grid_cols} does not cover {n_v} patches")
    if dump.attention.shape != (n, n):
        out.append(f"attention shape {dump.attention.shape} is not ({n}, {n})")

    i1, i2 = dump.text_range
    j1, j2 = dump.patch_range
    if not (0 <= i1 <= i2 < n):
        out.append(f"text range [{i1}, {i2}] not within 0..{n - 1}")
    elif i2 - i1 + 1 != n_t:
        out.append(f"text range [{i1}, {i2}] does not span {n_t} tokens")
    if not (0 <= j1 <= j2 < n):
        out.append(f"patch range [{j1}, {j2}] not within 0..{n - 1}")
    elif j2 - j1 + 1 != n_v:
        out.append(f"patch range [{j1}, {j2}] does not span {n_v} patches")
    if not (i2 < j1 or j2 < i1):
        out.append(f"text range [{i1}, {i2}] overlaps patch range [{j1}, {j2}]")

    for name, arr in (("token embeddings", dump.token_embeddings),
                      ("patch embeddings", dump.patch_embeddings),
                      ("state vector", dump.llm_state),
                      ("attention", dump.attention)):
        if arr.size and not np.all(np.isfinite(arr)):
            out.append(f"{name} contain non-finite values")
    if dump.attention.size and np.any(dump.attention < 0):
        out.append("attention has negative entries")
    if dump.label not in (-1, 0, 1):
        out.append(f"label must be -1, 0 or 1, got {dump.label}")
    return out


def _header_dict(dump: MemeDump) -> dict:
    header = {
        "id": dump.id,
        "label": int(dump.label),
        "n_t": dump.n_tokens,
        "d_t": dump.token_dim,
        "n_v": dump.n_patches,
        "d_v": dump.patch_dim,
        "grid_rows": dump.grid_rows,
        "grid_cols": dump.grid_cols,
        "d_sp": dump.state_dim,
        "n": dump.prompt_len,
        "text_range": [dump.text_range[0], dump.text_range[1]],
        "patch_range": [dump.patch_range[0], dump.patch_range[1]],
    }
    if dump.raw_text is not None:
        header["raw_text"] = dump.raw_text
    return header


def write_dump(dump: MemeDump, sink) -> int:
    """Serialize a valid dump to a path or binary file object; returns bytes written."""
    violations = validate_dump(dump)
    if violations:
        raise InvalidDumpError(violations)
    header = json.dumps(_header_dict(dump), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = io.BytesIO()
    blob.write(MAGIC)
    blob.write(struct.pack("<II", VERSION, len(header)))
    blob.write(header)
    for arr in (dump.token_embeddings, dump.patch_embeddings, dump.llm_state, dump.attention):
        blob.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    payload = blob.getvalue()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)
    return len(payload)


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise DumpLengthError(f"truncated dump: expected {count} bytes for {what}, got {len(data)}")
    return data


def read_dump(source) -> MemeDump:
    """Parse a dump from a path or binary file object.

    Raises DumpFormatError for bad magic/version/header, DumpLengthError for a
    payload of the wrong size, DumpConsistencyError when header fields
    disagree with each other.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as f:
            return read_dump(f)
    magic = source.read(4)
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    version, header_len = struct.unpack("<II", _read_exact(source, 8, "version and header length"))
    if version != VERSION:
        raise DumpFormatError(f"unsupported dump version {version}")
    try:
        header = json.loads(_read_exact(source, header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DumpFormatError(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise DumpFormatError("header must be a JSON object")

    for key in ("id", "text_range", "patch_range", *_HEADER_INT_FIELDS):
        if key not in header:
            raise DumpConsistencyError(f"header is missing field {key!r}")
    for key in _HEADER_INT_FIELDS:
        if not isinstance(header[key], int):
            raise DumpConsistencyError(f"header field {key!r} must be an integer")
    for key in ("text_range", "patch_range"):
        rng = header[key]
        if not (isinstance(rng, list) and len(rng) == 2 and all(isinstance(v, int) for v in rng)):
            raise DumpConsistencyError(f"header field {key!r} must be a pair of integers")
    n_t, d_t = header["n_t"], header["d_t"]
    n_v, d_v = header["n_v"], header["d_v"]
    d_sp, n = header["d_sp"], header["n"]
    if min(n_t, d_t, n_v, d_v, d_sp, n) < 1:
        raise DumpConsistencyError("header declares a dimension smaller than 1")

    counts = (n_t * d_t, n_v * d_v, d_sp, n * n)
    expected = 4 * sum(counts)
    payload = source.read()
    if len(payload) != expected:
        raise DumpLengthError(f"payload is {len(payload)} bytes, header requires {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    offsets = np.cumsum((0,) + counts)
    arrays = [flat[lo:hi].copy() for lo, hi in zip(offsets[:-1], offsets[1:])]
    return MemeDump(
        id=str(header["id"]),
        label=header["label"],
        grid_rows=header["grid_rows"],
        grid_cols=header["grid_cols"],
        prompt_len=n,
        text_range=tuple(header["text_range"]),
        patch_range=tuple(header["patch_range"]),
        token_embeddings=arrays[0].reshape(n_t, d_t),
        patch_embeddings=arrays[1].reshape(n_v, d_v),
        llm_state=arrays[2],
        attention=arrays[3].reshape(n, n),
        raw_text=header.get("raw_text"),
    )


def content_hash(dump: MemeDump) -> str:
    """64-bit hex digest identifying the dump's content.

    Hashes the raw meme text when present, otherwise the quantized float32
    bytes of the token and patch embeddings.  Equal payloads hash equally.
    """
    h = hashlib.blake2b(digest_size=8)
    if dump.raw_text is not None:
        h.update(b"text:")
        h.update(dump.raw_text.encode("utf-8"))
    else:
        h.update(b"embed:")
        h.update(dump.token_embeddings.astype("<f4", copy=False).tobytes(order="C"))
        h.update(dump.patch_embeddings.astype("<f4", copy=False).tobytes(order="C"))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# manifests and dedup

SPLITS = ("train", "valid", "test")
_SPLIT_PRIORITY = {s: i for i, s in enumerate(SPLITS)}


@dataclass
class ManifestEntry:
    split: str
    path: str  # relative to the manifest's directory
    id: str
    content_hash: str


@dataclass
class DatasetManifest:
    """JSON-lines index of dump files, one {split, path, id, content_hash} per line."""

    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path | None = None

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}:{lineno}: not valid JSON: {e}") from e
                missing = {"split", "path", "id", "content_hash"} - set(row)
                if missing:
                    raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
                if row["split"] not in SPLITS:
                    raise DataError(f"{path}:{lineno}: unknown split {row['split']!r}")
                entries.append(ManifestEntry(row["split"], row["path"], row["id"], row["content_hash"]))
        return cls(entries, base_dir=path.parent)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(
                    {"split": e.split, "path": e.path, "id": e.id, "content_hash": e.content_hash},
                    sort_keys=True) + "\n")
        self.base_dir = path.parent

    def for_split(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split], self.base_dir)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    def __len__(self) -> int:
        return len(self.entries)


def dedup(manifest: DatasetManifest) -> DatasetManifest:
    """Drop duplicate content, keeping one copy per hash.

    The survivor is the first occurrence within the highest-priority split
    present (train over valid over test).  Order is otherwise preserved and
    no entry ever changes split.
    """
    best: dict[str, int] = {}
    for idx, e in enumerate(manifest.entries):
        cur = best.get(e.content_hash)
        if cur is None or _SPLIT_PRIORITY[e.split] < _SPLIT_PRIORITY[manifest.entries[cur].split]:
            best[e.content_hash] = idx
    keep = set(best.values())
    kept = [e for i, e in enumerate(manifest.entries) if i in keep]
    if len(kept) != len(manifest.entries):
        log.info("dedup dropped %d of %d entries", len(manifest.entries) - len(kept), len(manifest.entries))
    return DatasetManifest(kept, manifest.base_dir)


# ---------------------------------------------------------------------------
# synthetic data

TAIL_TOKENS = 4  # stand-in for the fixed question suffix of the prompt


@dataclass
class SynthConfig:
    """Knobs for the planted-signal generator.

    Three independent signals, one per feature channel: mu_sp shifts the
    first state coordinate, mu_pc shifts one embedding coordinate of both
    modalities, and mu_cr steers attention from a designated text token
    toward a visually distinct patch.  With all three at zero the labels are
    independent of the features.
    """

    n_train: int = 600
    n_valid: int = 200
    n_test: int = 200
    n_t: int = 6
    d_t: int = 8
    grid_rows: int = 3
    grid_cols: int = 3
    d_v: int = 8
    d_sp: int = 8
    mu_sp: float = 4.0
    mu_pc: float = 4.0
    mu_cr: float = 4.0
    noise: float = 1.0
    seed: int = 7

    def validate(self) -> None:
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        if min(self.n_t, self.d_t, self.grid_rows, self.grid_cols, self.d_v, self.d_sp) < 1:
            raise ConfigError("all dimensions must be at least 1")
        if min(self.mu_sp, self.mu_pc, self.mu_cr) < 0:
            raise ConfigError("signal strengths must be nonnegative")
        if self.noise < 0:
            raise ConfigError("noise scale must be nonnegative")


_PCM_COORD = 0  # embedding coordinate carrying the fused-context signal


def _synth_sample(rng: np.random.Generator, cfg: SynthConfig, sample_id: str) -> MemeDump:
    n_v = cfg.grid_rows * cfg.grid_cols
    n = n_v + cfg.n_t + TAIL_TOKENS
    patch_range = (0, n_v - 1)
    text_range = (n_v, n_v + cfg.n_t - 1)
    label = int(rng.integers(0, 2))

    tokens = rng.normal(0.0, cfg.noise, (cfg.n_t, cfg.d_t))
    patches = rng.normal(0.0, cfg.noise, (n_v, cfg.d_v))
    state = rng.normal(0.0, cfg.noise, cfg.d_sp)
    attention = np.abs(rng.normal(0.0, cfg.noise, (n, n)))

    state[0] += cfg.mu_sp * label
    tokens[:, _PCM_COORD] += cfg.mu_pc * label
    patches[:, _PCM_COORD] += cfg.mu_pc * label

    if cfg.mu_cr > 0:
        # The last patch looks unlike the others on a dedicated coordinate
        # (for both labels); only hateful samples point the designated text
        # token's strongest attention at it, so the informative bit lives in
        # the cross-modal edges rather than in any pooled feature.
        odd_coord = min(2, cfg.d_v - 1)
        patches[n_v - 1, odd_coord] += cfg.mu_cr
        anchor_token = text_range[0]
        target = patch_range[1] if label == 1 else patch_range[0]
        row = attention[anchor_token, patch_range[0]:patch_range[1] + 1]
        attention[anchor_token, target] = row.max() + cfg.mu_cr

    return MemeDump(
        id=sample_id,
        label=label,
        grid_rows=cfg.grid_rows,
        grid_cols=cfg.grid_cols,
        prompt_len=n,
        text_range=text_range,
        patch_range=patch_range,
        token_embeddings=tokens,
        patch_embeddings=patches,
        llm_state=state,
        attention=attention,
    )


def gen_synthetic(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Generate a planted-signal dataset under out_dir; returns its manifest.

    Deterministic: the same config (seed included) produces byte-identical
    dump files and manifest entries.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    entries = []
    for split, count in (("train", cfg.n_train), ("valid", cfg.n_valid), ("test", cfg.n_test)):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            sample_id = f"synth-{split}-{i:04d}"
            dump = _synth_sample(rng, cfg, sample_id)
            rel = f"{split}/{sample_id}.shd"
            write_dump(dump, out_dir / rel)
            entries.append(ManifestEntry(split, rel, sample_id, content_hash(dump)))
    log.info("generated %d dumps under %s", len(entries), out_dir)
    return DatasetManifest(entries, base_dir=out_dir)


def load_labeled(manifest: DatasetManifest) -> list[MemeDump]:
    """Read every dump in a manifest, requiring binary labels."""
    dumps = []
    for e in manifest.entries:
        dump = read_dump(manifest.resolve(e))
        if dump.label not in (0, 1):
            raise DataError(f"sample {dump.id!r} is unlabeled")
        dumps.append(dump)
    return dumps
