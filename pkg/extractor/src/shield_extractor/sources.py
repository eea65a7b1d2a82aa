"""Source dataset handling: one meme = an image file, its text, a label.

Source manifests are CSV or JSON lines with columns/keys id, image_path,
text, label and an optional split; image paths are relative to the manifest
file.  Samples without a split get a stable pseudorandom one so reruns and
partial runs agree.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import SourceDataError

SPLITS = ("train", "valid", "test")

# id-hash buckets out of 10: 0-6 train, 7-8 valid, 9 test
_SPLIT_EDGES = (7, 9)


@dataclass
class MemeSource:
    id: str
    image_path: Path
    text: str
    label: int
    split: str

    def validate(self) -> None:
        if not self.id:
            raise SourceDataError("sample id must be nonempty")
        if not self.text or not self.text.strip():
            raise SourceDataError(f"sample {self.id!r}: text must be nonempty")
        if self.label not in (-1, 0, 1):
            raise SourceDataError(f"sample {self.id!r}: label must be -1, 0 or 1, "
                                  f"got {self.label}")
        if self.split not in SPLITS:
            raise SourceDataError(f"sample {self.id!r}: unknown split {self.split!r}")


def assign_split(sample_id: str) -> str:
    digest = hashlib.blake2b(("split:" + sample_id).encode("utf-8"), digest_size=8).digest()
    bucket = int.from_bytes(digest, "little") % 10
    if bucket < _SPLIT_EDGES[0]:
        return "train"
    return "valid" if bucket < _SPLIT_EDGES[1] else "test"


def _row_to_source(row: dict, base_dir: Path, where: str) -> MemeSource:
    missing = {"id", "image_path", "text", "label"} - set(row)
    if missing:
        raise SourceDataError(f"{where}: missing fields {sorted(missing)}")
    try:
        label = int(row["label"])
    except (TypeError, ValueError):
        raise SourceDataError(f"{where}: label {row['label']!r} is not an integer") from None
    sample_id = str(row["id"])
    split = str(row["split"]) if row.get("split") else assign_split(sample_id)
    image = Path(str(row["image_path"]))
    if not image.is_absolute():
        image = base_dir / image
    src = MemeSource(id=sample_id, image_path=image, text=str(row["text"]),
                     label=label, split=split)
    src.validate()
    return src


def read_sources(path) -> list[MemeSource]:
    """Load a CSV or JSON-lines source manifest; ids must be unique."""
    path = Path(path)
    base_dir = path.parent
    rows: list[MemeSource] = []
    if path.suffix.lower() == ".csv":
        with open(path, "r", encoding="utf-8", newline="") as f:
            for lineno, row in enumerate(csv.DictReader(f), start=2):
                rows.append(_row_to_source(row, base_dir, f"{path}:{lineno}"))
    else:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise SourceDataError(f"{path}:{lineno}: not valid JSON: {e}") from e
                if not isinstance(row, dict):
                    raise SourceDataError(f"{path}:{lineno}: row must be a JSON object")
                rows.append(_row_to_source(row, base_dir, f"{path}:{lineno}"))
    if not rows:
        raise SourceDataError(f"{path}: no samples")
    seen: dict[str, int] = {}
    for i, src in enumerate(rows):
        if src.id in seen:
            raise SourceDataError(f"{path}: duplicate sample id {src.id!r} "
                                  f"(rows {seen[src.id] + 1} and {i + 1})")
        seen[src.id] = i
    return rows
