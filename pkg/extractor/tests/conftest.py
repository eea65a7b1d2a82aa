"""Shared fixtures: deterministic toy meme sets rendered with Pillow."""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

# Engine CLI invocation, import-free: the extractor talks to the engine only
# through files and this command line.
ENGINE_CLI = [sys.executable, "-m", "shield.cli"]

_SPLIT_PLAN = ["train"] * 8 + ["valid"] * 4 + ["test"] * 4

_NICE = ["a friendly cat picture", "wholesome picnic photo", "cheerful birthday post",
         "cute dog in the park"]
_NASTY = ["they ruin everything as usual", "nobody wants them here",
          "typical of those people", "they should all leave"]


def render_meme(path: Path, label: int, seed: int) -> None:
    """A 64x64 block image whose tint correlates with the label."""
    rng = np.random.default_rng(seed)
    base = np.array([198, 64, 52] if label == 1 else [52, 96, 198], dtype=np.float64)
    img = base + rng.normal(0.0, 18.0, (64, 64, 3))
    for _ in range(3):
        r0, c0 = rng.integers(0, 48, 2)
        shade = rng.integers(0, 256, 3)
        img[r0:r0 + 16, c0:c0 + 16] = 0.5 * img[r0:r0 + 16, c0:c0 + 16] + 0.5 * shade
    Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), "RGB").save(path)


def make_toy_dataset(root: Path, n: int = 16, fmt: str = "jsonl") -> Path:
    """Write n meme images plus a source manifest; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        label = i % 2
        render_meme(root / f"img{i:02d}.png", label, seed=1000 + i)
        phrase = (_NASTY if label else _NICE)[i % 4]
        rows.append({
            "id": f"meme-{i:02d}",
            "image_path": f"img{i:02d}.png",
            "text": f"{phrase}, post {i:02d}",
            "label": label,
            "split": _SPLIT_PLAN[i % len(_SPLIT_PLAN)],
        })
    if fmt == "csv":
        manifest = root / "sources.csv"
        with open(manifest, "w", encoding="utf-8") as f:
            f.write("id,image_path,text,label,split\n")
            for r in rows:
                f.write(f"{r['id']},{r['image_path']},\"{r['text']}\",{r['label']},{r['split']}\n")
    else:
        manifest = root / "sources.jsonl"
        with open(manifest, "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")
    return manifest


@pytest.fixture()
def toy_sources(tmp_path):
    return make_toy_dataset(tmp_path / "toyset")


@pytest.fixture(scope="session")
def fast_config() -> dict:
    # the 16-wide model keeps unit tests snappy
    return {"vision_encoder": "toy/vision-2x2", "language_model": "toy/lm-16"}
