"""Desk-scale stand-ins for the pretrained encoders.

Real deployments would plug a frozen pretrained vision tower and a
decoder-only language model in here.  These toys keep the exact same
interfaces and data flow (grid patches, a projection into the language
model's width, token embeddings, per-layer multi-head causal attention,
a last hidden state) while staying dependency-free and bit-deterministic:
every weight is derived from the model id with a seeded generator, so the
same id always denotes the same frozen model.

All arithmetic is float64; the pipeline casts to float32 at the dump
boundary.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ModelLoadError, SourceDataError

VOCAB_SIZE = 4096

# Per-cell image statistics fed to the vision head: mean and spread of each
# RGB channel, mean and spread of luminance, and the cell's grid position.
_N_CELL_STATS = 10


def _seed_from(tag: str) -> np.random.Generator:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@dataclass(frozen=True)
class VisionSpec:
    grid_rows: int
    grid_cols: int
    feature_dim: int


@dataclass(frozen=True)
class LmSpec:
    hidden_dim: int
    n_layers: int
    n_heads: int


VISION_MODELS = {
    "toy/vision-3x3": VisionSpec(3, 3, 24),
    "toy/vision-2x2": VisionSpec(2, 2, 24),
    "toy/vision-4x4": VisionSpec(4, 4, 24),
}

LM_MODELS = {
    "toy/lm-32": LmSpec(hidden_dim=32, n_layers=2, n_heads=4),
    "toy/lm-16": LmSpec(hidden_dim=16, n_layers=2, n_heads=2),
}


class ToyVisionEncoder:
    """Frozen patch encoder: grid cell statistics through a fixed tanh layer."""

    def __init__(self, model_id: str):
        spec = VISION_MODELS.get(model_id)
        if spec is None:
            raise ModelLoadError(f"unknown vision encoder {model_id!r}; "
                                 f"available: {sorted(VISION_MODELS)}")
        self.model_id = model_id
        self.spec = spec
        rng = _seed_from("vision:" + model_id)
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(_N_CELL_STATS),
                                 (_N_CELL_STATS, spec.feature_dim))
        self.bias = rng.normal(0.0, 0.1, spec.feature_dim)

    @property
    def n_patches(self) -> int:
        return self.spec.grid_rows * self.spec.grid_cols

    def encode_file(self, image_path) -> np.ndarray:
        try:
            with Image.open(image_path) as img:
                return self.encode(img)
        except FileNotFoundError:
            raise SourceDataError(f"image file not found: {image_path}") from None
        except (UnidentifiedImageError, OSError) as e:
            raise SourceDataError(f"cannot decode image {image_path}: {e}") from e

    def encode(self, image: Image.Image) -> np.ndarray:
        """Return (n_patches, feature_dim) features, row-major over grid cells."""
        rows, cols = self.spec.grid_rows, self.spec.grid_cols
        rgb = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
        if rgb.shape[0] < rows or rgb.shape[1] < cols:
            raise SourceDataError(
                f"image {rgb.shape[1]}x{rgb.shape[0]} is smaller than the {rows}x{cols} grid")
        stats = np.empty((rows * cols, _N_CELL_STATS))
        bands = np.array_split(rgb, rows, axis=0)
        for r, band in enumerate(bands):
            for c, cell in enumerate(np.array_split(band, cols, axis=1)):
                flat = cell.reshape(-1, 3)
                lum = flat @ np.array([0.299, 0.587, 0.114])
                stats[r * cols + c] = [
                    *flat.mean(axis=0), *flat.std(axis=0),
                    lum.mean(), lum.std(),
                    r / max(rows - 1, 1), c / max(cols - 1, 1),
                ]
        return np.tanh(stats @ self.weight + self.bias)


class VisionProjection:
    """Fixed linear map from vision features into the language model's width."""

    def __init__(self, vision_id: str, lm_id: str, in_dim: int, out_dim: int):
        rng = _seed_from(f"projection:{vision_id}->{lm_id}")
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim))
        self.bias = rng.normal(0.0, 0.1, out_dim)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias


def tokenize(text: str) -> list[str]:
    """Lowercase words and single punctuation marks, in order."""
    return re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower())


def token_id(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % VOCAB_SIZE


_CHECKPOINT_ARRAYS = ("embedding", "wq", "wk", "wv", "wo", "w1", "w2")


@dataclass
class LmOutput:
    hidden: np.ndarray            # (n, d) final-layer states
    attentions: list[np.ndarray]  # per layer, (n_heads, n, n), rows sum to 1


class ToyCausalLM:
    """Tiny frozen decoder-only model with real causal multi-head attention.

    Weights come from the model id's seed, or from an externally produced
    .npz checkpoint when one is given (shapes must match the id's spec).
    """

    def __init__(self, model_id: str, checkpoint_path=None):
        spec = LM_MODELS.get(model_id)
        if spec is None:
            raise ModelLoadError(f"unknown language model {model_id!r}; "
                                 f"available: {sorted(LM_MODELS)}")
        if spec.hidden_dim % spec.n_heads:
            raise ModelLoadError(f"{model_id!r}: width {spec.hidden_dim} not divisible "
                                 f"by {spec.n_heads} heads")
        self.model_id = model_id
        self.spec = spec
        d, L, H = spec.hidden_dim, spec.n_layers, spec.n_heads
        dh = d // H
        if checkpoint_path is None:
            rng = _seed_from("lm:" + model_id)
            s = 1.0 / np.sqrt(d)
            self.embedding = rng.normal(0.0, 1.0, (VOCAB_SIZE, d))
            self.wq = rng.normal(0.0, s, (L, H, d, dh))
            self.wk = rng.normal(0.0, s, (L, H, d, dh))
            self.wv = rng.normal(0.0, s, (L, H, d, dh))
            self.wo = rng.normal(0.0, s, (L, d, d))
            self.w1 = rng.normal(0.0, s, (L, d, 2 * d))
            self.w2 = rng.normal(0.0, 1.0 / np.sqrt(2 * d), (L, 2 * d, d))
        else:
            self._load_checkpoint(checkpoint_path, d, L, H, dh)

    def _load_checkpoint(self, path, d, L, H, dh):
        expected = {
            "embedding": (VOCAB_SIZE, d),
            "wq": (L, H, d, dh), "wk": (L, H, d, dh), "wv": (L, H, d, dh),
            "wo": (L, d, d), "w1": (L, d, 2 * d), "w2": (L, 2 * d, d),
        }
        try:
            with np.load(Path(path), allow_pickle=False) as ckpt:
                for name in _CHECKPOINT_ARRAYS:
                    if name not in ckpt:
                        raise ModelLoadError(f"checkpoint {path} is missing array {name!r}")
                    arr = np.asarray(ckpt[name], dtype=np.float64)
                    if arr.shape != expected[name]:
                        raise ModelLoadError(
                            f"checkpoint {path}: {name} has shape {arr.shape}, "
                            f"expected {expected[name]} for {self.model_id!r}")
                    setattr(self, name, arr)
        except ModelLoadError:
            raise
        except (OSError, ValueError) as e:
            raise ModelLoadError(f"cannot read checkpoint {path}: {e}") from e

    def save_checkpoint(self, path) -> None:
        np.savez(Path(path), **{name: getattr(self, name) for name in _CHECKPOINT_ARRAYS})

    @property
    def hidden_dim(self) -> int:
        return self.spec.hidden_dim

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        ids = [token_id(t) for t in tokens]
        return self.embedding[ids].copy()

    def _positional(self, n: int) -> np.ndarray:
        d = self.spec.hidden_dim
        pos = np.arange(n)[:, None]
        dim = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (dim // 2 * 2) / d)
        enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
        return 0.1 * enc

    @staticmethod
    def _rms_norm(x: np.ndarray) -> np.ndarray:
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)

    def forward(self, input_embeddings: np.ndarray) -> LmOutput:
        """Run the frozen stack over one prompt of injected embeddings.

        Patch positions carry projected vision features, everything else
        rows of the embedding table; the caller assembles that sequence.
        """
        n, d = input_embeddings.shape
        if d != self.spec.hidden_dim:
            raise SourceDataError(f"prompt width {d} does not match model width "
                                  f"{self.spec.hidden_dim}")
        H = self.spec.n_heads
        dh = d // H
        mask = np.triu(np.full((n, n), -np.inf), k=1)
        x = self._rms_norm(input_embeddings + self._positional(n))
        attentions = []
        for layer in range(self.spec.n_layers):
            heads = np.empty((H, n, n))
            mixed = np.empty((n, d))
            for h in range(H):
                q = x @ self.wq[layer, h]
                k = x @ self.wk[layer, h]
                v = x @ self.wv[layer, h]
                scores = q @ k.T / np.sqrt(dh) + mask
                scores -= scores.max(axis=1, keepdims=True)
                weights = np.exp(scores)
                weights /= weights.sum(axis=1, keepdims=True)
                heads[h] = weights
                mixed[:, h * dh:(h + 1) * dh] = weights @ v
            attentions.append(heads)
            x = self._rms_norm(x + mixed @ self.wo[layer])
            x = self._rms_norm(x + np.tanh(x @ self.w1[layer]) @ self.w2[layer])
        return LmOutput(hidden=x, attentions=attentions)
