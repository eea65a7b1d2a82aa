"""Meme-to-dump extraction pipeline.

A prompt template with a patch placeholder and a text placeholder is
assembled per sample: placeholder slots receive the projected image patches
and the meme's tokens, literal template words tokenize normally.  The
language model runs once over the injected sequence; the dump gets the text
positions' final hidden states as token embeddings, the projected patches,
the last position's hidden state, and one attention matrix reduced from the
configured layer.  Index ranges into the prompt come straight from the
assembled layout.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dump_format import DumpRecord, content_hash, read_header, write_dump_atomic, write_manifest
from .encoders import ToyCausalLM, ToyVisionEncoder, VisionProjection, tokenize
from .errors import ConfigError, ModelLoadError, SourceDataError
from .sources import SPLITS, MemeSource

log = logging.getLogger(__name__)

PATCH_PLACEHOLDER = "<H_v>"
TEXT_PLACEHOLDER = "<T>"

# The two question framings we ship; both put the image block before the text.
TEMPLATES = {
    "claims": "<H_v> <T> Are there false claims?",
    "hateful": "<H_v> <T> This meme is hateful or not?",
}
DEFAULT_TEMPLATE = TEMPLATES["claims"]

_CONFIG_FIELDS = ("vision_encoder", "language_model", "prompt_template",
                  "attention_layer", "attention_heads", "device", "batch_size",
                  "checkpoint_path")


@dataclass
class ExtractorConfig:
    vision_encoder: str = "toy/vision-3x3"
    language_model: str = "toy/lm-32"
    prompt_template: str = DEFAULT_TEMPLATE
    attention_layer: int = -1       # python-style index into the layer stack
    attention_heads: str | int = "mean"  # "mean" or one head's index
    device: str = "cpu"
    batch_size: int = 8             # progress/log granularity at this scale
    checkpoint_path: str | None = None

    def validate(self) -> None:
        for placeholder in (PATCH_PLACEHOLDER, TEXT_PLACEHOLDER):
            if self.prompt_template.count(placeholder) != 1:
                raise ConfigError(f"prompt template must contain {placeholder} exactly once, "
                                  f"got: {self.prompt_template!r}")
        if not isinstance(self.attention_layer, int) or isinstance(self.attention_layer, bool):
            raise ConfigError(f"attention_layer must be an integer, got {self.attention_layer!r}")
        heads = self.attention_heads
        if heads != "mean" and not (isinstance(heads, int) and not isinstance(heads, bool)):
            raise ConfigError(f"attention_heads must be 'mean' or a head index, got {heads!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExtractorConfig":
        unknown = set(raw) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; "
                              f"known: {sorted(_CONFIG_FIELDS)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _CONFIG_FIELDS}


def parse_template(template: str) -> list[tuple]:
    """Split a template into ('literal', tokens) / ('patches',) / ('text',) segments."""
    n_patch = template.count(PATCH_PLACEHOLDER)
    n_text = template.count(TEXT_PLACEHOLDER)
    if n_patch != 1 or n_text != 1:
        raise ConfigError(f"template needs exactly one {PATCH_PLACEHOLDER} and one "
                          f"{TEXT_PLACEHOLDER}, got {n_patch} and {n_text}")
    segments: list[tuple] = []
    for part in re.split(f"({re.escape(PATCH_PLACEHOLDER)}|{re.escape(TEXT_PLACEHOLDER)})",
                         template):
        if part == PATCH_PLACEHOLDER:
            segments.append(("patches",))
        elif part == TEXT_PLACEHOLDER:
            segments.append(("text",))
        else:
            tokens = tokenize(part)
            if tokens:
                segments.append(("literal", tokens))
    return segments


@dataclass
class ExtractorRuntime:
    """The loaded frozen models plus the parsed template, reused across samples."""

    cfg: ExtractorConfig
    vision: ToyVisionEncoder
    projection: VisionProjection
    lm: ToyCausalLM
    segments: list[tuple] = field(default_factory=list)
    attention_layer: int = 0

    @classmethod
    def load(cls, cfg: ExtractorConfig) -> "ExtractorRuntime":
        cfg.validate()
        if cfg.device != "cpu":
            raise ModelLoadError(f"device {cfg.device!r} is not available; "
                                 "the toy runtime executes on cpu only")
        vision = ToyVisionEncoder(cfg.vision_encoder)
        lm = ToyCausalLM(cfg.language_model, cfg.checkpoint_path)
        projection = VisionProjection(cfg.vision_encoder, cfg.language_model,
                                      vision.spec.feature_dim, lm.hidden_dim)
        n_layers, n_heads = lm.spec.n_layers, lm.spec.n_heads
        if not -n_layers <= cfg.attention_layer < n_layers:
            raise ConfigError(f"attention_layer {cfg.attention_layer} out of range for "
                              f"{n_layers} layers")
        if cfg.attention_heads != "mean" and not 0 <= cfg.attention_heads < n_heads:
            raise ConfigError(f"attention head {cfg.attention_heads} out of range for "
                              f"{n_heads} heads")
        layer = cfg.attention_layer % n_layers
        log.info("loaded %s + %s (%d-wide, %d layers)", cfg.vision_encoder,
                 cfg.language_model, lm.hidden_dim, n_layers)
        return cls(cfg, vision, projection, lm, parse_template(cfg.prompt_template), layer)


def extract(src: MemeSource, runtime: ExtractorRuntime) -> DumpRecord:
    """Run one meme through the frozen models and package the dump record."""
    src.validate()
    features = runtime.vision.encode_file(src.image_path)
    patches = runtime.projection.apply(features)

    text_tokens = tokenize(src.text)
    if not text_tokens:
        raise SourceDataError(f"sample {src.id!r}: no tokens survive tokenization "
                              f"of {src.text!r}")

    rows = []
    patch_range = text_range = None
    pos = 0
    for seg in runtime.segments:
        if seg[0] == "patches":
            patch_range = (pos, pos + len(patches) - 1)
            rows.append(patches)
            pos += len(patches)
        elif seg[0] == "text":
            text_range = (pos, pos + len(text_tokens) - 1)
            rows.append(runtime.lm.embed_tokens(text_tokens))
            pos += len(text_tokens)
        else:
            rows.append(runtime.lm.embed_tokens(seg[1]))
            pos += len(seg[1])

    out = runtime.lm.forward(np.vstack(rows))
    heads = out.attentions[runtime.attention_layer]
    if runtime.cfg.attention_heads == "mean":
        attention = heads.mean(axis=0)
    else:
        attention = heads[runtime.cfg.attention_heads]

    i1, i2 = text_range
    return DumpRecord(
        id=src.id,
        label=src.label,
        grid_rows=runtime.vision.spec.grid_rows,
        grid_cols=runtime.vision.spec.grid_cols,
        prompt_len=pos,
        text_range=text_range,
        patch_range=patch_range,
        token_embeddings=out.hidden[i1:i2 + 1],
        patch_embeddings=patches,
        state=out.hidden[-1],
        attention=attention,
        raw_text=src.text,
    )


def extract_dump(src: MemeSource, cfg: ExtractorConfig, out_path) -> Path:
    """One-shot convenience: load models, extract one sample, write the file."""
    runtime = ExtractorRuntime.load(cfg)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_dump_atomic(extract(src, runtime), out_path)
    return out_path


def _dump_names(sources: list[MemeSource]) -> dict[str, str]:
    """Map sample id -> relative dump path, refusing filename collisions."""
    names: dict[str, str] = {}
    taken: dict[str, str] = {}
    for src in sources:
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", src.id) or "sample"
        rel = f"{src.split}/{safe}.shd"
        if rel in taken:
            raise SourceDataError(f"samples {taken[rel]!r} and {src.id!r} map to the "
                                  f"same dump file {rel}")
        taken[rel] = src.id
        names[src.id] = rel
    return names


def _reusable(path: Path, src: MemeSource) -> bool:
    try:
        header = read_header(path)
    except SourceDataError:
        return False
    return header.get("id") == src.id and header.get("raw_text") == src.text


@dataclass
class BatchResult:
    extracted: int
    reused: int
    failures: list[tuple[str, str]]
    manifest_path: Path

    @property
    def succeeded(self) -> int:
        return self.extracted + self.reused

    def to_dict(self) -> dict:
        return {
            "extracted": self.extracted,
            "reused": self.reused,
            "failed": len(self.failures),
            "failures": [{"id": i, "error": e} for i, e in self.failures],
            "manifest": str(self.manifest_path),
        }


def batch_extract(sources: list[MemeSource], cfg: ExtractorConfig, out_dir,
                  resume: bool = True) -> BatchResult:
    """Extract a whole source list under out_dir and write its manifest.

    Per-sample data problems are logged and skipped; the manifest lists only
    the dumps that exist.  With resume on, files from an earlier run are kept
    when their header still matches the source sample, so an interrupted run
    picks up where it stopped and ends with the identical manifest.
    """
    runtime = ExtractorRuntime.load(cfg)
    out_dir = Path(out_dir)
    names = _dump_names(sources)
    for split in SPLITS:
        if any(s.split == split for s in sources):
            (out_dir / split).mkdir(parents=True, exist_ok=True)

    entries = []
    extracted = reused = 0
    failures: list[tuple[str, str]] = []
    for i, src in enumerate(sources, start=1):
        rel = names[src.id]
        full = out_dir / rel
        if resume and full.exists() and _reusable(full, src):
            reused += 1
        else:
            try:
                write_dump_atomic(extract(src, runtime), full)
                extracted += 1
            except SourceDataError as e:
                log.warning("skipping %s: %s", src.id, e)
                failures.append((src.id, str(e)))
                continue
        entries.append({"split": src.split, "path": rel, "id": src.id,
                        "content_hash": content_hash(src.text)})
        if i % cfg.batch_size == 0:
            log.info("processed %d/%d samples", i, len(sources))

    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(entries, manifest_path)
    log.info("wrote %d entries to %s (%d extracted, %d reused, %d failed)",
             len(entries), manifest_path, extracted, reused, len(failures))
    return BatchResult(extracted, reused, failures, manifest_path)
