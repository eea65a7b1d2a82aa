"""Turns image+text memes into SHIELD dump v1 files.

The classification engine never sees raw memes; it consumes binary dumps of
pre-extracted embeddings.  This package produces those dumps: a frozen
vision encoder grids the image into patch features, a projection lifts them
into a causal language model's width, the model runs over a prompt that
interleaves patches, the meme text and a fixed question, and the resulting
hidden states and attention land in a dump file plus a dataset manifest.

The shipped encoders are deterministic desk-scale toys with the real data
flow; swap them out by id to use something bigger.
"""

from .dump_format import DumpRecord, check_record, content_hash, dump_bytes, write_dump_atomic
from .encoders import (
    LM_MODELS,
    VISION_MODELS,
    LmOutput,
    ToyCausalLM,
    ToyVisionEncoder,
    VisionProjection,
    token_id,
    tokenize,
)
from .errors import ConfigError, ExtractorError, ModelLoadError, SourceDataError
from .pipeline import (
    DEFAULT_TEMPLATE,
    TEMPLATES,
    BatchResult,
    ExtractorConfig,
    ExtractorRuntime,
    batch_extract,
    extract,
    extract_dump,
    parse_template,
)
from .sources import MemeSource, assign_split, read_sources

__version__ = "0.1.0"

__all__ = [
    "BatchResult",
    "ConfigError",
    "DEFAULT_TEMPLATE",
    "DumpRecord",
    "ExtractorConfig",
    "ExtractorError",
    "ExtractorRuntime",
    "LM_MODELS",
    "LmOutput",
    "MemeSource",
    "ModelLoadError",
    "SourceDataError",
    "TEMPLATES",
    "ToyCausalLM",
    "ToyVisionEncoder",
    "VISION_MODELS",
    "VisionProjection",
    "assign_split",
    "batch_extract",
    "check_record",
    "content_hash",
    "dump_bytes",
    "extract",
    "extract_dump",
    "parse_template",
    "read_sources",
    "token_id",
    "tokenize",
    "write_dump_atomic",
]
