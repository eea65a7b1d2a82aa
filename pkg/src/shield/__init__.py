"""Desk-scale hateful-meme classification engine.

Three feature channels (fused context vector, language-model state, and a
cross-modal reference-graph embedding) feed a small MLP head, trained on
serialized embedding dumps.  A companion verifier checks the closed-form
sign-flip sensitivity bound of linear graph convolutions.
"""

from .dump_io import (
    DatasetManifest,
    MemeDump,
    SynthConfig,
    content_hash,
    dedup,
    gen_synthetic,
    read_dump,
    validate_dump,
    write_dump,
)
from .errors import ShieldError
from .model import (
    AblationConfig,
    Metrics,
    ShieldParams,
    TrainConfig,
    evaluate,
    forward,
    predict,
    train,
)
from .theorem import run_campaign, verify_theorem

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "DatasetManifest",
    "MemeDump",
    "Metrics",
    "ShieldError",
    "ShieldParams",
    "SynthConfig",
    "TrainConfig",
    "content_hash",
    "dedup",
    "evaluate",
    "forward",
    "gen_synthetic",
    "predict",
    "read_dump",
    "run_campaign",
    "train",
    "validate_dump",
    "verify_theorem",
    "write_dump",
    "__version__",
]
