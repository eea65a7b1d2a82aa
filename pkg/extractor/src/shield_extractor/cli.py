"""Command-line front end for the extraction pipeline.

Results go to stdout as one JSON object; logs go to stderr, controlled by
SHIELD_LOG (error, info or debug).  Exit codes match the engine's CLI:
0 success, 2 configuration problem, 3 data problem, 4 model or internal
problem.  A batch with some per-sample failures still exits 0 as long as at
least one dump was produced; the failures are listed in the summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .encoders import LM_MODELS, VISION_MODELS
from .errors import ConfigError, ExtractorError, ModelLoadError, SourceDataError
from .pipeline import ExtractorConfig, batch_extract
from .sources import read_sources

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("SHIELD_LOG", "error").lower()
    if name not in _LOG_LEVELS:
        raise ConfigError(f"SHIELD_LOG must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _emit(obj: dict) -> None:
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _load_config(args) -> ExtractorConfig:
    raw: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        raw.update(loaded)
    if args.vision:
        raw["vision_encoder"] = args.vision
    if args.lm:
        raw["language_model"] = args.lm
    if args.template:
        raw["prompt_template"] = pipeline.TEMPLATES.get(args.template, args.template)
    if args.attention_layer is not None:
        raw["attention_layer"] = args.attention_layer
    if args.attention_heads is not None:
        heads = args.attention_heads
        raw["attention_heads"] = heads if heads == "mean" else int(heads)
    if args.checkpoint:
        raw["checkpoint_path"] = args.checkpoint
    if args.batch_size is not None:
        raw["batch_size"] = args.batch_size
    return ExtractorConfig.from_dict(raw)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    sources = read_sources(args.source)
    result = batch_extract(sources, cfg, args.out, resume=not args.no_resume)
    _emit(result.to_dict())
    if result.succeeded == 0:
        log.error("no sample could be extracted")
        return 3
    return 0


def cmd_models(args) -> int:
    _emit({
        "vision": {mid: {"grid": [s.grid_rows, s.grid_cols], "feature_dim": s.feature_dim}
                   for mid, s in sorted(VISION_MODELS.items())},
        "language": {mid: {"hidden_dim": s.hidden_dim, "layers": s.n_layers,
                           "heads": s.n_heads}
                     for mid, s in sorted(LM_MODELS.items())},
    })
    return 0


def cmd_templates(args) -> int:
    _emit({"default": "claims", "templates": pipeline.TEMPLATES})
    return 0


def _head_arg(value: str) -> str:
    if value == "mean":
        return value
    try:
        int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'mean' or a head index, got {value!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shield-extract",
                                     description="Turn image+text memes into dump files "
                                                 "the classification engine can train on.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="extract every sample in a source manifest")
    run.add_argument("--source", required=True, help="CSV or JSON-lines source manifest")
    run.add_argument("--out", required=True, help="output dataset directory")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--vision", help="vision encoder id")
    run.add_argument("--lm", help="language model id")
    run.add_argument("--template", help="template name or literal template string")
    run.add_argument("--attention-layer", type=int, default=None)
    run.add_argument("--attention-heads", type=_head_arg, default=None,
                     help="'mean' or one head's index")
    run.add_argument("--checkpoint", help="externally fine-tuned language model weights (.npz)")
    run.add_argument("--batch-size", type=int, default=None)
    run.add_argument("--no-resume", action="store_true",
                     help="re-extract even when a matching dump already exists")
    run.set_defaults(fn=cmd_run)

    models = sub.add_parser("models", help="list the available frozen encoders")
    models.set_defaults(fn=cmd_models)

    templates = sub.add_parser("templates", help="list the shipped prompt templates")
    templates.set_defaults(fn=cmd_templates)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, SourceDataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ModelLoadError as e:
        print(f"model error: {e}", file=sys.stderr)
        return 4
    except ExtractorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
