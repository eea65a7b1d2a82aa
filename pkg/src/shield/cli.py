"""Command-line front end.

Subcommands: gen-synth, train, eval, dedup, sweep-k, verify-theorem,
inspect.  Machine-readable results go to stdout as JSON; human-oriented
views (the sweep table, log lines) go to stderr.  Exit codes: 0 success,
2 configuration problem, 3 data or file-format problem, 4 internal
invariant failure.  Every command is deterministic for a fixed --seed.
The SHIELD_LOG environment variable (error, info or debug) sets verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .dump_io import (
    DatasetManifest,
    SPLITS,
    SynthConfig,
    dedup,
    gen_synthetic,
    read_dump,
    validate_dump,
)
from .errors import ConfigError, DataError, DumpError, ShieldError, UndefinedMetricError
from .model import (
    ABLATION_NAMES,
    AblationConfig,
    ShieldParams,
    TrainConfig,
    evaluate,
    train,
)
from .reference_graph import build_reference_graph, export_edge_list
from .theorem import run_campaign

log = logging.getLogger("shield")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    wanted = os.environ.get("SHIELD_LOG", "error")
    if wanted not in LOG_LEVELS:
        raise ConfigError(
            f"SHIELD_LOG must be one of {sorted(LOG_LEVELS)}, got {wanted!r}")
    logging.basicConfig(stream=sys.stderr, level=LOG_LEVELS[wanted],
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json_object(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        loaded = json.load(f)  # a parse error carries line and column
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return loaded


def _config_from_dict(cls, raw: dict, path):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


# ------------------------------------------------------------- subcommands

def cmd_gen_synth(args) -> int:
    cfg = SynthConfig()
    if args.config:
        cfg = _config_from_dict(SynthConfig, _load_json_object(args.config), args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    out_dir = Path(args.out)
    manifest = gen_synthetic(cfg, out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    manifest.save(manifest_path)
    counts = {s: len(manifest.for_split(s)) for s in SPLITS}
    _emit({"manifest": str(manifest_path), "counts": counts, "seed": cfg.seed})
    return 0


def _train_setup(args) -> tuple[DatasetManifest, TrainConfig, AblationConfig]:
    manifest = DatasetManifest.load(args.manifest)
    cfg = TrainConfig()
    if args.config:
        cfg = _config_from_dict(TrainConfig, _load_json_object(args.config), args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    ablation = AblationConfig.from_name(args.ablation)
    return manifest, cfg, ablation


def cmd_train(args) -> int:
    manifest, cfg, ablation = _train_setup(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, history = train(manifest.for_split("train"), manifest.for_split("valid"),
                            cfg, ablation)
    params_path = out_dir / "params.shlp"
    params.save(params_path)
    history_path = out_dir / "history.jsonl"
    with open(history_path, "w", encoding="utf-8") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    best = max(row["valid_metric"] for row in history)
    _emit({
        "params": str(params_path),
        "history": str(history_path),
        "ablation": args.ablation,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "best_valid_metric": best,
    })
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if args.split:
        manifest = manifest.for_split(args.split)
    params = ShieldParams.load(args.params)
    metrics = evaluate(manifest, params)
    _emit(metrics.to_dict())
    return 0


def cmd_dedup(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    cleaned = dedup(manifest)
    cleaned.save(args.out)
    _emit({
        "out": str(args.out),
        "kept": len(cleaned),
        "dropped": len(manifest) - len(cleaned),
    })
    return 0


def _parse_k_values(raw: str) -> list[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--k-values must be comma-separated integers, got {raw!r}") from e
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"--k-values must contain positive integers, got {raw!r}")
    return values


def _sweep_one(manifest_path: str, cfg_dict: dict, ablation_name: str, k: int) -> dict:
    manifest = DatasetManifest.load(manifest_path)
    cfg = dataclasses.replace(TrainConfig(**cfg_dict), k_ref=k)
    ablation = AblationConfig.from_name(ablation_name)
    first = read_dump(manifest.resolve(manifest.for_split("train").entries[0]))
    cross_edges = len(build_reference_graph(first, k).cross_edges)
    params, _ = train(manifest.for_split("train"), manifest.for_split("valid"), cfg, ablation)
    metrics = evaluate(manifest.for_split("test"), params)
    return {"k": k, "cross_edges": cross_edges, "auc": metrics.auc,
            "accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1}


def _sweep_table(rows: list[dict]) -> str:
    header = f"{'k':>4} {'cross_edges':>12} {'auc':>8} {'accuracy':>9} {'macro_f1':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['k']:>4d} {r['cross_edges']:>12d} {r['auc']:>8.4f} "
                     f"{r['accuracy']:>9.4f} {r['macro_f1']:>9.4f}")
    return "\n".join(lines)


def cmd_sweep_k(args) -> int:
    manifest, cfg, _ = _train_setup(args)
    if len(manifest.for_split("train")) == 0:
        raise DataError("manifest has no training split")
    values = _parse_k_values(args.k_values)
    cfg_dict = dataclasses.asdict(cfg)
    if args.parallel:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(len(values), os.cpu_count() or 1)) as pool:
            rows = list(pool.map(_sweep_one, [args.manifest] * len(values),
                                 [cfg_dict] * len(values),
                                 [args.ablation] * len(values), values))
    else:
        rows = [_sweep_one(args.manifest, cfg_dict, args.ablation, k) for k in values]
    print(_sweep_table(rows), file=sys.stderr)
    _emit({"rows": rows, "seed": cfg.seed, "ablation": args.ablation})
    return 0


def cmd_verify_theorem(args) -> int:
    report = run_campaign(args.trials, seed=args.seed if args.seed is not None else 0)
    _emit(report.to_dict())
    if not report.ok:
        log.error("%d of %d instances failed", len(report.failures), report.trials)
        return 4
    return 0


def cmd_inspect(args) -> int:
    dump = read_dump(args.dump)
    violations = validate_dump(dump)
    info = {
        "id": dump.id,
        "label": dump.label,
        "n_tokens": dump.n_tokens,
        "token_dim": dump.token_dim,
        "n_patches": dump.n_patches,
        "patch_dim": dump.patch_dim,
        "state_dim": dump.state_dim,
        "grid": [dump.grid_rows, dump.grid_cols],
        "prompt_len": dump.prompt_len,
        "text_range": list(dump.text_range),
        "patch_range": list(dump.patch_range),
        "raw_text": dump.raw_text,
        "valid": not violations,
        "violations": violations,
    }
    _emit(info)
    if args.export_edges:
        graph = build_reference_graph(dump, args.k_ref)
        Path(args.export_edges).write_text(export_edge_list(graph), encoding="utf-8")
    return 0 if not violations else 3


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shield",
        description="Train, evaluate and probe the meme classifier on dump files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a planted-signal synthetic dataset")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train on a manifest's train/valid splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--ablation", choices=ABLATION_NAMES, default="full")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved params on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dedup", help="drop duplicate samples from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="path for the cleaned manifest")
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("sweep-k", help="train and evaluate across neighbor counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--ablation", choices=ABLATION_NAMES, default="full")
    p.add_argument("--k-values", default="1,4,8,16")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--parallel", action="store_true",
                   help="run the sweep points in worker processes")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("verify-theorem", help="run the sign-flip verification campaign")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("inspect", help="print a dump's header and validity")
    p.add_argument("dump", help="dump file path")
    p.add_argument("--export-edges", help="also write the graph's edge list here")
    p.add_argument("--k-ref", type=int, default=4, help="neighbor count for the edge export")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (DataError, DumpError, UndefinedMetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ShieldError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - the contract maps anything else to 4
        log.debug("unexpected failure", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
