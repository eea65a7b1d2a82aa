"""End-to-end: extracted dumps feed the classification engine.

The engine is exercised strictly through its command line; nothing here
imports it.  One toy meme set is extracted once and reused across tests.
"""

import filecmp
import json
import subprocess
import sys

import pytest

from conftest import ENGINE_CLI, make_toy_dataset, render_meme

EXTRACT_CLI = [sys.executable, "-m", "shield_extractor.cli"]
N_SAMPLES = 16


def run(cmd, **kw):
    proc = subprocess.run(cmd, capture_output=True, text=True, **kw)
    assert proc.returncode == 0, f"{cmd} failed:\n{proc.stdout}\n{proc.stderr}"
    return json.loads(proc.stdout) if proc.stdout.strip() else None


@pytest.fixture(scope="module")
def extracted(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyset")
    sources = make_toy_dataset(root / "memes", n=N_SAMPLES)
    out_dir = root / "dataset"
    summary = run(EXTRACT_CLI + ["run", "--source", str(sources), "--out", str(out_dir)])
    assert summary["extracted"] == N_SAMPLES and summary["failed"] == 0
    return {"sources": sources, "out": out_dir, "manifest": out_dir / "manifest.jsonl"}


def manifest_rows(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_every_dump_passes_engine_validation(extracted):
    rows = manifest_rows(extracted["manifest"])
    assert len(rows) == N_SAMPLES
    for row in rows:
        report = run(ENGINE_CLI + ["inspect", str(extracted["out"] / row["path"])])
        assert report["valid"] is True
        assert report["violations"] == []
        assert report["id"] == row["id"]
        # both modalities land in the language model's width
        assert report["token_dim"] == report["patch_dim"] == 32
        assert report["state_dim"] == 32


def test_engine_trains_and_evaluates_on_extracted_dumps(extracted, tmp_path):
    run_dir = tmp_path / "run"
    report = run(ENGINE_CLI + ["train", "--manifest", str(extracted["manifest"]),
                               "--out", str(run_dir), "--seed", "11"])
    assert (run_dir / "params.shlp").exists()
    assert report["epochs"] == 10
    metrics = run(ENGINE_CLI + ["eval", "--manifest", str(extracted["manifest"]),
                                "--params", str(run_dir / "params.shlp"),
                                "--split", "test"])
    assert metrics["n"] == 4
    assert set(metrics) >= {"auc", "accuracy", "macro_f1", "per_class"}
    assert 0.0 <= metrics["auc"] <= 1.0


def test_two_runs_are_byte_identical(tmp_path):
    sources = make_toy_dataset(tmp_path / "memes", n=12)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        summary = run(EXTRACT_CLI + ["run", "--source", str(sources), "--out", str(out)])
        assert summary["extracted"] == 12
    rows = manifest_rows(out_a / "manifest.jsonl")
    assert (out_a / "manifest.jsonl").read_bytes() == (out_b / "manifest.jsonl").read_bytes()
    for row in rows:
        assert filecmp.cmp(out_a / row["path"], out_b / row["path"], shallow=False), row["path"]


def test_engine_dedup_honors_extractor_hashes(extracted, tmp_path):
    report = run(ENGINE_CLI + ["dedup", "--manifest", str(extracted["manifest"]),
                               "--out", str(tmp_path / "clean.jsonl")])
    assert report == {"dropped": 0, "kept": N_SAMPLES,
                      "out": str(tmp_path / "clean.jsonl")}

    # same text in test and train must collapse onto the train copy
    root = tmp_path / "dups"
    root.mkdir()
    rows = []
    for i, split in enumerate(["test", "train", "valid"]):
        render_meme(root / f"img{i}.png", label=i % 2, seed=50 + i)
        rows.append({"id": f"dup-{split}", "image_path": f"img{i}.png",
                     "text": "identical words" if split != "valid" else "different words",
                     "label": i % 2, "split": split})
    src = root / "sources.jsonl"
    src.write_text("".join(json.dumps(r) + "\n" for r in rows))
    out = tmp_path / "dupset"
    run(EXTRACT_CLI + ["run", "--source", str(src), "--out", str(out)])
    report = run(ENGINE_CLI + ["dedup", "--manifest", str(out / "manifest.jsonl"),
                               "--out", str(tmp_path / "dedup.jsonl")])
    assert report["kept"] == 2 and report["dropped"] == 1
    kept = manifest_rows(tmp_path / "dedup.jsonl")
    assert {r["id"] for r in kept} == {"dup-train", "dup-valid"}
