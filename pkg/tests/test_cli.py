from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from obfugraph import __version__
from obfugraph.cfg_model import read_corpus
from obfugraph.cli import EXIT_CELL_FAILED, EXIT_ERROR, EXIT_OK, main
from obfugraph.dataset import SplitManifest
from obfugraph.exporter import BENCHMARK_COLUMNS, PREDICTION_COLUMNS, REPORT_COLUMNS


def _run(*argv: object) -> int:
    return main([str(arg) for arg in argv])


def _header(path: Path) -> tuple[str, ...]:
    with path.open(newline="", encoding="utf-8") as handle:
        return tuple(next(csv.reader(handle)))


@pytest.fixture
def workspace(tmp_path: Path) -> Path:
    config = tmp_path / "generator.json"
    config.write_text(json.dumps({"seed": 0, "n_functions": 12, "block_max": 8, "instr_mean": 4.0}), encoding="utf-8")
    assert _run("synth", "--config", config, "--seed", 7, "--out", tmp_path / "corpus.jsonl") == EXIT_OK
    assert _run(
        "split", "--corpus", tmp_path / "corpus.jsonl", "--seed", 1, "--bins", 1, "--out", tmp_path / "manifest.json"
    ) == EXIT_OK
    return tmp_path


def test_synth_writes_corpus_and_run_record(workspace: Path) -> None:
    corpus = read_corpus(workspace / "corpus.jsonl")
    assert len(corpus) == 12 * 11

    record = json.loads((workspace / "corpus.jsonl.run.json").read_text(encoding="utf-8"))
    assert record["subcommand"] == "synth"
    assert record["version"] == __version__
    assert record["arguments"]["seed"] == 7
    assert len(record["input_digest"]) == 40


def test_split_prints_class_ratios(workspace: Path, capsys) -> None:
    manifest = SplitManifest.load(workspace / "manifest.json")
    assert len(manifest.members("train")) == 8 * 11
    assert (workspace / "manifest.json.run.json").exists()

    assert _run("split", "--corpus", workspace / "corpus.jsonl", "--seed", 1, "--bins", 1, "--out", workspace / "again.json") == EXIT_OK
    out = capsys.readouterr().out
    assert "ratio binary" in out
    assert (workspace / "again.json").read_text(encoding="utf-8") == (workspace / "manifest.json").read_text(encoding="utf-8")


def test_featurize_exports_one_record_per_function(workspace: Path) -> None:
    out = workspace / "features.jsonl"
    code = _run(
        "featurize", "--corpus", workspace / "corpus.jsonl", "--features", "tfidf128",
        "--manifest", workspace / "manifest.json", "--out", out,
    )
    assert code == EXIT_OK
    records = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert len(records) == 12 * 11
    assert {record["scheme"] for record in records} == {"tfidf128"}


def test_train_eval_and_predict(workspace: Path) -> None:
    tree_config = workspace / "trees.json"
    tree_config.write_text(json.dumps({"n_trees": 3, "max_depth": 4}), encoding="utf-8")
    model = workspace / "rf.json"
    code = _run(
        "train", "--corpus", workspace / "corpus.jsonl", "--manifest", workspace / "manifest.json",
        "--model", "rf", "--features", "graph23", "--task", "multiclass", "--seed", 0,
        "--config", tree_config, "--out", model,
    )
    assert code == EXIT_OK
    assert json.loads(model.read_text(encoding="utf-8"))["algorithm"] == "rf"
    assert (workspace / "rf.json.run.json").exists()
    assert not (workspace / "rf.json.log.csv").exists()

    code = _run(
        "eval", "--model", model, "--corpus", workspace / "corpus.jsonl", "--manifest", workspace / "manifest.json",
        "--dataset", "synthetic", "--lenient", "--out", workspace / "report.csv",
    )
    assert code == EXIT_OK
    assert _header(workspace / "report.csv") == REPORT_COLUMNS
    report = json.loads((workspace / "report.json").read_text(encoding="utf-8"))["reports"][0]
    assert report["mode"] == "obfuscated_only"
    assert report["lenient"] is True
    assert len(report["classes"]) == 10
    assert (workspace / "report.csv.run.json").exists()

    code = _run("predict", "--model", model, "--corpus", workspace / "corpus.jsonl", "--out", workspace / "pred.csv")
    assert code == EXIT_OK
    with (workspace / "pred.csv").open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == PREDICTION_COLUMNS
    assert len(rows) == 1 + 12 * 11
    assert all(row[1] != "None" for row in rows[1:])


def test_gnn_training_writes_its_log(workspace: Path) -> None:
    gnn_config = workspace / "gnn.json"
    gnn_config.write_text(json.dumps({"n_layers": 1, "hidden": 4, "epochs": 2}), encoding="utf-8")
    code = _run(
        "train", "--corpus", workspace / "corpus.jsonl", "--manifest", workspace / "manifest.json",
        "--model", "gcn", "--features", "mclass27", "--seed", 0, "--config", gnn_config, "--out", workspace / "gcn.json",
    )
    assert code == EXIT_OK
    assert len((workspace / "gcn.json.log.csv").read_text(encoding="utf-8").splitlines()) == 1 + 2


def test_benchmark_exit_code_reflects_failed_cells(workspace: Path) -> None:
    spec = workspace / "spec.json"
    spec.write_text(
        json.dumps(
            {
                "cells": [{"features": "graph23", "algorithm": "rf"}, {"features": "asm_sem", "algorithm": "gb"}],
                "tasks": ["binary"],
                "tree_config": {"n_trees": 3},
            }
        ),
        encoding="utf-8",
    )
    out = workspace / "bench"
    code = _run(
        "benchmark", "--corpus", workspace / "corpus.jsonl", "--manifest", workspace / "manifest.json",
        "--spec", spec, "--seed", 0, "--out", out,
    )
    assert code == EXIT_CELL_FAILED
    assert _header(out / "benchmark.csv") == BENCHMARK_COLUMNS
    statuses = [row["status"] for row in json.loads((out / "benchmark.json").read_text(encoding="utf-8"))["rows"]]
    assert statuses == ["ok", "failed"]
    assert (out / "benchmark.csv.run.json").exists()


def test_library_errors_exit_with_a_message(tmp_path: Path, capsys) -> None:
    code = _run("split", "--corpus", tmp_path / "missing.jsonl", "--seed", 0, "--out", tmp_path / "m.json")
    assert code == EXIT_ERROR
    assert "obfugraph split: cannot read corpus" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_bad_spec_exits_with_a_message(workspace: Path, capsys) -> None:
    spec = workspace / "spec.json"
    spec.write_text(json.dumps({"cells": [{"features": "graph23", "algorithm": "svm"}]}), encoding="utf-8")
    code = _run(
        "benchmark", "--corpus", workspace / "corpus.jsonl", "--manifest", workspace / "manifest.json",
        "--spec", spec, "--seed", 0, "--out", workspace / "bench",
    )
    assert code == EXIT_ERROR
    assert "unknown algorithm" in capsys.readouterr().err


def test_version_flag(capsys) -> None:
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out
