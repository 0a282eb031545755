from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

from conftest import make_sample
from obfugraph.cfg_model import FunctionSample, Obfuscation
from obfugraph.eval import evaluate
from obfugraph.exporter import (
    BENCHMARK_COLUMNS,
    PREDICTION_COLUMNS,
    REPORT_COLUMNS,
    ReportBundle,
    report_rows,
    write_lines,
)
from obfugraph.pipeline import STATUS_OK, STATUS_UNIMPLEMENTED, BenchmarkCell, BenchmarkTable


@dataclass
class _Constant:
    answer: str
    task: str = "binary"
    model_id: str = "const"
    feature_scheme: str = "graph23"

    def predict(self, samples: Sequence[FunctionSample]) -> List[str]:
        return [self.answer] * len(samples)


def _report(diamond_cfg):
    corpus = [make_sample(f"f{i}", diamond_cfg, label) for i in range(2) for label in (Obfuscation.NONE, Obfuscation.SPLIT)]
    return evaluate(_Constant("obfuscated"), corpus, "binary", "all", dataset_id="unit")


def _read_csv(path: Path) -> List[List[str]]:
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


def test_bundle_strips_known_suffixes(tmp_path: Path) -> None:
    assert ReportBundle.for_output(tmp_path / "eval.csv").stem == "eval"
    assert ReportBundle.for_output(tmp_path / "eval.json").stem == "eval"
    assert ReportBundle.for_output(tmp_path / "eval.v2").stem == "eval.v2"
    assert ReportBundle.for_output(tmp_path / "eval").paths == (tmp_path / "eval.csv", tmp_path / "eval.json")


def test_report_rows_carry_support_and_recall(diamond_cfg) -> None:
    rows = report_rows(_report(diamond_cfg))
    assert [row[5] for row in rows] == ["unobfuscated", "obfuscated"]
    assert [row[6] for row in rows] == [2, 2]
    assert [row[7] for row in rows] == ["0.0", "1.0"]
    assert rows[0][:5] == ("unit", "const", "graph23", "binary", "all")
    assert rows[0][8] == "0.5"


def test_report_bundle_writes_csv_and_json(tmp_path: Path, diamond_cfg) -> None:
    report = _report(diamond_cfg)
    csv_path, json_path = ReportBundle.for_output(tmp_path / "out" / "eval.csv").write_report([report])

    table = _read_csv(csv_path)
    assert tuple(table[0]) == REPORT_COLUMNS
    assert len(table) == 3
    data = json.loads(json_path.read_text(encoding="utf-8"))
    assert data["reports"][0]["confusion_matrix"] == [[0, 2], [0, 2]]


def test_benchmark_csv_leaves_missing_values_empty(tmp_path: Path) -> None:
    table = BenchmarkTable(
        [
            BenchmarkCell("graph23", 23, "rf", "synthetic", "binary", 0.875, 1.5),
            BenchmarkCell("identity", None, "gat", "synthetic", "binary", None, 0.0, STATUS_UNIMPLEMENTED),
        ]
    )
    csv_path, json_path = ReportBundle(tmp_path, "benchmark").write_benchmark(table)

    rows = _read_csv(csv_path)
    assert tuple(rows[0]) == BENCHMARK_COLUMNS
    assert rows[1] == ["graph23", "23", "rf", "synthetic", "binary", "0.875", "1.5", STATUS_OK]
    assert rows[2] == ["identity", "", "gat", "synthetic", "binary", "", "0.0", STATUS_UNIMPLEMENTED]
    assert [row["status"] for row in json.loads(json_path.read_text(encoding="utf-8"))["rows"]] == ["ok", "unimplemented"]


def test_predictions_csv(tmp_path: Path) -> None:
    path = ReportBundle(tmp_path, "pred").write_predictions(["a", "b"], ["Flatten", "None"], [0.75, 0.5])
    assert _read_csv(path) == [list(PREDICTION_COLUMNS), ["a", "Flatten", "0.75"], ["b", "None", "0.5"]]


def test_write_lines(tmp_path: Path) -> None:
    path = write_lines(tmp_path / "ids.txt", ["x", "y"])
    assert path.read_text(encoding="utf-8") == "x\ny\n"
