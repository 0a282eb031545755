"""Report artifacts: CSV + JSON twins for evaluations, benchmarks and predictions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from obfugraph.eval import EvalReport
from obfugraph.pipeline import BenchmarkTable
from obfugraph.utils import stable_json, write_text

REPORT_COLUMNS = ("dataset", "model", "features", "task", "mode", "class", "support", "recall", "balanced_accuracy")
BENCHMARK_COLUMNS = ("features", "dim", "algorithm", "dataset", "task", "balanced_accuracy", "runtime_s", "status")
PREDICTION_COLUMNS = ("function_id", "predicted", "score")


def _render_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _cell(value: object) -> object:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def report_rows(report: EvalReport) -> List[Tuple[object, ...]]:
    """One row per class; support is the confusion-matrix row sum."""
    rows = []
    for index, name in enumerate(report.classes):
        rows.append(
            (
                report.dataset_id,
                report.model_id,
                report.feature_scheme,
                report.task,
                report.mode,
                name,
                int(report.confusion[index].sum()),
                _cell(report.per_class_recall[index]),
                repr(report.balanced_accuracy),
            )
        )
    return rows


def benchmark_rows(table: BenchmarkTable) -> List[Tuple[object, ...]]:
    return [
        (
            row.features,
            _cell(row.dim),
            row.algorithm,
            row.dataset,
            row.task,
            _cell(row.balanced_accuracy),
            _cell(row.runtime_s),
            row.status,
        )
        for row in table.rows
    ]


@dataclass(frozen=True)
class ReportBundle:
    """Files sharing one output stem: ``<stem>.csv`` and ``<stem>.json``."""

    root_dir: Path
    stem: str

    @classmethod
    def for_output(cls, output: Path) -> "ReportBundle":
        stem = output.name[: -len(output.suffix)] if output.suffix in (".csv", ".json") else output.name
        return cls(root_dir=output.parent, stem=stem)

    @property
    def csv_path(self) -> Path:
        return self.root_dir / f"{self.stem}.csv"

    @property
    def json_path(self) -> Path:
        return self.root_dir / f"{self.stem}.json"

    @property
    def paths(self) -> Tuple[Path, Path]:
        return self.csv_path, self.json_path

    def write_report(self, reports: Sequence[EvalReport]) -> Tuple[Path, Path]:
        rows = [row for report in reports for row in report_rows(report)]
        write_text(self.csv_path, _render_csv(REPORT_COLUMNS, rows))
        write_text(self.json_path, stable_json({"reports": [report.to_dict() for report in reports]}) + "\n")
        return self.paths

    def write_benchmark(self, table: BenchmarkTable) -> Tuple[Path, Path]:
        write_text(self.csv_path, _render_csv(BENCHMARK_COLUMNS, benchmark_rows(table)))
        write_text(self.json_path, stable_json(table.to_dict()) + "\n")
        return self.paths

    def write_predictions(self, function_ids: Sequence[str], predicted: Sequence[str], scores: Sequence[float]) -> Path:
        rows = [(fid, label, repr(float(score))) for fid, label, score in zip(function_ids, predicted, scores)]
        write_text(self.csv_path, _render_csv(PREDICTION_COLUMNS, rows))
        return self.csv_path


def write_lines(path: Path, lines: Iterable[str]) -> Path:
    write_text(path, "".join(f"{line}\n" for line in lines))
    return path
