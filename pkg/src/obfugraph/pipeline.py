"""Benchmark orchestration: (feature scheme x algorithm) cells over one split."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from obfugraph import __version__
from obfugraph.cfg_model import FunctionSample, filter_opt_level
from obfugraph.config import GnnConfig, TreeConfig
from obfugraph.dataset import SplitManifest
from obfugraph.errors import ConfigError, ModelError
from obfugraph.eval import MODES, TASKS, evaluate
from obfugraph.featurize import SCHEMES
from obfugraph.models import UNIMPLEMENTED_ALGORITHMS, normalize_algorithm, train_model
from obfugraph.utils import normalize_token, payload_digest, stable_json, write_text

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_FAILED = "failed"
STATUS_UNIMPLEMENTED = "unimplemented"


@dataclass(frozen=True)
class CellSpec:
    features: str
    algorithm: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", normalize_token(self.features))
        object.__setattr__(self, "algorithm", normalize_token(self.algorithm))
        if self.features not in SCHEMES:
            raise ConfigError(f"benchmark cell: unknown feature scheme {self.features!r}")
        if self.algorithm not in UNIMPLEMENTED_ALGORITHMS:
            try:
                object.__setattr__(self, "algorithm", normalize_algorithm(self.algorithm))
            except ModelError as exc:
                raise ConfigError(f"benchmark cell: {exc}") from exc

    def to_dict(self) -> Dict[str, str]:
        return {"features": self.features, "algorithm": self.algorithm}


@dataclass(frozen=True)
class BenchmarkSpec:
    cells: Tuple[CellSpec, ...]
    dataset: str = "synthetic"
    tasks: Tuple[str, ...] = TASKS
    mode: str = "obfuscated_only"
    opt_level: Optional[str] = None
    tree_config: Dict[str, Any] = field(default_factory=dict)
    gnn_config: Dict[str, Any] = field(default_factory=dict)
    tune: bool = False
    tree_grid: Optional[Dict[str, list]] = None
    gnn_space: Optional[Dict[str, Any]] = None
    n_trials: int = 20
    n_seeds: int = 3
    include_degenerate: bool = False
    record_runtime: bool = True

    def __post_init__(self) -> None:
        if not self.cells:
            raise ConfigError("benchmark spec lists no cells")
        for task in self.tasks:
            if task not in TASKS:
                raise ConfigError(f"benchmark spec: unknown task {task!r}")
        if normalize_token(self.mode) not in MODES:
            raise ConfigError(f"benchmark spec: unknown mode {self.mode!r}")
        object.__setattr__(self, "mode", normalize_token(self.mode))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BenchmarkSpec":
        known = {item.name for item in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"benchmark spec: unknown configuration key {key!r}")
        payload = dict(data)
        cells = []
        for cell in payload.pop("cells", []):
            extra = sorted(set(cell) - {"features", "algorithm"})
            if extra:
                raise ConfigError(f"benchmark cell: unknown configuration key {extra[0]!r}")
            cells.append(CellSpec(features=cell["features"], algorithm=cell["algorithm"]))
        payload["tasks"] = tuple(payload.get("tasks", TASKS))
        if payload.get("gnn_space"):
            payload["gnn_space"] = {
                name: (space["low"], space["high"]) if isinstance(space, dict) else space
                for name, space in payload["gnn_space"].items()
            }
        return cls(cells=tuple(cells), **payload)

    @classmethod
    def load(cls, path: Path) -> "BenchmarkSpec":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read benchmark spec {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cells": [cell.to_dict() for cell in self.cells],
            "dataset": self.dataset,
            "tasks": list(self.tasks),
            "mode": self.mode,
            "opt_level": self.opt_level,
            "tree_config": self.tree_config,
            "gnn_config": self.gnn_config,
            "tune": self.tune,
            "tree_grid": self.tree_grid,
            "gnn_space": self.gnn_space,
            "n_trials": self.n_trials,
            "n_seeds": self.n_seeds,
            "include_degenerate": self.include_degenerate,
            "record_runtime": self.record_runtime,
        }


@dataclass
class BenchmarkCell:
    features: str
    dim: Optional[int]
    algorithm: str
    dataset: str
    task: str
    balanced_accuracy: Optional[float]
    runtime_s: float
    status: str = STATUS_OK
    error: str = ""
    report: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "features": self.features,
            "dim": self.dim,
            "algorithm": self.algorithm,
            "dataset": self.dataset,
            "task": self.task,
            "balanced_accuracy": self.balanced_accuracy,
            "runtime_s": self.runtime_s,
            "status": self.status,
            "error": self.error,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BenchmarkCell":
        return cls(**data)


@dataclass
class BenchmarkTable:
    rows: List[BenchmarkCell] = field(default_factory=list)

    @property
    def failed(self) -> List[BenchmarkCell]:
        return [row for row in self.rows if row.status == STATUS_FAILED]

    def score(self, features: str, algorithm: str, task: str) -> Optional[float]:
        for row in self.rows:
            if (row.features, row.algorithm, row.task) == (features, algorithm, task):
                return row.balanced_accuracy
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {"version": __version__, "rows": [row.to_dict() for row in self.rows]}


def _cell_key(corpus_digest: str, manifest: SplitManifest, spec: BenchmarkSpec, cell: CellSpec, task: str, seed: int) -> str:
    return payload_digest(
        {
            "corpus": corpus_digest,
            "manifest": manifest.to_dict(),
            "spec": {**spec.to_dict(), "cells": []},
            "cell": cell.to_dict(),
            "task": task,
            "seed": seed,
            "version": __version__,
        }
    )


def _cell_cache_path(cache_dir: Path, key: str) -> Path:
    return cache_dir / "cells" / f"cell_{key}.json"


def _run_cell(
    cell: CellSpec,
    task: str,
    spec: BenchmarkSpec,
    splits: Dict[str, List[FunctionSample]],
    seed: int,
) -> BenchmarkCell:
    started = time.perf_counter()
    tree_config = None
    gnn_config = None
    if cell.algorithm in ("rf", "gb"):
        kind = "random_forest" if cell.algorithm == "rf" else "gradient_boosting"
        tree_config = TreeConfig.from_dict({**spec.tree_config, "kind": kind})
    else:
        gnn_config = GnnConfig.from_dict({**spec.gnn_config, "architecture": cell.algorithm})
    outcome = train_model(
        cell.algorithm,
        cell.features,
        splits["train"],
        splits["validation"],
        task,
        spec.mode,
        seed,
        tree_config=tree_config,
        gnn_config=gnn_config,
        tune=spec.tune,
        tree_grid=spec.tree_grid,
        gnn_space=spec.gnn_space,
        n_trials=spec.n_trials,
        n_seeds=spec.n_seeds,
    )
    report = evaluate(outcome.model, splits["test"], task, spec.mode, dataset_id=spec.dataset)
    runtime = time.perf_counter() - started if spec.record_runtime else 0.0
    return BenchmarkCell(
        features=cell.features,
        dim=outcome.model.extractor.dim,
        algorithm=cell.algorithm,
        dataset=spec.dataset,
        task=task,
        balanced_accuracy=report.balanced_accuracy,
        runtime_s=round(runtime, 3),
        report=report.to_dict(),
    )


def run_benchmark(
    corpus: Sequence[FunctionSample],
    manifest: SplitManifest,
    spec: BenchmarkSpec,
    seed: int,
    cache_dir: Optional[Path] = None,
) -> BenchmarkTable:
    """Train on train (tuning on validation), score on test; one row per cell and task."""
    corpus = filter_opt_level(corpus, spec.opt_level)
    if not spec.include_degenerate:
        excluded = sum(1 for sample in corpus if sample.degenerate)
        if excluded:
            logger.info("Excluding %d degenerate samples", excluded)
        corpus = [sample for sample in corpus if not sample.degenerate]
    splits = {name: manifest.select(corpus, name) for name in ("train", "validation", "test")}
    corpus_digest = payload_digest(sorted(sample.function_id for sample in corpus))
    table = BenchmarkTable()
    jobs = [(cell, task) for cell in spec.cells for task in spec.tasks]

    for cell, task in tqdm(jobs, desc="benchmark", disable=None):
        if cell.algorithm in UNIMPLEMENTED_ALGORITHMS:
            table.rows.append(
                BenchmarkCell(cell.features, None, cell.algorithm, spec.dataset, task, None, 0.0, STATUS_UNIMPLEMENTED)
            )
            continue
        cache_path = None
        if cache_dir is not None:
            cache_path = _cell_cache_path(cache_dir, _cell_key(corpus_digest, manifest, spec, cell, task, seed))
            if cache_path.exists():
                table.rows.append(BenchmarkCell.from_dict(json.loads(cache_path.read_text(encoding="utf-8"))))
                logger.info("Cell %s/%s/%s loaded from cache", cell.features, cell.algorithm, task)
                continue
        try:
            row = _run_cell(cell, task, spec, splits, seed)
        except Exception as exc:  # recorded in the table
            logger.warning("Cell %s/%s/%s failed: %s", cell.features, cell.algorithm, task, exc)
            table.rows.append(
                BenchmarkCell(cell.features, None, cell.algorithm, spec.dataset, task, None, 0.0, STATUS_FAILED, str(exc))
            )
            continue
        logger.info("Cell %s/%s/%s: %.4f", cell.features, cell.algorithm, task, row.balanced_accuracy or 0.0)
        if cache_path is not None:
            write_text(cache_path, stable_json(row.to_dict()) + "\n")
        table.rows.append(row)
    return table
