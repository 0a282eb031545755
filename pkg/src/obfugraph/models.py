"""Trained detectors: a feature extractor bound to a tree ensemble or a GNN."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from obfugraph.cfg_model import FunctionSample
from obfugraph.config import DEFAULT_BOOSTING_GRID, DEFAULT_GNN_SPACE, DEFAULT_TREE_GRID, GnnConfig, TreeConfig
from obfugraph.errors import ModelError
from obfugraph.eval import eligible_samples, target_name, task_classes
from obfugraph.featurize import FeatureExtractor
from obfugraph.gnn import GnnModel, GraphData, graph_from_cfg, train_gnn, tune_gnn
from obfugraph.trees import TreeEnsembleModel, grid_search_trees, train_trees
from obfugraph.utils import stable_json, write_text

logger = logging.getLogger(__name__)

FORMAT_NAME = "obfugraph.model"
FORMAT_VERSION = 1
TREE_ALGORITHMS = {"rf": "random_forest", "gb": "gradient_boosting"}
GNN_ALGORITHMS = ("gcn", "sage", "gin")
UNIMPLEMENTED_ALGORITHMS = ("gat", "unet")
ALGORITHMS = tuple(TREE_ALGORITHMS) + GNN_ALGORITHMS

Estimator = Union[TreeEnsembleModel, GnnModel]


def normalize_algorithm(name: str) -> str:
    lowered = name.strip().lower().replace("-", "_")
    reverse = {kind: short for short, kind in TREE_ALGORITHMS.items()}
    lowered = reverse.get(lowered, lowered)
    if lowered not in ALGORITHMS:
        raise ModelError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")
    return lowered


def to_graphs(extractor: FeatureExtractor, samples: Sequence[FunctionSample], labels: Optional[Sequence[int]] = None) -> List[GraphData]:
    graphs = []
    for position, sample in enumerate(samples):
        label = -1 if labels is None else int(labels[position])
        matrix = extractor.node_matrix(sample)
        graphs.append(graph_from_cfg(sample.cfg, matrix.values, label=label, graph_id=sample.function_id))
    return graphs


@dataclass
class TrainedModel:
    algorithm: str
    task: str
    mode: str
    classes: Tuple[str, ...]
    extractor: FeatureExtractor
    estimator: Estimator
    model_id: str = ""

    def __post_init__(self) -> None:
        if not self.model_id:
            self.model_id = f"{self.algorithm}:{self.extractor.scheme}"

    @property
    def feature_scheme(self) -> str:
        return self.extractor.scheme

    def predict_scores(self, samples: Sequence[FunctionSample]) -> np.ndarray:
        if not samples:
            return np.zeros((0, len(self.classes)))
        if isinstance(self.estimator, TreeEnsembleModel):
            return self.estimator.predict_scores(self.extractor.graph_matrix(samples))
        return self.estimator.predict_scores(to_graphs(self.extractor, samples))

    def predict(self, samples: Sequence[FunctionSample]) -> List[str]:
        scores = self.predict_scores(samples)
        return [self.classes[index] for index in np.argmax(scores, axis=1)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "algorithm": self.algorithm,
            "task": self.task,
            "mode": self.mode,
            "classes": list(self.classes),
            "model_id": self.model_id,
            "extractor": self.extractor.to_dict(),
            "estimator": self.estimator.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainedModel":
        if data.get("format") != FORMAT_NAME or data.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported model file format {data.get('format')!r} v{data.get('version')!r}")
        algorithm = normalize_algorithm(data["algorithm"])
        estimator: Estimator
        if algorithm in TREE_ALGORITHMS:
            estimator = TreeEnsembleModel.from_dict(data["estimator"])
        else:
            estimator = GnnModel.from_dict(data["estimator"])
        return cls(
            algorithm=algorithm,
            task=data["task"],
            mode=data["mode"],
            classes=tuple(data["classes"]),
            extractor=FeatureExtractor.from_dict(data["extractor"]),
            estimator=estimator,
            model_id=data.get("model_id", ""),
        )

    def save(self, path: Path) -> None:
        write_text(path, stable_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: Path) -> "TrainedModel":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelError(f"cannot read model file {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class TrainingOutcome:
    model: TrainedModel
    log: Optional[Any] = None
    search_rows: List[Dict[str, Any]] = field(default_factory=list)


def _targets(samples: Sequence[FunctionSample], task: str, classes: Tuple[str, ...]) -> List[int]:
    index = {name: position for position, name in enumerate(classes)}
    return [index[target_name(sample, task)] for sample in samples]


def train_model(
    algorithm: str,
    scheme: str,
    train: Sequence[FunctionSample],
    validation: Sequence[FunctionSample],
    task: str,
    mode: str,
    seed: int,
    tree_config: Optional[TreeConfig] = None,
    gnn_config: Optional[GnnConfig] = None,
    tune: bool = False,
    tree_grid: Optional[Dict[str, list]] = None,
    gnn_space: Optional[Dict[str, Any]] = None,
    n_trials: int = 20,
    n_seeds: int = 3,
) -> TrainingOutcome:
    """Fit features on ``train``, then the estimator; ``tune`` searches on ``validation`` first."""
    algorithm = normalize_algorithm(algorithm)
    classes = task_classes(task, mode)
    train = eligible_samples(train, task, mode)
    validation = eligible_samples(validation, task, mode)
    if not train:
        raise ModelError(f"no training samples eligible for task={task} mode={mode}")
    y_train = _targets(train, task, classes)
    y_val = _targets(validation, task, classes)
    extractor = FeatureExtractor.fit(scheme, train)

    if algorithm in TREE_ALGORITHMS:
        if not extractor.is_graph_level:
            raise ModelError(f"tree ensembles need a graph-level scheme, got {scheme!r}")
        config = tree_config or TreeConfig(kind=TREE_ALGORITHMS[algorithm])
        if config.kind != TREE_ALGORITHMS[algorithm]:
            config = TreeConfig.from_dict({**config.to_dict(), "kind": TREE_ALGORITHMS[algorithm]})
        X_train = extractor.graph_matrix(train)
        rows: List[Dict[str, Any]] = []
        if tune:
            if not validation:
                raise ModelError("tree grid search needs a non-empty validation set")
            grid = tree_grid or (DEFAULT_BOOSTING_GRID if algorithm == "gb" else DEFAULT_TREE_GRID)
            search = grid_search_trees(
                grid, (X_train, y_train), (extractor.graph_matrix(validation), y_val), config, seed, len(classes)
            )
            config, rows = search.best_config, search.rows
        estimator = train_trees(X_train, y_train, config, seed, n_classes=len(classes))
        estimator.feature_scheme = scheme
        model = TrainedModel(algorithm, task, mode, classes, extractor, estimator)
        return TrainingOutcome(model=model, search_rows=rows)

    if extractor.is_graph_level:
        raise ModelError(f"GNNs need a node-level scheme, got {scheme!r}")
    base = gnn_config or GnnConfig(architecture=algorithm)
    if base.architecture != algorithm:
        base = GnnConfig.from_dict({**base.to_dict(), "architecture": algorithm})
    graphs_train = to_graphs(extractor, train, y_train)
    graphs_val = to_graphs(extractor, validation, y_val)
    if tune:
        result = tune_gnn(
            gnn_space or DEFAULT_GNN_SPACE,
            graphs_train,
            graphs_val,
            len(classes),
            base_config=base,
            n_trials=n_trials,
            n_seeds=n_seeds,
            meta_seed=seed,
            feature_scheme=scheme,
        )
        assert result.best_model is not None
        model = TrainedModel(algorithm, task, mode, classes, extractor, result.best_model)
        return TrainingOutcome(model=model, search_rows=result.rows)
    estimator, log = train_gnn(graphs_train, graphs_val, base, seed, len(classes), feature_scheme=scheme)
    return TrainingOutcome(model=TrainedModel(algorithm, task, mode, classes, extractor, estimator), log=log)
