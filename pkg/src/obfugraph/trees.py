"""Random forest and gradient boosting over graph-level feature vectors.

Both ensembles share one CART grower. A node split maximises
``sum_c S_l[c]^2 / W_l + sum_c S_r[c]^2 / W_r`` where ``S`` are weighted target
sums and ``W`` weighted counts: with one-hot targets this is the weighted Gini
criterion, with residual targets it is the squared-error criterion.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import ParameterGrid
from tqdm import tqdm

from obfugraph.config import TreeConfig
from obfugraph.errors import ConfigError, ModelError
from obfugraph.eval import balanced_accuracy, balanced_class_weights
from obfugraph.featurize import GraphFeatureVector
from obfugraph.utils import stable_json, write_text

logger = logging.getLogger(__name__)

FORMAT_NAME = "obfugraph.trees"
FORMAT_VERSION = 1
_MIN_PROBABILITY = 1e-12

LeafFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class DecisionTree:
    """Array-backed binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[nodes] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            current = nodes[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[nodes] >= 0
        return nodes

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_records(self) -> List[Dict[str, Any]]:
        records: List[Dict[str, Any]] = []
        for node in range(self.n_nodes):
            if self.feature[node] < 0:
                records.append({"leaf": self.value[node].tolist()})
            else:
                records.append(
                    {
                        "feat": int(self.feature[node]),
                        "thr": float(self.threshold[node]),
                        "left": int(self.left[node]),
                        "right": int(self.right[node]),
                    }
                )
        return records

    @classmethod
    def from_records(cls, records: Sequence[Dict[str, Any]], width: int) -> "DecisionTree":
        n_nodes = len(records)
        tree = cls(
            feature=np.full(n_nodes, -1, dtype=np.int64),
            threshold=np.full(n_nodes, np.nan),
            left=np.full(n_nodes, -1, dtype=np.int64),
            right=np.full(n_nodes, -1, dtype=np.int64),
            value=np.zeros((n_nodes, width)),
        )
        for node, record in enumerate(records):
            if "leaf" in record:
                tree.value[node] = np.asarray(record["leaf"], dtype=np.float64)
            else:
                tree.feature[node] = record["feat"]
                tree.threshold[node] = record["thr"]
                tree.left[node] = record["left"]
                tree.right[node] = record["right"]
        return tree


def _best_split(
    X: np.ndarray,
    Y: np.ndarray,
    w: np.ndarray,
    rng: np.random.Generator,
    max_features: Optional[int],
    min_samples_leaf: int,
) -> Optional[Tuple[int, float]]:
    n_samples, n_features = X.shape
    if max_features is None or max_features >= n_features:
        candidates = np.arange(n_features)
    else:
        candidates = np.sort(rng.choice(n_features, size=max_features, replace=False))
    weighted = w[:, None] * Y
    total = weighted.sum(axis=0)
    total_weight = w.sum()
    if total_weight <= 0:
        return None
    parent = float((total**2).sum() / total_weight)
    best_score = parent + 1e-12 * max(1.0, abs(parent))
    best: Optional[Tuple[int, float]] = None
    positions = np.arange(1, n_samples)
    size_ok = (positions >= min_samples_leaf) & (n_samples - positions >= min_samples_leaf)
    for feature in candidates:
        order = np.argsort(X[:, feature], kind="stable")
        xs = X[order, feature]
        valid = (xs[:-1] < xs[1:]) & size_ok
        if not valid.any():
            continue
        left_sum = np.cumsum(weighted[order], axis=0)[:-1]
        left_weight = np.cumsum(w[order])[:-1]
        right_sum = total - left_sum
        right_weight = total_weight - left_weight
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.where(left_weight > 0, (left_sum**2).sum(axis=1) / left_weight, 0.0) + np.where(
                right_weight > 0, (right_sum**2).sum(axis=1) / right_weight, 0.0
            )
        score[~valid] = -np.inf
        position = int(np.argmax(score))
        if score[position] > best_score:
            best_score = float(score[position])
            best = (int(feature), float((xs[position] + xs[position + 1]) / 2.0))
    return best


def grow_tree(
    X: np.ndarray,
    Y: np.ndarray,
    w: np.ndarray,
    rng: np.random.Generator,
    leaf_fn: LeafFn,
    max_depth: Optional[int] = None,
    min_samples_leaf: int = 1,
    max_features: Optional[int] = None,
) -> DecisionTree:
    """CART grower; ``Y`` is one-hot for classification, residual columns for regression."""
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[Optional[np.ndarray]] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(None)
        return len(feature) - 1

    width = 0
    stack = [(new_node(), np.arange(X.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        split = None
        if (max_depth is None or depth < max_depth) and rows.shape[0] >= 2 * min_samples_leaf:
            split = _best_split(X[rows], Y[rows], w[rows], rng, max_features, min_samples_leaf)
        goes_left = None if split is None else X[rows, split[0]] <= split[1]
        if goes_left is None or goes_left.all() or not goes_left.any():
            value[node] = leaf_fn(Y[rows], w[rows])
            width = value[node].shape[0]
            continue
        feature[node], threshold[node] = split
        left[node] = new_node()
        right[node] = new_node()
        stack.append((right[node], rows[~goes_left], depth + 1))
        stack.append((left[node], rows[goes_left], depth + 1))

    values = np.zeros((len(feature), width))
    for node, leaf in enumerate(value):
        if leaf is not None:
            values[node] = leaf
    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=values,
    )


def _class_distribution(Y: np.ndarray, w: np.ndarray) -> np.ndarray:
    counts = (w[:, None] * Y).sum(axis=0)
    total = counts.sum()
    return counts / total if total > 0 else np.full(Y.shape[1], 1.0 / Y.shape[1])


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _weighted_cross_entropy(probabilities: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    picked = np.clip(probabilities[np.arange(y.shape[0]), y], _MIN_PROBABILITY, None)
    return float(-(w * np.log(picked)).sum() / w.sum())


@dataclass
class TreeEnsembleModel:
    kind: str
    n_classes: int
    n_features: int
    config: TreeConfig
    seed: int
    trees: List[DecisionTree] = field(default_factory=list)
    init_logits: Optional[np.ndarray] = None
    constant_class: Optional[int] = None
    feature_scheme: str = ""
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        for tree in self.trees:
            internal = tree.feature >= 0
            if (tree.feature[internal] >= self.n_features).any():
                raise ModelError("tree node refers to a feature outside the bound dimension")
            if not np.isfinite(tree.threshold[internal]).all():
                raise ModelError("tree thresholds must be finite")

    @property
    def n_rounds(self) -> int:
        return len(self.trees) // self.n_classes if self.kind == "gradient_boosting" else len(self.trees)

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ModelError(f"feature dimension mismatch: model expects {self.n_features}, got {X.shape}")
        n_samples = X.shape[0]
        if self.constant_class is not None:
            scores = np.zeros((n_samples, self.n_classes))
            scores[:, self.constant_class] = 1.0
            return scores
        if self.kind == "random_forest":
            votes = np.zeros((n_samples, self.n_classes))
            for tree in self.trees:
                votes[np.arange(n_samples), np.argmax(tree.predict_value(X), axis=1)] += 1.0
            return votes / len(self.trees)
        return softmax(self.decision_function(X))

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        """Staged boosting logits."""
        logits = np.tile(self.init_logits, (X.shape[0], 1))
        for position, tree in enumerate(self.trees):
            logits[:, position % self.n_classes] += tree.predict_value(X)[:, 0]
        return logits

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_scores(X), axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "feature_scheme": self.feature_scheme,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "init_logits": None if self.init_logits is None else self.init_logits.tolist(),
            "constant_class": self.constant_class,
            "loss_history": list(self.loss_history),
            "trees": [tree.to_records() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TreeEnsembleModel":
        if data.get("format") != FORMAT_NAME or data.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported tree model format {data.get('format')!r} v{data.get('version')!r}")
        width = data["n_classes"] if data["kind"] == "random_forest" else 1
        return cls(
            kind=data["kind"],
            n_classes=data["n_classes"],
            n_features=data["n_features"],
            config=TreeConfig.from_dict(data["config"]),
            seed=data["seed"],
            trees=[DecisionTree.from_records(records, width) for records in data["trees"]],
            init_logits=None if data["init_logits"] is None else np.asarray(data["init_logits"]),
            constant_class=data["constant_class"],
            feature_scheme=data.get("feature_scheme", ""),
            loss_history=list(data.get("loss_history", [])),
        )

    def save(self, path: Path) -> None:
        write_text(path, stable_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: Path) -> "TreeEnsembleModel":
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def as_feature_matrix(X: np.ndarray | Sequence[GraphFeatureVector]) -> Tuple[np.ndarray, str]:
    """Stack graph feature vectors, checking they share one scheme and dimension."""
    if isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise ModelError(f"expected a 2-D feature matrix, got shape {X.shape}")
        return X.astype(np.float64, copy=False), ""
    vectors = list(X)
    if not vectors:
        raise ModelError("empty feature set")
    schemes = {vector.scheme for vector in vectors}
    dims = {vector.dim for vector in vectors}
    if len(schemes) != 1 or len(dims) != 1:
        raise ModelError(f"inconsistent feature vectors: schemes={sorted(schemes)} dims={sorted(dims)}")
    return np.vstack([vector.values for vector in vectors]).astype(np.float64), schemes.pop()


def _prepare(
    X: np.ndarray | Sequence[GraphFeatureVector],
    y: Sequence[int],
    config: TreeConfig,
    n_classes: Optional[int],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, str]:
    matrix, scheme = as_feature_matrix(X)
    targets = np.asarray(y, dtype=np.int64)
    if matrix.shape[0] == 0 or matrix.shape[0] != targets.shape[0]:
        raise ModelError(f"need |X| = |y| > 0, got {matrix.shape[0]} and {targets.shape[0]}")
    if not np.isfinite(matrix).all():
        raise ModelError("feature matrix contains non-finite values")
    k = int(n_classes if n_classes is not None else targets.max() + 1)
    if targets.min() < 0 or targets.max() >= k:
        raise ModelError(f"labels must lie in [0, {k})")
    if config.class_weight:
        weights = balanced_class_weights(targets, k)[targets]
    else:
        weights = np.ones(targets.shape[0])
    return matrix, targets, weights, k, scheme


def _constant_model(kind: str, targets: np.ndarray, k: int, d: int, config: TreeConfig, seed: int, scheme: str) -> TreeEnsembleModel:
    label = int(targets[0])
    logger.warning("Training targets contain the single class %d; returning a constant predictor", label)
    return TreeEnsembleModel(
        kind=kind, n_classes=k, n_features=d, config=config, seed=seed, constant_class=label, feature_scheme=scheme
    )


def _max_features(n_features: int) -> int:
    return max(1, int(np.sqrt(n_features)))


def _fit_forest_tree(
    X: np.ndarray,
    onehot: np.ndarray,
    weights: np.ndarray,
    seed: int,
    index: int,
    max_depth: Optional[int],
    min_samples_leaf: int,
) -> DecisionTree:
    rng = np.random.default_rng([seed, index])
    rows = rng.integers(0, X.shape[0], size=X.shape[0])
    return grow_tree(
        X[rows],
        onehot[rows],
        weights[rows],
        rng,
        _class_distribution,
        max_depth=max_depth,
        min_samples_leaf=min_samples_leaf,
        max_features=_max_features(X.shape[1]),
    )


def train_random_forest(
    X: np.ndarray | Sequence[GraphFeatureVector],
    y: Sequence[int],
    config: TreeConfig,
    seed: int,
    n_classes: Optional[int] = None,
) -> TreeEnsembleModel:
    """Bootstrap CART trees with sqrt(d) features per split and Gini impurity."""
    matrix, targets, weights, k, scheme = _prepare(X, y, config, n_classes)
    d = matrix.shape[1]
    if np.unique(targets).shape[0] == 1:
        return _constant_model("random_forest", targets, k, d, config, seed, scheme)
    onehot = np.eye(k)[targets]
    jobs = [(matrix, onehot, weights, seed, index, config.max_depth, config.min_samples_leaf) for index in range(config.n_trees)]
    if config.n_jobs > 1:
        with Pool(config.n_jobs) as pool:
            trees = pool.starmap(_fit_forest_tree, jobs)
    else:
        trees = [_fit_forest_tree(*job) for job in tqdm(jobs, desc="forest", disable=None, leave=False)]
    logger.debug("Trained random forest: %d trees over %d samples, d=%d", len(trees), matrix.shape[0], d)
    return TreeEnsembleModel(
        kind="random_forest", n_classes=k, n_features=d, config=config, seed=seed, trees=trees, feature_scheme=scheme
    )


def train_gradient_boosting(
    X: np.ndarray | Sequence[GraphFeatureVector],
    y: Sequence[int],
    config: TreeConfig,
    seed: int,
    n_classes: Optional[int] = None,
) -> TreeEnsembleModel:
    """Softmax boosting: per round one squared-error tree per class on ``onehot - p``."""
    matrix, targets, weights, k, scheme = _prepare(X, y, config, n_classes)
    d = matrix.shape[1]
    if np.unique(targets).shape[0] == 1:
        return _constant_model("gradient_boosting", targets, k, d, config, seed, scheme)
    rng = np.random.default_rng(seed)
    onehot = np.eye(k)[targets]
    prior = (weights[:, None] * onehot).sum(axis=0) / weights.sum()
    init_logits = np.log(np.clip(prior, _MIN_PROBABILITY, None))
    logits = np.tile(init_logits, (matrix.shape[0], 1))
    learning_rate = config.learning_rate

    def shrunk_mean(residual: np.ndarray, w: np.ndarray) -> np.ndarray:
        return learning_rate * (w[:, None] * residual).sum(axis=0) / w.sum()

    trees: List[DecisionTree] = []
    history = [_weighted_cross_entropy(softmax(logits), targets, weights)]
    n_sub = max(1, int(round(config.subsample * matrix.shape[0])))
    for _ in tqdm(range(config.n_trees), desc="boosting", disable=None, leave=False):
        residual = onehot - softmax(logits)
        if n_sub < matrix.shape[0]:
            rows = np.sort(rng.choice(matrix.shape[0], size=n_sub, replace=False))
        else:
            rows = np.arange(matrix.shape[0])
        for cls in range(k):
            tree = grow_tree(
                matrix[rows],
                residual[rows, cls : cls + 1],
                weights[rows],
                rng,
                shrunk_mean,
                max_depth=config.max_depth,
                min_samples_leaf=config.min_samples_leaf,
            )
            trees.append(tree)
            logits[:, cls] += tree.predict_value(matrix)[:, 0]
        history.append(_weighted_cross_entropy(softmax(logits), targets, weights))
    logger.debug("Trained gradient boosting: %d rounds, final loss %.6f", config.n_trees, history[-1])
    return TreeEnsembleModel(
        kind="gradient_boosting",
        n_classes=k,
        n_features=d,
        config=config,
        seed=seed,
        trees=trees,
        init_logits=init_logits,
        feature_scheme=scheme,
        loss_history=history,
    )


def train_trees(
    X: np.ndarray | Sequence[GraphFeatureVector],
    y: Sequence[int],
    config: TreeConfig,
    seed: int,
    n_classes: Optional[int] = None,
) -> TreeEnsembleModel:
    trainer = train_random_forest if config.kind == "random_forest" else train_gradient_boosting
    return trainer(X, y, config, seed, n_classes=n_classes)


def predict(model: TreeEnsembleModel, X: np.ndarray | Sequence[GraphFeatureVector]) -> Tuple[np.ndarray, np.ndarray]:
    """Labels and per-class scores; scores sum to 1 per row."""
    matrix, scheme = as_feature_matrix(X)
    if scheme and model.feature_scheme and scheme != model.feature_scheme:
        raise ModelError(f"model is bound to {model.feature_scheme!r}, got {scheme!r} features")
    scores = model.predict_scores(matrix)
    return np.argmax(scores, axis=1), scores


@dataclass
class GridSearchResult:
    best_config: TreeConfig
    best_score: float
    rows: List[Dict[str, Any]]


def _tie_key(config: TreeConfig, grid_index: int) -> Tuple[int, float, int]:
    depth = float("inf") if config.max_depth is None else float(config.max_depth)
    return config.n_trees, depth, grid_index


def grid_search_trees(
    param_grid: Dict[str, Sequence[Any]],
    train: Tuple[np.ndarray, Sequence[int]],
    validation: Tuple[np.ndarray, Sequence[int]],
    base_config: TreeConfig = TreeConfig(),
    seed: int = 0,
    n_classes: Optional[int] = None,
    metric: Callable[[Sequence[int], Sequence[int]], float] = balanced_accuracy,
) -> GridSearchResult:
    """Exhaustive search; ties go to fewer trees, then shallower depth, then grid order."""
    grid = list(ParameterGrid(dict(param_grid)))
    if not grid or not param_grid:
        raise ConfigError("the parameter grid is empty")
    X_train, y_train = train
    X_val, y_val = validation
    rows: List[Dict[str, Any]] = []
    best: Optional[Tuple[float, Tuple[int, float, int], TreeConfig]] = None
    for grid_index, params in enumerate(tqdm(grid, desc="grid", disable=None, leave=False)):
        config = TreeConfig.from_dict({**base_config.to_dict(), **params})
        model = train_trees(X_train, y_train, config, seed, n_classes=n_classes)
        labels, _ = predict(model, X_val)
        score = float(metric(labels.tolist(), list(y_val)))
        rows.append({"grid_index": grid_index, **params, "score": score})
        logger.debug("Grid cell %d %s: %.4f", grid_index, params, score)
        key = _tie_key(config, grid_index)
        if best is None or score > best[0] or (score == best[0] and key < best[1]):
            best = (score, key, config)
    assert best is not None
    logger.info("Best tree config %s with validation score %.4f", best[2].to_dict(), best[0])
    return GridSearchResult(best_config=best[2], best_score=best[0], rows=rows)
