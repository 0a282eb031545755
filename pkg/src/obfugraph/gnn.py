"""Message-passing graph classifiers (GCN, SAGE, GIN) on the autograd engine."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import optuna
import scipy.sparse as sp
from tqdm import tqdm

from obfugraph.autograd import Adam, Tensor, as_tensor, cross_entropy, parameter, spmm
from obfugraph.cfg_model import ControlFlowGraph
from obfugraph.config import GnnConfig
from obfugraph.errors import ConfigError, ModelError, TrainingFault
from obfugraph.eval import balanced_accuracy, balanced_class_weights
from obfugraph.utils import derive_seed, stable_json, write_text

logger = logging.getLogger(__name__)

FORMAT_NAME = "obfugraph.gnn"
FORMAT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "val_balanced_accuracy")


@dataclass(frozen=True)
class GraphData:
    """One graph: node features, local edge list and an optional class index."""

    features: np.ndarray
    edges: np.ndarray
    label: int = -1
    graph_id: str = ""

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])


def graph_from_cfg(cfg: ControlFlowGraph, features: np.ndarray, label: int = -1, graph_id: str = "") -> GraphData:
    if features.shape[0] != cfg.n_nodes:
        raise ModelError(f"{graph_id or 'graph'}: {features.shape[0]} feature rows for {cfg.n_nodes} blocks")
    index = cfg.block_index
    edges = np.asarray([(index[src], index[dst]) for src, dst in cfg.edges], dtype=np.int64).reshape(-1, 2)
    return GraphData(features=np.asarray(features, dtype=np.float64), edges=edges, label=label, graph_id=graph_id)


@dataclass
class GraphBatch:
    """Block-diagonal union of several graphs."""

    features: np.ndarray
    edges: np.ndarray
    membership: np.ndarray
    n_graphs: int
    labels: Optional[np.ndarray] = None

    @classmethod
    def from_graphs(cls, graphs: Sequence[GraphData]) -> "GraphBatch":
        if not graphs:
            raise ModelError("cannot batch an empty graph list")
        dims = {graph.features.shape[1] for graph in graphs}
        if len(dims) != 1:
            raise ModelError(f"graphs in one batch disagree on feature dimension: {sorted(dims)}")
        offsets = np.cumsum([0] + [graph.n_nodes for graph in graphs])
        edges = [graph.edges + offset for graph, offset in zip(graphs, offsets[:-1])]
        labels = np.asarray([graph.label for graph in graphs], dtype=np.int64)
        return cls(
            features=np.vstack([graph.features for graph in graphs]),
            edges=np.vstack(edges) if edges else np.zeros((0, 2), dtype=np.int64),
            membership=np.repeat(np.arange(len(graphs)), [graph.n_nodes for graph in graphs]),
            n_graphs=len(graphs),
            labels=labels if (labels >= 0).all() else None,
        )

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])


class Adjacency:
    """Aggregation operators of one batch; row ``v`` collects messages into ``v``."""

    def __init__(self, n_nodes: int, edges: np.ndarray, directed: bool = False) -> None:
        self.n_nodes = n_nodes
        self.directed = directed
        src, dst = (edges[:, 0], edges[:, 1]) if len(edges) else (np.zeros(0, int), np.zeros(0, int))
        incoming = sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(n_nodes, n_nodes))
        incoming.sum_duplicates()
        incoming.data[:] = 1.0
        if directed:
            self.base = incoming
        else:
            symmetric = (incoming + incoming.T).tocsr()
            symmetric.data[:] = 1.0
            self.base = symmetric

    @classmethod
    def of(cls, batch: GraphBatch, directed: bool = False) -> "Adjacency":
        return cls(batch.n_nodes, batch.edges, directed=directed)

    @cached_property
    def sum(self) -> sp.csr_matrix:
        return self.base

    @cached_property
    def mean(self) -> sp.csr_matrix:
        degree = np.asarray(self.base.sum(axis=1)).ravel()
        inverse = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
        return (sp.diags(inverse) @ self.base).tocsr()

    @cached_property
    def gcn(self) -> sp.csr_matrix:
        """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``."""
        augmented = (self.base + sp.identity(self.n_nodes, format="csr")).tocsr()
        degree = np.asarray(augmented.sum(axis=1)).ravel()
        scale = sp.diags(1.0 / np.sqrt(degree))
        return (scale @ augmented @ scale).tocsr()


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True) -> None:
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(1, out_dim))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        named = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            named.append((f"{prefix}.bias", self.bias))
        return named


def layer_forward_gcn(H: Tensor | np.ndarray, adjacency: Adjacency, W: Tensor | np.ndarray) -> Tensor:
    return spmm(adjacency.gcn, as_tensor(H) @ as_tensor(W)).relu()


def layer_forward_sage(
    H: Tensor | np.ndarray,
    adjacency: Adjacency,
    W_self: Tensor | np.ndarray,
    W_neigh: Tensor | np.ndarray,
) -> Tensor:
    h = as_tensor(H)
    return (h @ as_tensor(W_self) + spmm(adjacency.mean, h) @ as_tensor(W_neigh)).relu()


def layer_forward_gin(
    H: Tensor | np.ndarray,
    adjacency: Adjacency,
    eps: Tensor | float,
    mlp: Callable[[Tensor], Tensor],
) -> Tensor:
    h = as_tensor(H)
    return mlp((as_tensor(eps) + 1.0) * h + spmm(adjacency.sum, h))


class GcnLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.linear = Linear(in_dim, out_dim, rng, bias=False)

    def __call__(self, h: Tensor, adjacency: Adjacency) -> Tensor:
        return layer_forward_gcn(h, adjacency, self.linear.weight)

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return self.linear.named_parameters(f"{prefix}.linear")


class SageLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.self_linear = Linear(in_dim, out_dim, rng, bias=False)
        self.neigh_linear = Linear(in_dim, out_dim, rng, bias=False)

    def __call__(self, h: Tensor, adjacency: Adjacency) -> Tensor:
        return layer_forward_sage(h, adjacency, self.self_linear.weight, self.neigh_linear.weight)

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return self.self_linear.named_parameters(f"{prefix}.self") + self.neigh_linear.named_parameters(f"{prefix}.neigh")


class GinLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.eps = parameter(np.zeros((1, 1)))
        self.first = Linear(in_dim, out_dim, rng)
        self.second = Linear(out_dim, out_dim, rng)

    def mlp(self, x: Tensor) -> Tensor:
        return self.second(self.first(x).relu())

    def __call__(self, h: Tensor, adjacency: Adjacency) -> Tensor:
        return layer_forward_gin(h, adjacency, self.eps, self.mlp).relu()

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return (
            [(f"{prefix}.eps", self.eps)]
            + self.first.named_parameters(f"{prefix}.mlp0")
            + self.second.named_parameters(f"{prefix}.mlp1")
        )


LAYER_TYPES = {"gcn": GcnLayer, "sage": SageLayer, "gin": GinLayer}


def membership_operator(membership: np.ndarray, n_graphs: int, method: str) -> sp.csr_matrix:
    counts = np.bincount(membership, minlength=n_graphs)
    if (counts == 0).any():
        raise ModelError(f"graph {int(np.argmin(counts))} of the batch has no nodes")
    if method == "sum":
        values = np.ones(membership.shape[0])
    elif method == "mean":
        values = 1.0 / counts[membership]
    else:
        raise ModelError(f"unknown readout {method!r}")
    return sp.csr_matrix((values, (membership, np.arange(membership.shape[0]))), shape=(n_graphs, membership.shape[0]))


def readout(H: Tensor | np.ndarray, membership: np.ndarray, method: str = "sum", n_graphs: Optional[int] = None) -> Tensor:
    membership = np.asarray(membership, dtype=np.int64)
    total = int(membership.max()) + 1 if n_graphs is None else n_graphs
    return spmm(membership_operator(membership, total, method), as_tensor(H))


@dataclass
class GnnModel:
    config: GnnConfig
    in_dim: int
    n_classes: int
    seed: int
    feature_scheme: str = ""
    layers: List[Any] = field(default_factory=list)
    head: List[Linear] = field(default_factory=list)

    @classmethod
    def initialise(cls, config: GnnConfig, in_dim: int, n_classes: int, seed: int, feature_scheme: str = "") -> "GnnModel":
        if in_dim < 1 or n_classes < 2:
            raise ModelError(f"need in_dim >= 1 and n_classes >= 2, got {in_dim} and {n_classes}")
        rng = np.random.default_rng(seed)
        layer_type = LAYER_TYPES[config.architecture]
        dims = [in_dim] + [config.hidden] * config.n_layers
        layers = [layer_type(dims[k], dims[k + 1], rng) for k in range(config.n_layers)]
        head = [Linear(config.hidden, config.hidden, rng), Linear(config.hidden, n_classes, rng)]
        return cls(config, in_dim, n_classes, seed, feature_scheme, layers, head)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named: List[Tuple[str, Tensor]] = []
        for index, layer in enumerate(self.layers):
            named.extend(layer.named_parameters(f"layers.{index}"))
        for index, linear in enumerate(self.head):
            named.extend(linear.named_parameters(f"head.{index}"))
        return named

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def state(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, param in self.named_parameters():
            if state[name].shape != param.data.shape:
                raise ModelError(f"parameter {name}: shape {state[name].shape} != {param.data.shape}")
            param.data = state[name].copy()

    def logits(self, batch: GraphBatch) -> np.ndarray:
        return model_forward(self, batch).data

    def predict_scores(self, graphs: Sequence[GraphData], batch_size: int = 256) -> np.ndarray:
        chunks = []
        for start in range(0, len(graphs), batch_size):
            logits = self.logits(GraphBatch.from_graphs(graphs[start : start + batch_size]))
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            chunks.append(shifted / shifted.sum(axis=1, keepdims=True))
        return np.vstack(chunks) if chunks else np.zeros((0, self.n_classes))

    def predict(self, graphs: Sequence[GraphData]) -> np.ndarray:
        return np.argmax(self.predict_scores(graphs), axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "in_dim": self.in_dim,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "feature_scheme": self.feature_scheme,
            "parameters": [
                {"name": name, "shape": list(param.data.shape), "values": param.data.ravel(order="C").tolist()}
                for name, param in self.named_parameters()
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GnnModel":
        if data.get("format") != FORMAT_NAME or data.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported GNN model format {data.get('format')!r} v{data.get('version')!r}")
        model = cls.initialise(
            GnnConfig.from_dict(data["config"]), data["in_dim"], data["n_classes"], data["seed"], data["feature_scheme"]
        )
        model.load_state(
            {
                record["name"]: np.asarray(record["values"], dtype=np.float64).reshape(record["shape"])
                for record in data["parameters"]
            }
        )
        return model

    def save(self, path: Path) -> None:
        write_text(path, stable_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: Path) -> "GnnModel":
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def model_forward(model: GnnModel, batch: GraphBatch) -> Tensor:
    """Stacked message passing, readout, then the two-layer head."""
    if batch.features.shape[1] != model.in_dim:
        raise ModelError(f"feature dimension mismatch: model expects {model.in_dim}, batch has {batch.features.shape[1]}")
    adjacency = Adjacency.of(batch, directed=model.config.directed)
    h = Tensor(batch.features)
    for layer in model.layers:
        h = layer(h, adjacency)
    pooled = readout(h, batch.membership, model.config.readout, batch.n_graphs)
    return model.head[1](model.head[0](pooled).relu())


@dataclass
class TrainingLog:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_score: float) -> None:
        self.rows.append((epoch, train_loss, val_score))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for epoch, loss, score in self.rows:
            writer.writerow([epoch, repr(loss), repr(score)])
        return buffer.getvalue()

    def write_csv(self, path: Path) -> None:
        write_text(path, self.to_csv())


def _check_graphs(graphs: Sequence[GraphData], what: str) -> int:
    if not graphs:
        raise ModelError(f"the {what} set is empty")
    dims = {graph.features.shape[1] for graph in graphs}
    if len(dims) != 1:
        raise ModelError(f"the {what} set mixes feature dimensions {sorted(dims)}")
    if any(graph.label < 0 for graph in graphs):
        raise ModelError(f"the {what} set has unlabelled graphs")
    return dims.pop()


def _check_finite(values: np.ndarray, epoch: int, batch: int, what: str) -> None:
    if not np.isfinite(values).all():
        raise TrainingFault(epoch, batch, f"non-finite {what}")


def train_gnn(
    train: Sequence[GraphData],
    validation: Sequence[GraphData],
    config: GnnConfig,
    seed: int,
    n_classes: int,
    feature_scheme: str = "",
) -> Tuple[GnnModel, TrainingLog]:
    """Adam on class-weighted cross-entropy, returning the best-validation checkpoint."""
    in_dim = _check_graphs(train, "training")
    if _check_graphs(validation, "validation") != in_dim:
        raise ModelError("training and validation sets disagree on feature dimension")
    model = GnnModel.initialise(config, in_dim, n_classes, seed, feature_scheme)
    log = TrainingLog()
    labels = np.asarray([graph.label for graph in train], dtype=np.int64)
    class_weights = balanced_class_weights(labels, n_classes) if config.class_weight else np.ones(n_classes)
    optimizer = Adam(model.parameters(), lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    shuffle_rng = np.random.default_rng([seed, 1])
    val_truth = [graph.label for graph in validation]
    best_score, best_state = -np.inf, model.state()

    for epoch in tqdm(range(1, config.epochs + 1), desc=f"{config.architecture} epochs", disable=None, leave=False):
        order = shuffle_rng.permutation(len(train))
        total_loss = 0.0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            members = [train[i] for i in order[start : start + config.batch_size]]
            batch = GraphBatch.from_graphs(members)
            logits = model_forward(model, batch)
            _check_finite(logits.data, epoch, batch_index, "logits")
            loss = cross_entropy(logits, batch.labels, class_weights)
            _check_finite(loss.data, epoch, batch_index, "loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss.data) * len(members)
        score = balanced_accuracy(model.predict(validation).tolist(), val_truth)
        log.append(epoch, total_loss / len(train), score)
        logger.debug("epoch %d: train loss %.6f, validation balanced accuracy %.4f", epoch, total_loss / len(train), score)
        if score > best_score:
            best_score, best_state = score, model.state()

    model.load_state(best_state)
    return model, log


@dataclass
class TuningResult:
    best_config: GnnConfig
    best_seed: int
    best_score: float
    rows: List[Dict[str, Any]]
    best_model: Optional[GnnModel] = None


def _suggest(trial: optuna.trial.BaseTrial, name: str, space: Any) -> Any:
    if isinstance(space, tuple):
        low, high = space
        return trial.suggest_float(name, low, high, log=True)
    if isinstance(space, list):
        return trial.suggest_categorical(name, space)
    raise ConfigError(f"search space entry {name!r} must be a list of choices or a (low, high) tuple")


def tune_gnn(
    search_space: Dict[str, Any],
    train: Sequence[GraphData],
    validation: Sequence[GraphData],
    n_classes: int,
    base_config: GnnConfig = GnnConfig(),
    n_trials: int = 20,
    n_seeds: int = 3,
    meta_seed: int = 0,
    feature_scheme: str = "",
) -> TuningResult:
    """Random search, ``n_trials`` per seed; the best (config, seed) run wins."""
    if not search_space:
        raise ConfigError("the GNN search space is empty")
    optuna.logging.set_verbosity(optuna.logging.WARNING)
    rows: List[Dict[str, Any]] = []
    best: Optional[TuningResult] = None
    for seed in range(n_seeds):
        sampler = optuna.samplers.RandomSampler(seed=derive_seed(meta_seed, seed))
        study = optuna.create_study(direction="maximize", sampler=sampler)
        for trial_index in range(n_trials):
            trial = study.ask()
            params = {name: _suggest(trial, name, space) for name, space in search_space.items()}
            config = GnnConfig.from_dict({**base_config.to_dict(), **params})
            model, _ = train_gnn(train, validation, config, seed, n_classes, feature_scheme)
            score = balanced_accuracy(model.predict(validation).tolist(), [graph.label for graph in validation])
            study.tell(trial, score)
            rows.append({"seed": seed, "trial": trial_index, **params, "score": score})
            logger.info("trial seed=%d #%d %s: %.4f", seed, trial_index, params, score)
            if best is None or score > best.best_score:
                best = TuningResult(config, seed, score, rows, model)
    assert best is not None
    return best


def gradient_check(
    loss_fn: Callable[[], Tensor],
    parameters: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: Optional[float] = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    for param in parameters:
        param.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros_like(param.data) if param.grad is None else param.grad.copy() for param in parameters]
    worst = 0.0
    for param, grad in zip(parameters, analytic):
        for position in np.ndindex(*param.data.shape):
            original = param.data[position]
            param.data[position] = original + step
            upper = float(loss_fn().data)
            param.data[position] = original - step
            lower = float(loss_fn().data)
            param.data[position] = original
            numeric = (upper - lower) / (2.0 * step)
            exact = grad[position]
            scale = max(abs(exact), abs(numeric), 1e-6)
            worst = max(worst, abs(exact - numeric) / scale)
    if tolerance is not None and worst > tolerance:
        logger.warning("gradient check: max relative error %.3e exceeds %.3e", worst, tolerance)
    return worst
