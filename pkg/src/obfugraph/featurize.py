"""Graph-level feature vectors and node feature matrices.

Graph-level schemes (``graph23``, ``tfidf128``) feed the tree baselines; node
schemes (``identity``, ``mclass27``, ``pcode_sem``, ``asm_sem``) feed the GNNs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from obfugraph.cfg_model import (
    ControlFlowGraph,
    FunctionSample,
    MnemonicVocabulary,
    build_vocabulary,
    count_mnemonics,
)
from obfugraph.errors import ConfigError, FeatureError
from obfugraph.taxonomy import (
    BROAD_CATEGORIES,
    MnemonicClassTaxonomy,
    PcodeTable,
    default_pcode_table,
    default_taxonomy,
)

logger = logging.getLogger(__name__)

GRAPH_SCHEMES = ("graph23", "tfidf128")
NODE_SCHEMES = ("identity", "mclass27", "pcode_sem", "asm_sem")
SCHEMES = GRAPH_SCHEMES + NODE_SCHEMES
TFIDF_DIM = 128

# Dimensions reported for the published x86-64 corpus; ours are vocabulary-derived.
REFERENCE_DIMS = {"graph23": 23, "tfidf128": 128, "identity": 1, "mclass27": 27, "pcode_sem": 78, "asm_sem": 1839}

GRAPH23_NAMES: Tuple[str, ...] = (
    "n_nodes",
    "n_edges",
    "cyclomatic_complexity",
    "density",
    "mean_out_degree",
    "max_out_degree",
    "mean_in_degree",
    "max_in_degree",
    "n_connected_components",
    "n_leaf_nodes",
    "n_branch_nodes",
    "longest_path_length",
    "n_back_edges",
    "total_instructions",
    "mean_instructions_per_block",
    "max_instructions_per_block",
) + tuple(f"n_{category}" for category in BROAD_CATEGORIES)

STRUCTURAL_NAMES: Tuple[str, ...] = (
    "n_instructions",
    "in_degree",
    "out_degree",
    "is_entry",
    "is_exit",
    "n_call_like",
    "n_ret_like",
    "n_cond_branch",
    "n_uncond_branch",
    "n_arithmetic",
    "n_load_store",
)


@dataclass(frozen=True, eq=False)
class GraphFeatureVector:
    scheme: str
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class NodeFeatureMatrix:
    scheme: str
    values: np.ndarray
    node_order: Tuple[str, ...]

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    def to_dict(self, function_id: str) -> Dict[str, Any]:
        return {
            "function_id": function_id,
            "scheme": self.scheme,
            "node_order": list(self.node_order),
            "rows": self.values.tolist(),
        }


def cyclomatic_complexity(cfg: ControlFlowGraph) -> int:
    """E - N + 2P over weakly connected components."""
    return cfg.n_edges - cfg.n_nodes + 2 * cfg.connected_components()


def count_back_edges(cfg: ControlFlowGraph) -> int:
    """Back edges of a DFS from the entry, visiting successors in block-id order."""
    succ = {block_id: sorted(targets) for block_id, targets in cfg.successors.items()}
    state: Dict[str, int] = {}  # 1 on stack, 2 finished
    back = 0
    stack: List[Tuple[str, Iterator[str]]] = [(cfg.entry, iter(succ[cfg.entry]))]
    state[cfg.entry] = 1
    while stack:
        node, children = stack[-1]
        child = next(children, None)
        if child is None:
            state[node] = 2
            stack.pop()
            continue
        seen = state.get(child)
        if seen == 1:
            back += 1
        elif seen is None:
            state[child] = 1
            stack.append((child, iter(succ[child])))
    return back


def graph_level_features(
    cfg: ControlFlowGraph,
    taxonomy: Optional[MnemonicClassTaxonomy] = None,
) -> GraphFeatureVector:
    taxonomy = taxonomy or default_taxonomy()
    graph = cfg.to_networkx()
    n_nodes = cfg.n_nodes
    n_edges = cfg.n_edges
    out_deg = [graph.out_degree(node) for node in graph.nodes]
    in_deg = [graph.in_degree(node) for node in graph.nodes]
    sizes = [len(block.instructions) for block in cfg.blocks]
    condensed = nx.condensation(graph)
    categories = dict.fromkeys(BROAD_CATEGORIES, 0)
    for mnemonic, count in count_mnemonics(cfg).items():
        categories[taxonomy.broad_category(mnemonic)] += count
    values = [
        n_nodes,
        n_edges,
        cyclomatic_complexity(cfg),
        nx.density(graph),
        n_edges / n_nodes,
        max(out_deg),
        n_edges / n_nodes,
        max(in_deg),
        nx.number_weakly_connected_components(graph),
        sum(1 for deg in out_deg if deg == 0),
        sum(1 for deg in out_deg if deg >= 2),
        nx.dag_longest_path_length(condensed),
        count_back_edges(cfg),
        sum(sizes),
        sum(sizes) / n_nodes,
        max(sizes),
    ] + [categories[category] for category in BROAD_CATEGORIES]
    return GraphFeatureVector(scheme="graph23", values=np.asarray(values, dtype=np.float64))


@dataclass(frozen=True)
class TfidfModel:
    tokens: Tuple[str, ...]
    idf: Tuple[float, ...]
    n_documents: int

    def to_dict(self) -> Dict[str, Any]:
        return {"tokens": list(self.tokens), "idf": list(self.idf), "n_documents": self.n_documents}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TfidfModel":
        return cls(tokens=tuple(data["tokens"]), idf=tuple(data["idf"]), n_documents=data["n_documents"])


def smoothed_idf(n_documents: int, document_frequency: int) -> float:
    return math.log((1 + n_documents) / (1 + document_frequency)) + 1.0


def tfidf_fit(corpus: Sequence[FunctionSample], max_features: int = TFIDF_DIM) -> TfidfModel:
    """Keep the most used mnemonics and weight them by smoothed inverse document frequency."""
    if not 1 <= max_features <= TFIDF_DIM:
        raise ConfigError(f"max_features must lie in [1, {TFIDF_DIM}], got {max_features}")
    vocabulary = build_vocabulary(corpus, max_size=max_features)
    idf = tuple(smoothed_idf(vocabulary.n_documents, df) for df in vocabulary.document_frequency)
    return TfidfModel(tokens=vocabulary.tokens, idf=idf, n_documents=vocabulary.n_documents)


def tfidf_transform(model: TfidfModel, cfg: ControlFlowGraph) -> GraphFeatureVector:
    if len(model.tokens) > TFIDF_DIM:
        raise FeatureError(f"tfidf model has {len(model.tokens)} tokens, more than {TFIDF_DIM}")
    counts = count_mnemonics(cfg)
    values = np.zeros(TFIDF_DIM, dtype=np.float64)
    for idx, (token, weight) in enumerate(zip(model.tokens, model.idf)):
        values[idx] = counts.get(token, 0) * weight
    return GraphFeatureVector(scheme="tfidf128", values=values)


@dataclass(frozen=True)
class FeatureContext:
    taxonomy: Optional[MnemonicClassTaxonomy] = None
    vocabulary: Optional[MnemonicVocabulary] = None
    pcode_table: Optional[PcodeTable] = None


def structural_slice(cfg: ControlFlowGraph, taxonomy: MnemonicClassTaxonomy) -> np.ndarray:
    in_deg = {block_id: len(preds) for block_id, preds in cfg.predecessors.items()}
    out_deg = {block_id: len(succs) for block_id, succs in cfg.successors.items()}
    rows = np.zeros((cfg.n_nodes, len(STRUCTURAL_NAMES)), dtype=np.float64)
    for row, block in enumerate(cfg.blocks):
        classes = [taxonomy.class_name(m) for m in block.mnemonics]
        broad = [taxonomy.broad_category(m) for m in block.mnemonics]
        rows[row] = (
            len(block.instructions),
            in_deg[block.block_id],
            out_deg[block.block_id],
            float(block.block_id == cfg.entry),
            float(out_deg[block.block_id] == 0),
            classes.count("call"),
            classes.count("return"),
            classes.count("conditional_jump"),
            classes.count("unconditional_jump"),
            broad.count("arithmetic"),
            broad.count("data_movement"),
        )
    return rows


def _token_counts(tokens_per_block: List[List[str]], index: Dict[str, int]) -> np.ndarray:
    counts = np.zeros((len(tokens_per_block), len(index)), dtype=np.float64)
    for row, tokens in enumerate(tokens_per_block):
        for token in tokens:
            col = index.get(token)
            if col is not None:
                counts[row, col] += 1.0
    return counts


def node_features(cfg: ControlFlowGraph, scheme: str, context: Optional[FeatureContext] = None) -> NodeFeatureMatrix:
    context = context or FeatureContext()
    taxonomy = context.taxonomy or default_taxonomy()
    if scheme == "identity":
        values = np.ones((cfg.n_nodes, 1), dtype=np.float64)
    elif scheme == "mclass27":
        values = np.zeros((cfg.n_nodes, len(taxonomy.classes)), dtype=np.float64)
        for row, block in enumerate(cfg.blocks):
            for mnemonic in block.mnemonics:
                values[row, taxonomy.class_index(mnemonic)] += 1.0
    elif scheme in ("pcode_sem", "asm_sem"):
        if context.vocabulary is None:
            raise FeatureError(f"scheme {scheme!r} requires a fitted vocabulary")
        if scheme == "pcode_sem":
            table = context.pcode_table or default_pcode_table()
            tokens = [[op for insn in block.instructions for op in table.ops_for(insn)] for block in cfg.blocks]
            counts = _token_counts(tokens, context.vocabulary.pcode_index)
        else:
            counts = _token_counts([block.mnemonics for block in cfg.blocks], context.vocabulary.index)
        values = np.hstack([structural_slice(cfg, taxonomy), counts])
    else:
        raise FeatureError(f"unknown node feature scheme {scheme!r}")
    return NodeFeatureMatrix(scheme=scheme, values=values, node_order=cfg.block_ids)


@dataclass
class FeatureExtractor:
    """One feature scheme bound to the state fitted on a training corpus."""

    scheme: str
    taxonomy: MnemonicClassTaxonomy = field(default_factory=default_taxonomy)
    pcode_table: PcodeTable = field(default_factory=default_pcode_table)
    vocabulary: Optional[MnemonicVocabulary] = None
    tfidf: Optional[TfidfModel] = None

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise FeatureError(f"unknown feature scheme {self.scheme!r}; expected one of {SCHEMES}")

    @classmethod
    def fit(
        cls,
        scheme: str,
        corpus: Sequence[FunctionSample],
        taxonomy: Optional[MnemonicClassTaxonomy] = None,
        pcode_table: Optional[PcodeTable] = None,
    ) -> "FeatureExtractor":
        extractor = cls(
            scheme=scheme,
            taxonomy=taxonomy or default_taxonomy(),
            pcode_table=pcode_table or default_pcode_table(),
        )
        if scheme == "tfidf128":
            extractor.tfidf = tfidf_fit(corpus)
        elif scheme in ("pcode_sem", "asm_sem"):
            extractor.vocabulary = build_vocabulary(corpus, pcode_table=extractor.pcode_table)
        logger.debug("Fitted %s extractor, dim=%d", scheme, extractor.dim)
        return extractor

    @property
    def is_graph_level(self) -> bool:
        return self.scheme in GRAPH_SCHEMES

    @property
    def context(self) -> FeatureContext:
        return FeatureContext(taxonomy=self.taxonomy, vocabulary=self.vocabulary, pcode_table=self.pcode_table)

    @property
    def dim(self) -> int:
        if self.scheme == "graph23":
            return len(GRAPH23_NAMES)
        if self.scheme == "tfidf128":
            return TFIDF_DIM
        if self.scheme == "identity":
            return 1
        if self.scheme == "mclass27":
            return len(self.taxonomy.classes)
        if self.vocabulary is None:
            raise FeatureError(f"scheme {self.scheme!r} is not fitted")
        width = len(self.vocabulary.pcode_tokens) if self.scheme == "pcode_sem" else len(self.vocabulary.tokens)
        return len(STRUCTURAL_NAMES) + width

    def graph_vector(self, sample: FunctionSample) -> np.ndarray:
        if self.scheme == "graph23":
            return graph_level_features(sample.cfg, self.taxonomy).values
        if self.scheme == "tfidf128":
            if self.tfidf is None:
                raise FeatureError("tfidf128 extractor is not fitted")
            return tfidf_transform(self.tfidf, sample.cfg).values
        raise FeatureError(f"{self.scheme!r} is a node-level scheme")

    def graph_matrix(self, samples: Sequence[FunctionSample]) -> np.ndarray:
        if not samples:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.vstack([self.graph_vector(sample) for sample in samples])

    def node_matrix(self, sample: FunctionSample) -> NodeFeatureMatrix:
        if self.is_graph_level:
            raise FeatureError(f"{self.scheme!r} is a graph-level scheme")
        return node_features(sample.cfg, self.scheme, self.context)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme,
            "taxonomy": self.taxonomy.to_dict(),
            "pcode_table": self.pcode_table.to_dict(),
            "vocabulary": None if self.vocabulary is None else self.vocabulary.to_dict(),
            "tfidf": None if self.tfidf is None else self.tfidf.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureExtractor":
        return cls(
            scheme=data["scheme"],
            taxonomy=MnemonicClassTaxonomy.from_dict(data["taxonomy"]),
            pcode_table=PcodeTable.from_dict(data["pcode_table"]),
            vocabulary=None if data.get("vocabulary") is None else MnemonicVocabulary.from_dict(data["vocabulary"]),
            tfidf=None if data.get("tfidf") is None else TfidfModel.from_dict(data["tfidf"]),
        )


def export_feature_rows(extractor: FeatureExtractor, samples: Sequence[FunctionSample]) -> Iterator[str]:
    """JSON-Lines debugging export, one record per function."""
    for sample in samples:
        if extractor.is_graph_level:
            record: Dict[str, Any] = {
                "function_id": sample.function_id,
                "scheme": extractor.scheme,
                "values": extractor.graph_vector(sample).tolist(),
            }
        else:
            record = extractor.node_matrix(sample).to_dict(sample.function_id)
        yield json.dumps(record, separators=(",", ":"))
