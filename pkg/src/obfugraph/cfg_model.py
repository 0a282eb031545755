"""Attributed CFG data model, JSON-Lines interchange format and vocabularies."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import IO, Any, Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx

from obfugraph.errors import CfgValidationError, CorpusParseError, DatasetError
from obfugraph.taxonomy import PcodeTable, default_pcode_table
from obfugraph.utils import write_bytes

logger = logging.getLogger(__name__)

MAX_OPERANDS = 8
OPT_LEVELS = ("O0", "O2")
FLAG_DEGENERATE = "degenerate"
FLAG_INJECTED = "injected"


class Obfuscation(str, Enum):
    NONE = "None"
    ENCODE_ARITHMETIC = "EncodeArithmetic"
    ENCODE_LITERALS = "EncodeLiterals"
    VIRTUALIZE = "Virtualize"
    OPAQUE_PREDICATES = "OpaquePredicates"
    FLATTEN = "Flatten"
    SPLIT = "Split"
    MERGE = "Merge"
    COPY = "Copy"
    MIX1 = "Mix1"
    MIX2 = "Mix2"


# Mix1 = Flatten + EncodeArithmetic + OpaquePredicates; Mix2 = Mix1 + Split.
OBFUSCATION_CLASSES: Tuple[Obfuscation, ...] = tuple(o for o in Obfuscation if o is not Obfuscation.NONE)


class Obfuscator(str, Enum):
    NONE = "none"
    TIGRESS = "tigress"
    OLLVM = "ollvm"
    SYNTHETIC = "synthetic"
    SYNTHETIC_BASE = "synthetic-base"


UNOBFUSCATED_TAGS = (Obfuscator.NONE, Obfuscator.SYNTHETIC_BASE)


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operand_count: int = 0
    pcode_ops: Optional[Tuple[str, ...]] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"m": self.mnemonic, "nops": self.operand_count}
        if self.pcode_ops is not None:
            data["pcode"] = list(self.pcode_ops)
        return data


@dataclass(frozen=True)
class BasicBlock:
    block_id: str
    instructions: Tuple[Instruction, ...]

    @property
    def mnemonics(self) -> List[str]:
        return [insn.mnemonic for insn in self.instructions]

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.block_id, "insns": [insn.to_dict() for insn in self.instructions]}


@dataclass(frozen=True)
class ControlFlowGraph:
    blocks: Tuple[BasicBlock, ...]
    edges: Tuple[Tuple[str, str], ...]
    entry: str

    @property
    def n_nodes(self) -> int:
        return len(self.blocks)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def block_ids(self) -> Tuple[str, ...]:
        return tuple(block.block_id for block in self.blocks)

    @cached_property
    def block_index(self) -> Dict[str, int]:
        return {block_id: idx for idx, block_id in enumerate(self.block_ids)}

    def block(self, block_id: str) -> BasicBlock:
        return self.blocks[self.block_index[block_id]]

    @cached_property
    def successors(self) -> Dict[str, List[str]]:
        succ: Dict[str, List[str]] = {block_id: [] for block_id in self.block_ids}
        for src, dst in self.edges:
            succ.setdefault(src, []).append(dst)
        return succ

    @cached_property
    def predecessors(self) -> Dict[str, List[str]]:
        pred: Dict[str, List[str]] = {block_id: [] for block_id in self.block_ids}
        for src, dst in self.edges:
            pred.setdefault(dst, []).append(src)
        return pred

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.block_ids)
        graph.add_edges_from(self.edges)
        return graph

    def connected_components(self) -> int:
        return nx.number_weakly_connected_components(self.to_networkx())

    def instruction_count(self) -> int:
        return sum(len(block.instructions) for block in self.blocks)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "entry": self.entry,
            "blocks": [block.to_dict() for block in self.blocks],
            "edges": [[src, dst] for src, dst in self.edges],
        }


@dataclass(frozen=True)
class ObfuscationLabel:
    value: Obfuscation = Obfuscation.NONE
    obfuscator: Obfuscator = Obfuscator.NONE

    @property
    def is_obfuscated(self) -> bool:
        return self.value is not Obfuscation.NONE

    def to_dict(self) -> Dict[str, str]:
        return {"label": self.value.value, "obfuscator": self.obfuscator.value}


@dataclass(frozen=True)
class FunctionSample:
    function_id: str
    project: str
    binary: str
    opt_level: str
    obfuscation: ObfuscationLabel
    cfg: ControlFlowGraph
    flags: Tuple[str, ...] = ()
    line_no: Optional[int] = field(default=None, compare=False)

    @property
    def symbol(self) -> str:
        parts = self.function_id.split(":", 2)
        return parts[2] if len(parts) == 3 else self.function_id

    @property
    def label(self) -> Obfuscation:
        return self.obfuscation.value

    @property
    def degenerate(self) -> bool:
        return FLAG_DEGENERATE in self.flags

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "function_id": self.function_id,
            "project": self.project,
            "binary": self.binary,
            "opt_level": self.opt_level,
            "obfuscation": self.obfuscation.to_dict(),
        }
        data.update(self.cfg.to_dict())
        if self.flags:
            data["flags"] = list(self.flags)
        return data


def make_function_id(project: str, binary: str, symbol: str) -> str:
    return f"{project}:{binary}:{symbol}"


def validate_cfg(cfg: ControlFlowGraph) -> List[str]:
    """Return one description per violated CFG invariant; empty means valid."""
    violations: List[str] = []
    seen: set[str] = set()
    for block in cfg.blocks:
        if block.block_id in seen:
            violations.append(f"duplicate block id {block.block_id!r}")
        seen.add(block.block_id)
        if not block.instructions:
            violations.append(f"block {block.block_id!r} has no instructions")
        for pos, insn in enumerate(block.instructions):
            if not insn.mnemonic or any(char.isspace() for char in insn.mnemonic):
                violations.append(f"block {block.block_id!r} instruction {pos}: invalid mnemonic {insn.mnemonic!r}")
            if insn.operand_count < 0 or insn.operand_count > MAX_OPERANDS:
                violations.append(
                    f"block {block.block_id!r} instruction {pos}: operand count {insn.operand_count} "
                    f"outside [0, {MAX_OPERANDS}]"
                )
    if cfg.entry not in seen:
        violations.append(f"entry {cfg.entry!r} references a missing block")
    seen_edges: set[Tuple[str, str]] = set()
    for src, dst in cfg.edges:
        for endpoint in (src, dst):
            if endpoint not in seen:
                violations.append(f"edge ({src!r}, {dst!r}) references missing block {endpoint!r}")
        if (src, dst) in seen_edges:
            violations.append(f"duplicate edge ({src!r}, {dst!r})")
        seen_edges.add((src, dst))
    return violations


def validate_sample(sample: FunctionSample) -> List[str]:
    violations = validate_cfg(sample.cfg)
    if sample.opt_level not in OPT_LEVELS:
        violations.append(f"opt_level {sample.opt_level!r} not in {OPT_LEVELS}")
    unobfuscated_tag = sample.obfuscation.obfuscator in UNOBFUSCATED_TAGS
    if sample.obfuscation.is_obfuscated == unobfuscated_tag:
        violations.append(
            f"label {sample.label.value!r} inconsistent with obfuscator {sample.obfuscation.obfuscator.value!r}"
        )
    return violations


def _require(record: Dict[str, Any], key: str, kind: type, where: str = "record") -> Any:
    if key not in record:
        raise ValueError(f"{where} is missing key {key!r}")
    value = record[key]
    if kind is int and isinstance(value, bool):
        raise ValueError(f"{where} key {key!r} must be int")
    if not isinstance(value, kind):
        raise ValueError(f"{where} key {key!r} must be {kind.__name__}")
    return value


def _decode_instruction(data: Any, where: str) -> Instruction:
    if not isinstance(data, dict):
        raise ValueError(f"{where} must be an object")
    pcode = data.get("pcode")
    if pcode is not None:
        if not isinstance(pcode, list) or not all(isinstance(op, str) for op in pcode):
            raise ValueError(f"{where} key 'pcode' must be a list of strings")
        pcode = tuple(pcode)
    return Instruction(
        mnemonic=_require(data, "m", str, where).lower(),
        operand_count=_require(data, "nops", int, where),
        pcode_ops=pcode,
    )


def sample_from_dict(record: Dict[str, Any], line_no: Optional[int] = None) -> FunctionSample:
    """Decode one interchange record; raises ValueError on schema violations."""
    if not isinstance(record, dict):
        raise ValueError("record must be a JSON object")
    obfuscation = _require(record, "obfuscation", dict)
    try:
        label = ObfuscationLabel(
            value=Obfuscation(_require(obfuscation, "label", str, "obfuscation")),
            obfuscator=Obfuscator(_require(obfuscation, "obfuscator", str, "obfuscation")),
        )
    except ValueError as exc:
        raise ValueError(f"obfuscation: {exc}") from exc
    blocks = []
    for b_idx, block_data in enumerate(_require(record, "blocks", list)):
        where = f"blocks[{b_idx}]"
        if not isinstance(block_data, dict):
            raise ValueError(f"{where} must be an object")
        insns = _require(block_data, "insns", list, where)
        blocks.append(
            BasicBlock(
                block_id=_require(block_data, "id", str, where),
                instructions=tuple(_decode_instruction(insn, f"{where}.insns[{i}]") for i, insn in enumerate(insns)),
            )
        )
    edges = []
    for e_idx, edge in enumerate(_require(record, "edges", list)):
        if not (isinstance(edge, list) and len(edge) == 2 and all(isinstance(end, str) for end in edge)):
            raise ValueError(f"edges[{e_idx}] must be a [src, dst] pair of strings")
        edges.append((edge[0], edge[1]))
    flags = record.get("flags", [])
    if not isinstance(flags, list) or not all(isinstance(flag, str) for flag in flags):
        raise ValueError("key 'flags' must be a list of strings")
    return FunctionSample(
        function_id=_require(record, "function_id", str),
        project=_require(record, "project", str),
        binary=_require(record, "binary", str),
        opt_level=_require(record, "opt_level", str),
        obfuscation=label,
        cfg=ControlFlowGraph(blocks=tuple(blocks), edges=tuple(edges), entry=_require(record, "entry", str)),
        flags=tuple(flags),
        line_no=line_no,
    )


def parse_corpus(stream: IO[bytes] | bytes | Iterable[bytes | str]) -> List[FunctionSample]:
    """Parse a JSON-Lines corpus; every returned sample is valid."""
    if isinstance(stream, (bytes, bytearray)):
        stream = bytes(stream).split(b"\n")
    samples: List[FunctionSample] = []
    first_seen: Dict[str, int] = {}
    for line_no, raw in enumerate(stream, start=1):
        try:
            line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        except UnicodeDecodeError as exc:
            raise CorpusParseError(line_no, "invalid UTF-8") from exc
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(line_no, f"malformed JSON ({exc.msg})") from exc
        try:
            sample = sample_from_dict(record, line_no)
        except ValueError as exc:
            raise CfgValidationError([str(exc)], line_no) from exc
        violations = validate_sample(sample)
        if violations:
            raise CfgValidationError(violations, line_no)
        if sample.function_id in first_seen:
            raise CorpusParseError(
                line_no,
                f"duplicate function_id {sample.function_id!r} (first seen at line {first_seen[sample.function_id]})",
            )
        first_seen[sample.function_id] = line_no
        samples.append(sample)
    logger.debug("Parsed %d samples", len(samples))
    return samples


def dump_sample(sample: FunctionSample) -> str:
    return json.dumps(sample.to_dict(), separators=(",", ":"), ensure_ascii=False)


def serialize_corpus(samples: Iterable[FunctionSample]) -> bytes:
    return "".join(dump_sample(sample) + "\n" for sample in samples).encode("utf-8")


def read_corpus(path: Path) -> List[FunctionSample]:
    try:
        handle = path.open("rb")
    except OSError as exc:
        raise DatasetError(f"cannot read corpus {path}: {exc}") from exc
    with handle:
        return parse_corpus(handle)


def write_corpus(path: Path, samples: Iterable[FunctionSample]) -> None:
    write_bytes(path, serialize_corpus(samples))


def filter_opt_level(corpus: Sequence[FunctionSample], level: Optional[str]) -> List[FunctionSample]:
    """Select one optimization level; a mixed corpus without a level is rejected."""
    if level is None:
        levels = {sample.opt_level for sample in corpus}
        if len(levels) > 1:
            raise DatasetError(f"corpus mixes optimization levels {sorted(levels)}; select one")
        return list(corpus)
    if level not in OPT_LEVELS:
        raise DatasetError(f"unknown optimization level {level!r}")
    return [sample for sample in corpus if sample.opt_level == level]


@dataclass(frozen=True)
class MnemonicVocabulary:
    """Ranked mnemonic and Pcode tokens, ordered by (count desc, token asc)."""

    tokens: Tuple[str, ...]
    counts: Tuple[int, ...]
    document_frequency: Tuple[int, ...]
    pcode_tokens: Tuple[str, ...] = ()
    pcode_counts: Tuple[int, ...] = ()
    pcode_document_frequency: Tuple[int, ...] = ()
    n_documents: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def index(self) -> Dict[str, int]:
        return {token: idx for idx, token in enumerate(self.tokens)}

    @cached_property
    def pcode_index(self) -> Dict[str, int]:
        return {token: idx for idx, token in enumerate(self.pcode_tokens)}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tokens": list(self.tokens),
            "counts": list(self.counts),
            "document_frequency": list(self.document_frequency),
            "pcode_tokens": list(self.pcode_tokens),
            "pcode_counts": list(self.pcode_counts),
            "pcode_document_frequency": list(self.pcode_document_frequency),
            "n_documents": self.n_documents,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MnemonicVocabulary":
        return cls(
            tokens=tuple(data["tokens"]),
            counts=tuple(data["counts"]),
            document_frequency=tuple(data["document_frequency"]),
            pcode_tokens=tuple(data.get("pcode_tokens", ())),
            pcode_counts=tuple(data.get("pcode_counts", ())),
            pcode_document_frequency=tuple(data.get("pcode_document_frequency", ())),
            n_documents=data.get("n_documents", 0),
        )


def count_mnemonics(cfg: ControlFlowGraph) -> Counter[str]:
    return Counter(insn.mnemonic for block in cfg.blocks for insn in block.instructions)


def count_pcode(cfg: ControlFlowGraph, table: PcodeTable) -> Counter[str]:
    return Counter(op for block in cfg.blocks for insn in block.instructions for op in table.ops_for(insn))


def _rank(totals: Counter[str], max_size: Optional[int]) -> List[str]:
    ranked = sorted(totals, key=lambda token: (-totals[token], token))
    return ranked if max_size is None else ranked[:max_size]


def build_vocabulary(
    corpus: Sequence[FunctionSample],
    max_size: Optional[int] = None,
    pcode_table: Optional[PcodeTable] = None,
) -> MnemonicVocabulary:
    """Rank mnemonics (and Pcode ops) by total occurrences; ``max_size=None`` is unlimited."""
    if not corpus:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    if max_size is not None and max_size < 1:
        raise ValueError("max_size must be positive")
    table = pcode_table or default_pcode_table()
    totals: Counter[str] = Counter()
    docs: Counter[str] = Counter()
    pcode_totals: Counter[str] = Counter()
    pcode_docs: Counter[str] = Counter()
    for sample in corpus:
        counts = count_mnemonics(sample.cfg)
        totals.update(counts)
        docs.update(counts.keys())
        pcode = count_pcode(sample.cfg, table)
        pcode_totals.update(pcode)
        pcode_docs.update(pcode.keys())
    tokens = _rank(totals, max_size)
    pcode_tokens = _rank(pcode_totals, max_size)
    return MnemonicVocabulary(
        tokens=tuple(tokens),
        counts=tuple(totals[token] for token in tokens),
        document_frequency=tuple(docs[token] for token in tokens),
        pcode_tokens=tuple(pcode_tokens),
        pcode_counts=tuple(pcode_totals[token] for token in pcode_tokens),
        pcode_document_frequency=tuple(pcode_docs[token] for token in pcode_tokens),
        n_documents=len(corpus),
    )
