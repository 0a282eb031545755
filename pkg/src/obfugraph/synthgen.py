"""Synthetic base functions and label-faithful structural obfuscation transforms.

The transforms reproduce the structural and statistical signatures of the real
passes (dispatchers, junk blocks, inflated arithmetic), not their semantics.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

from obfugraph.cfg_model import (
    FLAG_DEGENERATE,
    FLAG_INJECTED,
    OBFUSCATION_CLASSES,
    BasicBlock,
    ControlFlowGraph,
    FunctionSample,
    Instruction,
    Obfuscation,
    ObfuscationLabel,
    Obfuscator,
    make_function_id,
)
from obfugraph.config import GeneratorConfig
from obfugraph.taxonomy import MnemonicClassTaxonomy, default_taxonomy
from obfugraph.utils import derive_seed

logger = logging.getLogger(__name__)

MBA_POOL = ("add", "sub", "xor", "or", "and", "shl", "imul")
PREDICATE_POOL = ("add", "xor", "imul", "and")
JUNK_POOL = ("add", "sub", "imul", "add", "sub", "xor")
LITERAL_POOL = ("mov", "xor", "add", "sub", "lea")
CONDITIONAL_JUMPS = ("je", "jne", "jl", "jg", "jle", "jge", "ja", "jb")
DISPATCHER = ("mov", "cmp", "ja", "lea", "movsxd", "add", "jmp")
VM_ENTRY = ("push", "push", "mov", "lea", "mov", "jmp")
VM_FETCH = ("mov", "movzx", "add")
VM_DISPATCH = ("cmp", "ja", "mov", "jmp")
VM_EXIT = ("pop", "pop", "ret")
MERGE_SELECTOR = ("mov", "imul", "and", "cmp", "jne")
COPY_SELECTOR = ("mov", "xor", "and", "test", "jne")

ARITHMETIC_CLASSES = ("arithmetic", "extended_arithmetic", "logic", "shift_rotate")
LITERAL_CLASSES = ("data_movement",)

_ZERO_OPERANDS = {"ret", "nop", "leave", "cdqe", "cqo", "cdq", "cwde", "hlt", "int3"}
_ONE_OPERAND = {"push", "pop", "call", "jmp", "inc", "dec", "neg", "not", "idiv", "div", "mul"} | set(CONDITIONAL_JUMPS)

_SHARED_STREAM = 1_000_003
_PROFILE_STREAM = 1_000_033

CANONICAL_VARIANTS: Tuple[Obfuscation, ...] = OBFUSCATION_CLASSES


def operand_count(mnemonic: str) -> int:
    if mnemonic in _ZERO_OPERANDS:
        return 0
    if mnemonic in _ONE_OPERAND:
        return 1
    return 2


def _insn(mnemonic: str) -> Instruction:
    return Instruction(mnemonic, operand_count(mnemonic))


def _insns(mnemonics: Iterable[str]) -> List[Instruction]:
    return [_insn(str(m)) for m in mnemonics]


class CfgBuilder:
    """Mutable CFG used while generating or rewriting one function."""

    def __init__(self) -> None:
        self.blocks: Dict[str, List[Instruction]] = {}
        self.edges: List[Tuple[str, str]] = []
        self._edge_set: Set[Tuple[str, str]] = set()
        self._counters: Dict[str, int] = {}
        self.entry: Optional[str] = None

    @classmethod
    def from_cfg(cls, cfg: ControlFlowGraph) -> "CfgBuilder":
        builder = cls()
        for block in cfg.blocks:
            builder.blocks[block.block_id] = list(block.instructions)
        for src, dst in cfg.edges:
            builder.add_edge(src, dst)
        builder.entry = cfg.entry
        return builder

    def new_block(self, instructions: Sequence[Instruction], prefix: str = "bb") -> str:
        counter = self._counters.get(prefix, 0)
        while f"{prefix}{counter}" in self.blocks:
            counter += 1
        block_id = f"{prefix}{counter}"
        self._counters[prefix] = counter + 1
        self.blocks[block_id] = list(instructions)
        if self.entry is None:
            self.entry = block_id
        return block_id

    def add_edge(self, src: str, dst: str) -> None:
        if (src, dst) not in self._edge_set:
            self._edge_set.add((src, dst))
            self.edges.append((src, dst))

    def set_edges(self, edges: Iterable[Tuple[str, str]]) -> None:
        self.edges, self._edge_set = [], set()
        for src, dst in edges:
            self.add_edge(src, dst)

    def successors(self, block_id: str) -> List[str]:
        return [dst for src, dst in self.edges if src == block_id]

    def redirect_incoming(self, old: str, new: str) -> None:
        """Point every edge into ``old`` (and the entry) at ``new``."""
        self.set_edges((src, new if dst == old and src != new else dst) for src, dst in self.edges)
        if self.entry == old:
            self.entry = new

    def build(self) -> ControlFlowGraph:
        assert self.entry is not None
        return ControlFlowGraph(
            blocks=tuple(BasicBlock(block_id, tuple(insns)) for block_id, insns in self.blocks.items()),
            edges=tuple(self.edges),
            entry=self.entry,
        )


def block_count_pmf(config: GeneratorConfig) -> np.ndarray:
    """P(k) proportional to exp(-shape * (k - min)) over [block_min, block_max]."""
    ks = np.arange(config.block_min, config.block_max + 1)
    weights = np.exp(-config.block_shape * (ks - config.block_min))
    return weights / weights.sum()


def mnemonic_distribution(config: GeneratorConfig, project_index: Optional[int] = None) -> Tuple[List[str], np.ndarray]:
    profile = config.resolved_profile()
    names = sorted(profile)
    weights = np.asarray([profile[name] for name in names], dtype=np.float64)
    if project_index is not None and config.project_style_noise > 0:
        rng = np.random.default_rng([config.seed, _PROFILE_STREAM, project_index])
        weights = weights * rng.lognormal(0.0, config.project_style_noise, size=weights.shape[0])
    return names, weights / weights.sum()


_FORM_WEIGHTS = {"sequence": 2.0, "if_then": 1.0, "if_else": 1.0, "loop": 1.0}


def _grow_region(builder: CfgBuilder, rng: np.random.Generator, k: int) -> Tuple[str, str]:
    """Build a single-entry single-exit region of exactly ``k`` blocks."""
    if k == 1:
        block = builder.new_block([])
        return block, block
    forms = ["sequence"]
    if k >= 3:
        forms += ["if_then", "loop"]
    if k >= 4:
        forms.append("if_else")
    weights = np.asarray([_FORM_WEIGHTS[form] for form in forms])
    form = forms[int(rng.choice(len(forms), p=weights / weights.sum()))]
    if form == "sequence":
        first_size = int(rng.integers(1, k))
        first_entry, first_exit = _grow_region(builder, rng, first_size)
        second_entry, second_exit = _grow_region(builder, rng, k - first_size)
        builder.add_edge(first_exit, second_entry)
        return first_entry, second_exit
    head = builder.new_block([])
    if form == "if_else":
        then_size = int(rng.integers(1, k - 2))
        then_entry, then_exit = _grow_region(builder, rng, then_size)
        else_entry, else_exit = _grow_region(builder, rng, k - 2 - then_size)
        join = builder.new_block([])
        for src, dst in ((head, then_entry), (head, else_entry), (then_exit, join), (else_exit, join)):
            builder.add_edge(src, dst)
        return head, join
    body_entry, body_exit = _grow_region(builder, rng, k - 2)
    tail = builder.new_block([])
    builder.add_edge(head, body_entry)
    if form == "if_then":
        builder.add_edge(head, tail)
        builder.add_edge(body_exit, tail)
    else:
        builder.add_edge(body_exit, head)
        builder.add_edge(head, tail)
    return head, tail


def _body(rng: np.random.Generator, config: GeneratorConfig, names: List[str], probs: np.ndarray) -> List[Instruction]:
    extra = rng.poisson(max(config.instr_mean - config.instr_min, 0.0))
    count = int(min(config.instr_min + extra, config.instr_max))
    return _insns(rng.choice(names, size=count, p=probs))


def _fill_blocks(builder: CfgBuilder, rng: np.random.Generator, config: GeneratorConfig, names: List[str], probs: np.ndarray) -> None:
    for block_id in builder.blocks:
        insns = _body(rng, config, names, probs)
        n_succ = len(builder.successors(block_id))
        if n_succ == 0:
            insns.append(_insn("ret"))
        elif n_succ == 1:
            if rng.random() < 0.5:
                insns.append(_insn("jmp"))
        else:
            insns += _insns([("cmp", "test")[int(rng.integers(2))], str(rng.choice(CONDITIONAL_JUMPS))])
        builder.blocks[block_id] = insns


def _generate_cfg(config: GeneratorConfig, rng: np.random.Generator, names: List[str], probs: np.ndarray) -> ControlFlowGraph:
    pmf = block_count_pmf(config)
    k = int(config.block_min + rng.choice(pmf.shape[0], p=pmf))
    builder = CfgBuilder()
    _grow_region(builder, rng, k)
    _fill_blocks(builder, rng, config, names, probs)
    return builder.build()


def _base_sample(config: GeneratorConfig, project: str, symbol: str, cfg: ControlFlowGraph) -> FunctionSample:
    binary = f"{project}.{config.opt_level}"
    return FunctionSample(
        function_id=make_function_id(project, binary, symbol),
        project=project,
        binary=binary,
        opt_level=config.opt_level,
        obfuscation=ObfuscationLabel(Obfuscation.NONE, Obfuscator.SYNTHETIC_BASE),
        cfg=cfg,
    )


def gen_base_function(config: GeneratorConfig, index: int) -> FunctionSample:
    """Random reducible CFG, deterministic per (seed, index)."""
    project_index = index % len(config.projects)
    names, probs = mnemonic_distribution(config, project_index)
    rng = np.random.default_rng([config.seed, index])
    cfg = _generate_cfg(config, rng, names, probs)
    return _base_sample(config, config.projects[project_index], f"fn_{index:05d}", cfg)


def gen_shared_function(config: GeneratorConfig, shared_index: int, project: str) -> FunctionSample:
    """A helper with identical code in every pseudo-project."""
    names, probs = mnemonic_distribution(config)
    rng = np.random.default_rng([config.seed, _SHARED_STREAM, shared_index])
    cfg = _generate_cfg(config, rng, names, probs)
    return _base_sample(config, project, f"shared_{shared_index:03d}", cfg)


def _variant(f: FunctionSample, label: Obfuscation, cfg: ControlFlowGraph, flags: Iterable[str] = ()) -> FunctionSample:
    binary = f"{f.binary}.{label.value.lower()}"
    merged = tuple(sorted(set(f.flags) | set(flags)))
    if FLAG_DEGENERATE in merged and FLAG_DEGENERATE not in f.flags:
        logger.warning("%s: %s transform degenerated to a passthrough", f.function_id, label.value)
    return replace(
        f,
        function_id=make_function_id(f.project, binary, f.symbol),
        binary=binary,
        obfuscation=ObfuscationLabel(label, Obfuscator.SYNTHETIC),
        cfg=cfg,
        flags=merged,
        line_no=None,
    )


def _is_site(mnemonic: str, taxonomy: MnemonicClassTaxonomy, classes: Sequence[str]) -> bool:
    return taxonomy.class_name(mnemonic) in classes


def _insert_before_terminator(instructions: List[Instruction], extra: List[Instruction]) -> List[Instruction]:
    control = {"jmp", "ret", *CONDITIONAL_JUMPS}
    cut = len(instructions)
    while cut > 0 and instructions[cut - 1].mnemonic in control | {"cmp", "test"}:
        cut -= 1
    return instructions[:cut] + extra + instructions[cut:]


# CFG-level rewrites. Each takes a builder and an rng and returns the flags it raised.


def _flatten(builder: CfgBuilder, rng: np.random.Generator) -> Set[str]:
    originals = list(builder.blocks)
    if len(originals) < 2:
        return {FLAG_DEGENERATE}
    dispatcher = builder.new_block(_insns(DISPATCHER), "dispatch")
    for block_id in originals:
        builder.blocks[block_id] = builder.blocks[block_id] + _insns(("mov", "jmp"))
    edges = [(dispatcher, block_id) for block_id in originals] + [(block_id, dispatcher) for block_id in originals]
    builder.set_edges(edges)
    builder.entry = dispatcher
    return set()


def _opaque_predicates(builder: CfgBuilder, rng: np.random.Generator, rate: float) -> Set[str]:
    originals = list(builder.blocks)
    n_sites = min(len(originals), max(1, int(round(rate * len(originals)))))
    chosen = sorted(rng.choice(len(originals), size=n_sites, replace=False).tolist())
    for position in chosen:
        site = originals[position]
        extra = rng.choice(PREDICATE_POOL, size=int(rng.integers(1, 4))).tolist()
        predicate = _insns(["imul", "add", *extra, "cmp", str(rng.choice(CONDITIONAL_JUMPS))])
        guard = builder.new_block(predicate, "opaque")
        builder.redirect_incoming(site, guard)
        junk = builder.new_block(_insns([*rng.choice(JUNK_POOL, size=int(rng.integers(3, 7))).tolist(), "jmp"]), "junk")
        builder.add_edge(guard, site)
        builder.add_edge(guard, junk)
        builder.add_edge(junk, originals[int(rng.integers(len(originals)))])
    return set()


def _encode_arithmetic(builder: CfgBuilder, rng: np.random.Generator, depth: int, taxonomy: MnemonicClassTaxonomy) -> Set[str]:
    flags: Set[str] = set()
    if not any(_is_site(insn.mnemonic, taxonomy, ARITHMETIC_CLASSES) for insns in builder.blocks.values() for insn in insns):
        assert builder.entry is not None
        site = _insns(rng.choice(MBA_POOL, size=3 * depth).tolist())
        builder.blocks[builder.entry] = _insert_before_terminator(builder.blocks[builder.entry], site)
        return {FLAG_INJECTED}
    for block_id, insns in builder.blocks.items():
        rewritten: List[Instruction] = []
        for insn in insns:
            if _is_site(insn.mnemonic, taxonomy, ARITHMETIC_CLASSES):
                rewritten += _insns(rng.choice(MBA_POOL, size=3 * depth).tolist())
            else:
                rewritten.append(insn)
        builder.blocks[block_id] = rewritten
    return flags


def _encode_literals(builder: CfgBuilder, rng: np.random.Generator, taxonomy: MnemonicClassTaxonomy) -> Set[str]:
    if not any(_is_site(insn.mnemonic, taxonomy, LITERAL_CLASSES) for insns in builder.blocks.values() for insn in insns):
        assert builder.entry is not None
        site = _insns(["mov", *rng.choice(LITERAL_POOL, size=2).tolist()])
        builder.blocks[builder.entry] = _insert_before_terminator(builder.blocks[builder.entry], site)
        return {FLAG_INJECTED}
    for block_id, insns in builder.blocks.items():
        rewritten: List[Instruction] = []
        for insn in insns:
            if _is_site(insn.mnemonic, taxonomy, LITERAL_CLASSES):
                rewritten += _insns(rng.choice(LITERAL_POOL, size=2).tolist())
            rewritten.append(insn)
        builder.blocks[block_id] = rewritten
    return set()


def _split(builder: CfgBuilder, rng: np.random.Generator, rate: float) -> Set[str]:
    eligible = [block_id for block_id, insns in builder.blocks.items() if len(insns) >= 2]
    if not eligible:
        return {FLAG_DEGENERATE}
    n_sites = min(len(eligible), max(1, int(round(rate * len(eligible)))))
    chosen = sorted(rng.choice(len(eligible), size=n_sites, replace=False).tolist())
    for position in chosen:
        head = eligible[position]
        insns = builder.blocks[head]
        cut = len(insns) // 2
        tail = builder.new_block(insns[cut:], "split")
        builder.blocks[head] = insns[:cut]
        moved = [(tail if src == head else src, dst) for src, dst in builder.edges]
        builder.set_edges(moved + [(head, tail)])
    return set()


def _copy(builder: CfgBuilder, rng: np.random.Generator, rate: float) -> Set[str]:
    originals = list(builder.blocks)
    n_sites = min(len(originals), max(1, int(round(rate * len(originals)))))
    chosen = sorted(rng.choice(len(originals), size=n_sites, replace=False).tolist())
    for position in chosen:
        block_id = originals[position]
        clone = builder.new_block(builder.blocks[block_id], "clone")
        for dst in builder.successors(block_id):
            builder.add_edge(clone, dst)
        selector = builder.new_block(_insns(COPY_SELECTOR), "select")
        builder.redirect_incoming(block_id, selector)
        builder.add_edge(selector, block_id)
        builder.add_edge(selector, clone)
    return set()


def _merge(builder: CfgBuilder, donor: Optional[ControlFlowGraph]) -> Set[str]:
    if donor is None:
        return {FLAG_DEGENERATE}
    assert builder.entry is not None
    original_entry = builder.entry
    renamed = {block.block_id: builder.new_block(block.instructions, "donor") for block in donor.blocks}
    for src, dst in donor.edges:
        builder.add_edge(renamed[src], renamed[dst])
    selector = builder.new_block(_insns(MERGE_SELECTOR), "merge")
    builder.entry = selector
    builder.add_edge(selector, original_entry)
    builder.add_edge(selector, renamed[donor.entry])
    return set()


def _virtualize(builder: CfgBuilder) -> CfgBuilder:
    vm = CfgBuilder()
    entry = vm.new_block(_insns(VM_ENTRY), "vm_entry")
    fetch = vm.new_block(_insns(VM_FETCH), "vm_fetch")
    dispatch = vm.new_block(_insns(VM_DISPATCH), "vm_dispatch")
    vm.add_edge(entry, fetch)
    vm.add_edge(fetch, dispatch)
    for insns in builder.blocks.values():
        handler = vm.new_block(insns + [_insn("jmp")], "vm_handler")
        vm.add_edge(dispatch, handler)
        vm.add_edge(handler, fetch)
    exit_block = vm.new_block(_insns(VM_EXIT), "vm_exit")
    vm.add_edge(dispatch, exit_block)
    return vm


def _rewrite(
    f: FunctionSample,
    label: Obfuscation,
    seed: int,
    rewrite: Callable[[CfgBuilder, np.random.Generator], Set[str]],
) -> FunctionSample:
    builder = CfgBuilder.from_cfg(f.cfg)
    flags = rewrite(builder, np.random.default_rng(seed))
    if FLAG_DEGENERATE in flags:
        return _variant(f, label, f.cfg, flags)
    return _variant(f, label, builder.build(), flags)


def apply_flatten(f: FunctionSample, seed: int) -> FunctionSample:
    """Route every block through one dispatcher block."""
    return _rewrite(f, Obfuscation.FLATTEN, seed, _flatten)


def apply_opaque_predicates(f: FunctionSample, seed: int, rate: float = 0.3) -> FunctionSample:
    if not 0 < rate <= 1:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    return _rewrite(f, Obfuscation.OPAQUE_PREDICATES, seed, lambda b, rng: _opaque_predicates(b, rng, rate))


def apply_encode_arithmetic(
    f: FunctionSample, seed: int, depth: int = 1, taxonomy: Optional[MnemonicClassTaxonomy] = None
) -> FunctionSample:
    if depth < 1:
        raise ValueError(f"depth must be at least 1, got {depth}")
    taxonomy = taxonomy or default_taxonomy()
    return _rewrite(f, Obfuscation.ENCODE_ARITHMETIC, seed, lambda b, rng: _encode_arithmetic(b, rng, depth, taxonomy))


def apply_encode_literals(f: FunctionSample, seed: int, taxonomy: Optional[MnemonicClassTaxonomy] = None) -> FunctionSample:
    taxonomy = taxonomy or default_taxonomy()
    return _rewrite(f, Obfuscation.ENCODE_LITERALS, seed, lambda b, rng: _encode_literals(b, rng, taxonomy))


def apply_split(f: FunctionSample, seed: int, rate: float = 0.4) -> FunctionSample:
    return _rewrite(f, Obfuscation.SPLIT, seed, lambda b, rng: _split(b, rng, rate))


def apply_copy(f: FunctionSample, seed: int, rate: float = 0.3) -> FunctionSample:
    return _rewrite(f, Obfuscation.COPY, seed, lambda b, rng: _copy(b, rng, rate))


def apply_merge(f: FunctionSample, other: Optional[FunctionSample], seed: int) -> FunctionSample:
    donor = None if other is None else other.cfg
    return _rewrite(f, Obfuscation.MERGE, seed, lambda b, rng: _merge(b, donor))


def apply_virtualize(f: FunctionSample, seed: int) -> FunctionSample:
    return _variant(f, Obfuscation.VIRTUALIZE, _virtualize(CfgBuilder.from_cfg(f.cfg)).build())


def _mix1_steps(
    builder: CfgBuilder, seed: int, rate: float, depth: int, taxonomy: MnemonicClassTaxonomy, first_stream: int
) -> Set[str]:
    flags = _opaque_predicates(builder, np.random.default_rng([seed, first_stream]), rate)
    flags |= _encode_arithmetic(builder, np.random.default_rng([seed, first_stream + 1]), depth, taxonomy)
    flags |= _flatten(builder, np.random.default_rng([seed, first_stream + 2]))
    return flags


def apply_mix1(
    f: FunctionSample, seed: int, rate: float = 0.3, depth: int = 1, taxonomy: Optional[MnemonicClassTaxonomy] = None
) -> FunctionSample:
    """Opaque predicates, then arithmetic encoding, then flattening."""
    taxonomy = taxonomy or default_taxonomy()
    builder = CfgBuilder.from_cfg(f.cfg)
    flags = _mix1_steps(builder, seed, rate, depth, taxonomy, first_stream=1)
    return _variant(f, Obfuscation.MIX1, builder.build(), flags)


def apply_mix2(
    f: FunctionSample,
    seed: int,
    rate: float = 0.3,
    depth: int = 1,
    split_rate: float = 0.4,
    taxonomy: Optional[MnemonicClassTaxonomy] = None,
) -> FunctionSample:
    """Split first, then the mix1 pipeline."""
    taxonomy = taxonomy or default_taxonomy()
    builder = CfgBuilder.from_cfg(f.cfg)
    flags = _split(builder, np.random.default_rng([seed, 0]), split_rate)
    flags |= _mix1_steps(builder, seed, rate, depth, taxonomy, first_stream=1)
    return _variant(f, Obfuscation.MIX2, builder.build(), flags)


def apply_transform(
    label: Obfuscation,
    f: FunctionSample,
    seed: int,
    config: GeneratorConfig,
    donor: Optional[FunctionSample] = None,
) -> FunctionSample:
    if label is Obfuscation.FLATTEN:
        return apply_flatten(f, seed)
    if label is Obfuscation.OPAQUE_PREDICATES:
        return apply_opaque_predicates(f, seed, config.opaque_rate)
    if label is Obfuscation.ENCODE_ARITHMETIC:
        return apply_encode_arithmetic(f, seed, config.encode_depth)
    if label is Obfuscation.ENCODE_LITERALS:
        return apply_encode_literals(f, seed)
    if label is Obfuscation.SPLIT:
        return apply_split(f, seed, config.split_rate)
    if label is Obfuscation.COPY:
        return apply_copy(f, seed, config.copy_rate)
    if label is Obfuscation.MERGE:
        return apply_merge(f, donor, seed)
    if label is Obfuscation.VIRTUALIZE:
        return apply_virtualize(f, seed)
    if label is Obfuscation.MIX1:
        return apply_mix1(f, seed, config.opaque_rate, config.encode_depth)
    if label is Obfuscation.MIX2:
        return apply_mix2(f, seed, config.opaque_rate, config.encode_depth, config.split_rate)
    raise ValueError(f"no transform for label {label.value!r}")


def _variant_labels(config: GeneratorConfig, variant_set: Optional[Iterable[Obfuscation | str]]) -> List[Obfuscation]:
    wanted = {Obfuscation(label) for label in (config.variants if variant_set is None else variant_set)}
    if Obfuscation.NONE in wanted:
        raise ValueError("the variant set lists obfuscated labels only")
    return [label for label in CANONICAL_VARIANTS if label in wanted]


def _with_variants(
    base: FunctionSample,
    labels: Sequence[Obfuscation],
    config: GeneratorConfig,
    stream: Sequence[int],
    donor: Optional[FunctionSample],
) -> List[FunctionSample]:
    samples = [base]
    for label in labels:
        seed = derive_seed(config.seed, *stream, CANONICAL_VARIANTS.index(label))
        samples.append(apply_transform(label, base, seed, config, donor))
    return samples


def _bases_by_project(config: GeneratorConfig, bases: Sequence[FunctionSample]) -> Dict[str, List[FunctionSample]]:
    """Bases grouped by project; a Merge donor never crosses a project boundary."""
    by_project: Dict[str, List[FunctionSample]] = {project: [] for project in config.projects}
    for base in bases:
        by_project[base.project].append(base)
    return by_project


def gen_corpus(config: GeneratorConfig, variant_set: Optional[Iterable[Obfuscation | str]] = None) -> List[FunctionSample]:
    """Each base function followed by its variants in canonical label order."""
    labels = _variant_labels(config, variant_set)
    bases = [gen_base_function(config, index) for index in range(config.n_functions)]
    corpus: List[FunctionSample] = []
    by_project = _bases_by_project(config, bases)
    for index, base in enumerate(tqdm(bases, desc="synth", disable=None, leave=False)):
        siblings = by_project[base.project]
        donor = siblings[(siblings.index(base) + 1) % len(siblings)]
        corpus.extend(_with_variants(base, labels, config, (index,), donor))
    for shared_index in range(config.n_shared_functions):
        for project in config.projects:
            base = gen_shared_function(config, shared_index, project)
            siblings = by_project[project]
            donor = siblings[shared_index % len(siblings)] if siblings else None
            corpus.extend(_with_variants(base, labels, config, (_SHARED_STREAM, shared_index), donor))
    logger.info(
        "Generated %d samples from %d base functions (%d shared) over %d projects",
        len(corpus),
        len(bases),
        config.n_shared_functions,
        len(config.projects),
    )
    return corpus
