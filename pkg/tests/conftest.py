from __future__ import annotations

from typing import List, Sequence, Tuple

import pytest

from obfugraph.cfg_model import (
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
from obfugraph.dataset import SplitManifest, split_per_function
from obfugraph.synthgen import gen_corpus


def block(block_id: str, *mnemonics: str) -> BasicBlock:
    return BasicBlock(block_id, tuple(Instruction(m, 0 if m == "ret" else 2) for m in mnemonics))


def make_cfg(blocks: Sequence[BasicBlock], edges: Sequence[Tuple[str, str]], entry: str | None = None) -> ControlFlowGraph:
    return ControlFlowGraph(blocks=tuple(blocks), edges=tuple(edges), entry=entry or blocks[0].block_id)


def make_sample(
    symbol: str,
    cfg: ControlFlowGraph,
    label: Obfuscation = Obfuscation.NONE,
    project: str = "zlib",
    opt_level: str = "O0",
) -> FunctionSample:
    binary = f"{project}.{opt_level}" if label is Obfuscation.NONE else f"{project}.{opt_level}.{label.value.lower()}"
    obfuscator = Obfuscator.NONE if label is Obfuscation.NONE else Obfuscator.TIGRESS
    return FunctionSample(
        function_id=make_function_id(project, binary, symbol),
        project=project,
        binary=binary,
        opt_level=opt_level,
        obfuscation=ObfuscationLabel(label, obfuscator),
        cfg=cfg,
    )


@pytest.fixture
def diamond_cfg() -> ControlFlowGraph:
    return make_cfg(
        [
            block("a", "push", "mov", "cmp", "je"),
            block("b", "add", "add", "jmp"),
            block("c", "xor", "mov"),
            block("d", "pop", "ret"),
        ],
        [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
    )


@pytest.fixture
def loop_cfg() -> ControlFlowGraph:
    return make_cfg(
        [
            block("head", "mov", "cmp", "jl"),
            block("body", "add", "imul", "jmp"),
            block("exit", "ret"),
        ],
        [("head", "body"), ("body", "head"), ("head", "exit")],
    )


@pytest.fixture
def single_block_cfg() -> ControlFlowGraph:
    return make_cfg([block("only", "mov", "add", "ret")], [])


@pytest.fixture(scope="session")
def small_config() -> GeneratorConfig:
    return GeneratorConfig(seed=7, n_functions=12, block_max=8, instr_mean=4.0)


@pytest.fixture(scope="session")
def small_corpus(small_config: GeneratorConfig) -> List[FunctionSample]:
    return gen_corpus(small_config)


@pytest.fixture(scope="session")
def small_manifest(small_corpus: List[FunctionSample]) -> SplitManifest:
    return split_per_function(small_corpus, seed=1, n_bins=1)
