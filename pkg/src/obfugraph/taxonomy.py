"""Mnemonic class taxonomy and the assembly-to-Pcode fallback table.

Both tables ship as tab-separated files under ``obfugraph/data`` and can be
replaced by a user file with the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Tuple

from obfugraph.errors import ConfigError

if TYPE_CHECKING:
    from obfugraph.cfg_model import Instruction

N_TAXONOMY_CLASSES = 27
OTHER_CLASS = "other"
UNMAPPED_PCODE = "UNMAPPED"
BROAD_CATEGORIES: Tuple[str, ...] = (
    "data_movement",
    "arithmetic",
    "logic",
    "shift_rotate",
    "control",
    "compare",
    "other",
)


@dataclass(frozen=True)
class MnemonicClassTaxonomy:
    classes: Tuple[str, ...]
    broad: Tuple[str, ...]
    mapping: Dict[str, str] = field(hash=False)

    def __post_init__(self) -> None:
        if len(self.classes) != N_TAXONOMY_CLASSES:
            raise ConfigError(f"taxonomy must define exactly {N_TAXONOMY_CLASSES} classes, got {len(self.classes)}")
        if len(self.broad) != len(self.classes):
            raise ConfigError(f"taxonomy lists {len(self.broad)} broad categories for {len(self.classes)} classes")
        if OTHER_CLASS not in self.classes:
            raise ConfigError(f"taxonomy must contain the {OTHER_CLASS!r} fallback class")
        unknown = sorted({cls for cls in self.mapping.values() if cls not in self.classes})
        if unknown:
            raise ConfigError(f"taxonomy maps mnemonics to undeclared classes {unknown}")
        bad_broad = sorted({cat for cat in self.broad if cat not in BROAD_CATEGORIES})
        if bad_broad:
            raise ConfigError(f"unknown broad categories {bad_broad}")

    @cached_property
    def _class_positions(self) -> Dict[str, int]:
        return {name: idx for idx, name in enumerate(self.classes)}

    def class_name(self, mnemonic: str) -> str:
        return self.mapping.get(mnemonic, OTHER_CLASS)

    def class_index(self, mnemonic: str) -> int:
        return self._class_positions[self.class_name(mnemonic)]

    def broad_category(self, mnemonic: str) -> str:
        return self.broad[self.class_index(mnemonic)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "classes": list(self.classes),
            "broad": list(self.broad),
            "mapping": dict(sorted(self.mapping.items())),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MnemonicClassTaxonomy":
        return cls(classes=tuple(data["classes"]), broad=tuple(data["broad"]), mapping=dict(data["mapping"]))


def parse_taxonomy(text: str) -> MnemonicClassTaxonomy:
    classes: list[str] = []
    broad: list[str] = []
    mapping: Dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if cells[0] == "#class":
            if len(cells) != 3:
                raise ConfigError(f"taxonomy line {line_no}: expected '#class<TAB>name<TAB>broad'")
            classes.append(cells[1])
            broad.append(cells[2])
            continue
        if line.startswith("#"):
            continue
        if len(cells) != 2:
            raise ConfigError(f"taxonomy line {line_no}: expected 'mnemonic<TAB>class'")
        mapping[cells[0].strip().lower()] = cells[1].strip()
    return MnemonicClassTaxonomy(classes=tuple(classes), broad=tuple(broad), mapping=mapping)


def load_taxonomy(path: Path) -> MnemonicClassTaxonomy:
    return parse_taxonomy(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_taxonomy() -> MnemonicClassTaxonomy:
    return parse_taxonomy((resources.files("obfugraph") / "data" / "taxonomy.tsv").read_text(encoding="utf-8"))


@dataclass(frozen=True)
class PcodeTable:
    """Fallback lifting of assembly mnemonics to Pcode op multisets."""

    mapping: Dict[str, Tuple[str, ...]] = field(hash=False)

    def ops_for(self, instruction: "Instruction") -> Tuple[str, ...]:
        if instruction.pcode_ops is not None:
            return instruction.pcode_ops
        return self.mapping.get(instruction.mnemonic, (UNMAPPED_PCODE,))

    def to_dict(self) -> Dict[str, Any]:
        return {"mapping": {key: list(ops) for key, ops in sorted(self.mapping.items())}}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PcodeTable":
        return cls(mapping={key: tuple(ops) for key, ops in data["mapping"].items()})


def parse_pcode_table(text: str) -> PcodeTable:
    mapping: Dict[str, Tuple[str, ...]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if len(cells) != 2 or not cells[1].split():
            raise ConfigError(f"pcode table line {line_no}: expected 'mnemonic<TAB>OP [OP ...]'")
        mapping[cells[0].strip().lower()] = tuple(cells[1].split())
    return PcodeTable(mapping=mapping)


def load_pcode_table(path: Path) -> PcodeTable:
    return parse_pcode_table(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_pcode_table() -> PcodeTable:
    return parse_pcode_table((resources.files("obfugraph") / "data" / "pcode_map.tsv").read_text(encoding="utf-8"))
