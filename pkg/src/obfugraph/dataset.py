"""Leakage-controlled dataset splits, shared-function removal and class ratios."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from obfugraph.cfg_model import Obfuscation, FunctionSample
from obfugraph.errors import DatasetError
from obfugraph.utils import stable_json, write_text

logger = logging.getLogger(__name__)

SETS = ("train", "validation", "test")
STRATEGIES = ("per_function", "per_binary")
DEFAULT_RATIOS = (0.64, 0.16, 0.20)
DEFAULT_BINS = 10

BaseKey = Tuple[str, str]


@dataclass(frozen=True)
class SplitManifest:
    strategy: str
    seed: int
    assignment: Dict[str, str] = field(hash=False)
    ratios: Tuple[float, ...] = DEFAULT_RATIOS
    stratification_bins: Tuple[float, ...] = ()

    def set_of(self, function_id: str) -> str:
        return self.assignment[function_id]

    def members(self, set_name: str) -> List[str]:
        return [fid for fid, assigned in self.assignment.items() if assigned == set_name]

    def select(self, corpus: Sequence[FunctionSample], set_name: str) -> List[FunctionSample]:
        return [sample for sample in corpus if self.assignment.get(sample.function_id) == set_name]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "bins": list(self.stratification_bins),
            "assignment": dict(sorted(self.assignment.items())),
        }

    def save(self, path: Path) -> None:
        write_text(path, stable_json(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitManifest":
        if data.get("strategy") not in STRATEGIES:
            raise DatasetError(f"manifest strategy must be one of {STRATEGIES}")
        assignment = dict(data["assignment"])
        bad = sorted({value for value in assignment.values() if value not in SETS})
        if bad:
            raise DatasetError(f"manifest assigns unknown sets {bad}")
        return cls(
            strategy=data["strategy"],
            seed=int(data["seed"]),
            assignment=assignment,
            ratios=tuple(data.get("ratios", DEFAULT_RATIOS)),
            stratification_bins=tuple(data.get("bins", ())),
        )

    @classmethod
    def load(cls, path: Path) -> "SplitManifest":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class DedupeRecord:
    symbol: str
    projects: Tuple[str, ...]
    removed_samples: int


def base_key(sample: FunctionSample) -> BaseKey:
    return (sample.project, sample.symbol)


def dedupe_shared_functions(
    corpus: Sequence[FunctionSample],
) -> Tuple[List[FunctionSample], List[DedupeRecord]]:
    """Drop every base function found in two or more projects, with all its variants."""
    projects_by_symbol: Dict[str, set[str]] = defaultdict(set)
    for sample in corpus:
        if not sample.obfuscation.is_obfuscated:
            projects_by_symbol[sample.symbol].add(sample.project)
    shared = {symbol for symbol, projects in projects_by_symbol.items() if len(projects) >= 2}
    kept = [sample for sample in corpus if sample.symbol not in shared]
    removed = Counter(sample.symbol for sample in corpus if sample.symbol in shared)
    log = [
        DedupeRecord(symbol=symbol, projects=tuple(sorted(projects_by_symbol[symbol])), removed_samples=removed[symbol])
        for symbol in sorted(shared)
    ]
    if log:
        logger.warning("Removed %d shared functions (%d samples)", len(log), sum(removed.values()))
    return kept, log


def group_by_base(corpus: Sequence[FunctionSample]) -> Dict[BaseKey, List[FunctionSample]]:
    groups: Dict[BaseKey, List[FunctionSample]] = defaultdict(list)
    for sample in corpus:
        groups[base_key(sample)].append(sample)
    for key, members in groups.items():
        bases = [sample for sample in members if not sample.obfuscation.is_obfuscated]
        if len(bases) != 1:
            raise DatasetError(
                f"base function {key[1]!r} of project {key[0]!r} has {len(bases)} unobfuscated versions; expected 1"
            )
    return dict(groups)


def largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    """Integer set sizes summing to ``total``; leftovers go to the largest fractions, earlier sets first."""
    raw = [total * ratio for ratio in ratios]
    sizes = [int(np.floor(value)) for value in raw]
    order = sorted(range(len(ratios)), key=lambda idx: (-(raw[idx] - sizes[idx]), idx))
    for idx in order[: total - sum(sizes)]:
        sizes[idx] += 1
    return sizes


def _check_ratios(ratios: Sequence[float]) -> None:
    if any(ratio < 0 for ratio in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios {tuple(ratios)} must be non-negative and sum to 1")


def _stratified_assignment(
    groups: Dict[BaseKey, List[FunctionSample]],
    ratios: Sequence[float],
    seed: int,
    n_bins: int,
    set_names: Sequence[str],
) -> Tuple[Dict[str, str], Tuple[float, ...]]:
    keys = sorted(groups)
    if not keys:
        return {}, ()
    sizes = np.array(
        [next(s for s in groups[key] if not s.obfuscation.is_obfuscated).cfg.n_nodes for key in keys],
        dtype=np.float64,
    )
    edges = np.unique(np.quantile(sizes, np.linspace(0.0, 1.0, n_bins + 1)))
    bin_of = np.searchsorted(edges[1:-1], sizes, side="right")
    rng = np.random.default_rng(seed)
    assignment: Dict[str, str] = {}
    for bin_idx in range(len(edges)):
        members = [key for key, b in zip(keys, bin_of) if b == bin_idx]
        if not members:
            continue
        shuffled = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for set_name, count in zip(set_names, largest_remainder(len(shuffled), ratios)):
            for key in shuffled[start : start + count]:
                for sample in groups[key]:
                    assignment[sample.function_id] = set_name
            start += count
    return assignment, tuple(float(edge) for edge in edges)


def split_per_function(
    corpus: Sequence[FunctionSample],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    n_bins: int = DEFAULT_BINS,
) -> SplitManifest:
    """Stratified split of base functions; variants follow their base function."""
    _check_ratios(ratios)
    if len(ratios) != 3:
        raise DatasetError("per-function split needs (train, validation, test) ratios")
    assignment, bins = _stratified_assignment(group_by_base(corpus), ratios, seed, n_bins, SETS)
    return SplitManifest(
        strategy="per_function",
        seed=seed,
        assignment=assignment,
        ratios=tuple(float(r) for r in ratios),
        stratification_bins=bins,
    )


def split_per_binary(
    corpus: Sequence[FunctionSample],
    train_projects: Iterable[str],
    test_projects: Iterable[str],
    val_ratio: float = 0.20,
    seed: int = 0,
    n_bins: int = DEFAULT_BINS,
) -> SplitManifest:
    """Whole projects go to test; the rest are split into train/validation per function."""
    train_set = set(train_projects)
    test_set = set(test_projects)
    if not train_set or not test_set:
        raise DatasetError("per-binary split needs non-empty train and test project lists")
    overlap = sorted(train_set & test_set)
    if overlap:
        raise DatasetError(f"projects {overlap} are listed for both train and test")
    known = {sample.project for sample in corpus}
    unknown = sorted((train_set | test_set) - known)
    if unknown:
        raise DatasetError(f"unknown projects {unknown}")
    unassigned = sorted(known - train_set - test_set)
    if unassigned:
        raise DatasetError(f"projects {unassigned} are in neither the train nor the test list")
    if not 0.0 <= val_ratio < 1.0:
        raise DatasetError("val_ratio must lie in [0, 1)")

    ratios = (1.0 - val_ratio, val_ratio)
    train_pool = [sample for sample in corpus if sample.project in train_set]
    assignment, bins = _stratified_assignment(group_by_base(train_pool), ratios, seed, n_bins, SETS[:2])
    for sample in corpus:
        if sample.project in test_set:
            assignment[sample.function_id] = "test"
    return SplitManifest(
        strategy="per_binary",
        seed=seed,
        assignment=assignment,
        ratios=(ratios[0], ratios[1], 0.0),
        stratification_bins=bins,
    )


@dataclass(frozen=True)
class LeakageViolation:
    kind: str
    subject: str
    sets: Tuple[str, ...]

    def describe(self) -> str:
        return f"{self.kind}: {self.subject} appears in {', '.join(self.sets)}"


def audit_leakage(manifest: SplitManifest, corpus: Sequence[FunctionSample]) -> List[LeakageViolation]:
    """Check a manifest against its corpus; an empty list means no leakage."""
    violations: List[LeakageViolation] = []
    ids = Counter(sample.function_id for sample in corpus)
    for function_id, count in sorted(ids.items()):
        if count > 1:
            violations.append(LeakageViolation("duplicate_function_id", function_id, (f"x{count}",)))
    for function_id in sorted(set(ids) - set(manifest.assignment)):
        violations.append(LeakageViolation("unassigned", function_id, ()))
    for function_id in sorted(set(manifest.assignment) - set(ids)):
        violations.append(LeakageViolation("unknown_function", function_id, (manifest.assignment[function_id],)))

    assigned = [sample for sample in corpus if sample.function_id in manifest.assignment]
    sets_by_base: Dict[BaseKey, set[str]] = defaultdict(set)
    sets_by_symbol: Dict[str, set[str]] = defaultdict(set)
    sets_by_project: Dict[str, set[str]] = defaultdict(set)
    for sample in assigned:
        set_name = manifest.assignment[sample.function_id]
        sets_by_base[base_key(sample)].add(set_name)
        sets_by_project[sample.project].add("test" if set_name == "test" else "train+validation")
        sets_by_symbol[sample.symbol].add(set_name)

    if manifest.strategy == "per_function":
        for (project, symbol), sets in sorted(sets_by_base.items()):
            if len(sets) > 1:
                violations.append(LeakageViolation("base_function_straddle", f"{project}:{symbol}", _ordered(sets)))
    if manifest.strategy == "per_binary":
        for project, sets in sorted(sets_by_project.items()):
            if len(sets) > 1:
                violations.append(LeakageViolation("project_straddle", project, tuple(sorted(sets))))
    straddling_bases = {symbol for (_, symbol), sets in sets_by_base.items() if len(sets) > 1}
    for symbol, sets in sorted(sets_by_symbol.items()):
        if len(sets) > 1 and symbol not in straddling_bases:
            violations.append(LeakageViolation("shared_function", symbol, _ordered(sets)))
    return violations


def _ordered(sets: Iterable[str]) -> Tuple[str, ...]:
    return tuple(name for name in SETS if name in set(sets))


@dataclass(frozen=True)
class ClassRatioReport:
    sample_counts: Dict[str, int] = field(hash=False)
    function_counts: Dict[str, int] = field(hash=False)
    ratio_binary: Dict[str, float] = field(hash=False)
    class_counts: Dict[str, Dict[str, int]] = field(hash=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_counts": self.sample_counts,
            "function_counts": self.function_counts,
            "ratio_binary": self.ratio_binary,
            "class_counts": self.class_counts,
        }

    def to_table(self) -> str:
        lines = ["set         functions / samples   ratio binary"]
        for set_name in SETS:
            lines.append(
                f"{set_name:<11} {self.function_counts[set_name]:>9,} / {self.sample_counts[set_name]:<9,} "
                f"{self.ratio_binary[set_name]:.2f}"
            )
        return "\n".join(lines)


def class_ratio_report(manifest: SplitManifest, corpus: Sequence[FunctionSample]) -> ClassRatioReport:
    sample_counts = dict.fromkeys(SETS, 0)
    unobfuscated = dict.fromkeys(SETS, 0)
    bases: Dict[str, set[BaseKey]] = {name: set() for name in SETS}
    class_counts: Dict[str, Dict[str, int]] = {name: {label.value: 0 for label in Obfuscation} for name in SETS}
    for sample in corpus:
        set_name = manifest.assignment.get(sample.function_id)
        if set_name is None:
            continue
        sample_counts[set_name] += 1
        bases[set_name].add(base_key(sample))
        class_counts[set_name][sample.label.value] += 1
        if not sample.obfuscation.is_obfuscated:
            unobfuscated[set_name] += 1
    ratio = {
        name: (unobfuscated[name] / sample_counts[name]) if sample_counts[name] else 0.0 for name in SETS
    }
    return ClassRatioReport(
        sample_counts=sample_counts,
        function_counts={name: len(bases[name]) for name in SETS},
        ratio_binary=ratio,
        class_counts=class_counts,
    )
