from __future__ import annotations

from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import pytest

from conftest import make_sample
from obfugraph.cfg_model import Obfuscation
from obfugraph.config import GeneratorConfig
from obfugraph.dataset import (
    SETS,
    SplitManifest,
    audit_leakage,
    base_key,
    class_ratio_report,
    dedupe_shared_functions,
    group_by_base,
    largest_remainder,
    split_per_binary,
    split_per_function,
)
from obfugraph.errors import DatasetError
from obfugraph.synthgen import gen_corpus


def _sets_per_base(manifest: SplitManifest, corpus) -> dict:
    sets = defaultdict(set)
    for sample in corpus:
        sets[base_key(sample)].add(manifest.set_of(sample.function_id))
    return sets


def test_largest_remainder() -> None:
    assert largest_remainder(10, (0.64, 0.16, 0.20)) == [6, 2, 2]
    assert largest_remainder(12, (0.64, 0.16, 0.20)) == [8, 2, 2]
    assert largest_remainder(3, (1 / 3, 1 / 3, 1 / 3)) == [1, 1, 1]
    # ties go to the earlier set
    assert largest_remainder(2, (0.5, 0.25, 0.25)) == [1, 1, 0]
    assert largest_remainder(0, (0.64, 0.16, 0.20)) == [0, 0, 0]


def test_per_function_split_keeps_variants_with_their_base(small_corpus) -> None:
    manifest = split_per_function(small_corpus, seed=5)

    assert set(manifest.assignment) == {sample.function_id for sample in small_corpus}
    assert all(len(sets) == 1 for sets in _sets_per_base(manifest, small_corpus).values())
    assert audit_leakage(manifest, small_corpus) == []


def test_per_function_split_sizes_follow_ratios(small_corpus) -> None:
    manifest = split_per_function(small_corpus, seed=5, n_bins=1)
    bases = defaultdict(set)
    for sample in small_corpus:
        bases[manifest.set_of(sample.function_id)].add(base_key(sample))
    assert [len(bases[name]) for name in SETS] == [8, 2, 2]
    assert len(manifest.members("train")) == 8 * 11


def test_stratified_split_balances_every_block_count_bin() -> None:
    corpus = gen_corpus(GeneratorConfig(seed=3, n_functions=300), variant_set=["Flatten"])
    manifest = split_per_function(corpus, seed=4, n_bins=5)
    edges = np.asarray(manifest.stratification_bins)
    assert len(edges) > 2

    per_bin = defaultdict(Counter)
    for sample in corpus:
        if sample.label is Obfuscation.NONE:
            bin_idx = int(np.searchsorted(edges[1:-1], sample.cfg.n_nodes, side="right"))
            per_bin[bin_idx][manifest.set_of(sample.function_id)] += 1
    assert len(per_bin) >= 2
    for counts in per_bin.values():
        total = sum(counts.values())
        for set_name, ratio in zip(SETS, manifest.ratios):
            assert abs(counts[set_name] - ratio * total) <= 1


def test_per_function_split_is_deterministic(small_corpus) -> None:
    first = split_per_function(small_corpus, seed=11)
    second = split_per_function(small_corpus, seed=11)
    assert first.assignment == second.assignment
    assert first.stratification_bins == second.stratification_bins


def test_per_function_split_rejects_bad_ratios(small_corpus) -> None:
    with pytest.raises(DatasetError):
        split_per_function(small_corpus, ratios=(0.5, 0.5, 0.5))
    with pytest.raises(DatasetError):
        split_per_function(small_corpus, ratios=(0.8, 0.2))


def test_per_binary_split_holds_out_whole_projects(small_corpus) -> None:
    manifest = split_per_binary(small_corpus, ["alpha", "bravo", "charlie"], ["delta", "echo"], seed=2)

    for sample in small_corpus:
        assigned = manifest.set_of(sample.function_id)
        if sample.project in ("delta", "echo"):
            assert assigned == "test"
        else:
            assert assigned in ("train", "validation")
    assert audit_leakage(manifest, small_corpus) == []
    assert manifest.ratios == (0.8, 0.2, 0.0)


@pytest.mark.parametrize(
    "train, test",
    [
        (["alpha", "bravo", "charlie", "delta"], ["delta", "echo"]),
        (["alpha", "bravo", "charlie", "delta"], ["zeta"]),
        (["alpha", "bravo"], ["delta", "echo"]),
        ([], ["alpha"]),
    ],
)
def test_per_binary_split_rejects_bad_project_lists(small_corpus, train, test) -> None:
    with pytest.raises(DatasetError):
        split_per_binary(small_corpus, train, test)


def test_audit_reports_a_straddling_base_function(small_corpus) -> None:
    manifest = split_per_function(small_corpus, seed=5)
    moved = next(sample for sample in small_corpus if sample.obfuscation.is_obfuscated)
    other = "test" if manifest.set_of(moved.function_id) != "test" else "train"
    leaky = SplitManifest(
        strategy=manifest.strategy,
        seed=manifest.seed,
        assignment={**manifest.assignment, moved.function_id: other},
    )

    violations = audit_leakage(leaky, small_corpus)
    assert [v.kind for v in violations] == ["base_function_straddle"]
    assert violations[0].subject == f"{moved.project}:{moved.symbol}"
    assert "appears in" in violations[0].describe()


def test_audit_reports_a_straddling_project(small_corpus) -> None:
    manifest = split_per_binary(small_corpus, ["alpha", "bravo", "charlie"], ["delta", "echo"])
    moved = next(sample for sample in small_corpus if sample.project == "alpha")
    leaky = SplitManifest(strategy="per_binary", seed=0, assignment={**manifest.assignment, moved.function_id: "test"})

    kinds = [v.kind for v in audit_leakage(leaky, small_corpus)]
    assert "project_straddle" in kinds


def test_audit_reports_shared_and_unassigned_functions(diamond_cfg) -> None:
    corpus = [
        make_sample("memcpy", diamond_cfg, project="zlib"),
        make_sample("memcpy", diamond_cfg, project="libpng"),
        make_sample("inflate", diamond_cfg, project="zlib"),
    ]
    manifest = SplitManifest(
        strategy="per_function",
        seed=0,
        assignment={corpus[0].function_id: "train", corpus[1].function_id: "test", "ghost:ghost.O0:x": "train"},
    )

    kinds = {v.kind: v for v in audit_leakage(manifest, corpus)}
    assert kinds["shared_function"].sets == ("train", "test")
    assert kinds["unassigned"].subject == corpus[2].function_id
    assert kinds["unknown_function"].subject == "ghost:ghost.O0:x"


def test_dedupe_drops_shared_functions_with_their_variants() -> None:
    config = GeneratorConfig(seed=7, n_functions=6, n_shared_functions=2, block_max=6)
    corpus = gen_corpus(config)

    kept, records = dedupe_shared_functions(corpus)

    assert [record.symbol for record in records] == ["shared_000", "shared_001"]
    assert records[0].projects == tuple(sorted(config.projects))
    assert records[0].removed_samples == len(config.projects) * 11
    assert len(kept) == 6 * 11
    assert not any(sample.symbol.startswith("shared_") for sample in kept)


def test_dedupe_without_shared_functions_is_a_no_op(small_corpus) -> None:
    kept, records = dedupe_shared_functions(small_corpus)
    assert kept == list(small_corpus)
    assert records == []


def test_group_by_base_needs_exactly_one_unobfuscated_version(diamond_cfg) -> None:
    with pytest.raises(DatasetError):
        group_by_base([make_sample("f", diamond_cfg, opt_level="O0"), make_sample("f", diamond_cfg, opt_level="O2")])
    with pytest.raises(DatasetError):
        group_by_base([make_sample("f", diamond_cfg, Obfuscation.FLATTEN)])
    groups = group_by_base([make_sample("f", diamond_cfg), make_sample("f", diamond_cfg, Obfuscation.SPLIT)])
    assert len(groups[("zlib", "f")]) == 2


def test_class_ratio_report(small_corpus) -> None:
    manifest = split_per_function(small_corpus, seed=5, n_bins=1)
    report = class_ratio_report(manifest, small_corpus)

    assert report.sample_counts == {"train": 88, "validation": 22, "test": 22}
    assert report.function_counts == {"train": 8, "validation": 2, "test": 2}
    for name in SETS:
        assert report.ratio_binary[name] == pytest.approx(1 / 11)
        assert report.class_counts[name]["Flatten"] == report.function_counts[name]
    table = report.to_table()
    assert table.splitlines()[1].startswith("train")
    assert "0.09" in table


def test_manifest_file_round_trip(tmp_path: Path, small_corpus) -> None:
    manifest = split_per_function(small_corpus, seed=3)
    path = tmp_path / "split.json"
    manifest.save(path)
    assert SplitManifest.load(path) == manifest


def test_manifest_load_errors(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        SplitManifest.load(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(DatasetError):
        SplitManifest.load(broken)
    with pytest.raises(DatasetError):
        SplitManifest.from_dict({"strategy": "per_function", "seed": 0, "assignment": {"a": "holdout"}})
    with pytest.raises(DatasetError):
        SplitManifest.from_dict({"strategy": "random", "seed": 0, "assignment": {}})
