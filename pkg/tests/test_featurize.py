from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import replace

import networkx as nx
import numpy as np
import pytest

from conftest import block, make_cfg, make_sample
from obfugraph.errors import ConfigError, FeatureError
from obfugraph.featurize import (
    GRAPH23_NAMES,
    STRUCTURAL_NAMES,
    TFIDF_DIM,
    FeatureExtractor,
    TfidfModel,
    count_back_edges,
    cyclomatic_complexity,
    export_feature_rows,
    graph_level_features,
    node_features,
    smoothed_idf,
    tfidf_fit,
    tfidf_transform,
)
from obfugraph.taxonomy import MnemonicClassTaxonomy, default_pcode_table, default_taxonomy


def test_cyclomatic_complexity_of_fixed_shapes(diamond_cfg, loop_cfg, single_block_cfg) -> None:
    assert cyclomatic_complexity(diamond_cfg) == 2
    assert cyclomatic_complexity(loop_cfg) == 2
    assert cyclomatic_complexity(single_block_cfg) == 1


def test_cyclomatic_complexity_counts_components() -> None:
    cfg = make_cfg([block("a", "ret"), block("b", "ret")], [])
    assert cyclomatic_complexity(cfg) == 0 - 2 + 2 * 2


@pytest.mark.parametrize("seed", range(30))
def test_cyclomatic_complexity_matches_networkx(seed: int) -> None:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    m = int(rng.integers(0, n * (n - 1) + 1)) if n > 1 else 0
    graph = nx.gnm_random_graph(n, m, seed=seed, directed=True)
    cfg = make_cfg([block(f"n{node}", "nop") for node in graph.nodes], [(f"n{u}", f"n{v}") for u, v in graph.edges])
    expected = m - n + 2 * nx.number_weakly_connected_components(graph)
    assert cyclomatic_complexity(cfg) == expected


def test_back_edges(diamond_cfg, loop_cfg) -> None:
    assert count_back_edges(diamond_cfg) == 0
    assert count_back_edges(loop_cfg) == 1


def test_graph23_on_diamond(diamond_cfg) -> None:
    vector = graph_level_features(diamond_cfg)
    values = dict(zip(GRAPH23_NAMES, vector.values.tolist()))

    assert vector.dim == 23
    assert values["n_nodes"] == 4
    assert values["n_edges"] == 4
    assert values["cyclomatic_complexity"] == 2
    assert values["density"] == pytest.approx(4 / 12)
    assert values["mean_out_degree"] == 1.0
    assert values["max_out_degree"] == 2
    assert values["max_in_degree"] == 2
    assert values["n_connected_components"] == 1
    assert values["n_leaf_nodes"] == 1
    assert values["n_branch_nodes"] == 1
    assert values["longest_path_length"] == 2
    assert values["n_back_edges"] == 0
    assert values["total_instructions"] == 11
    assert values["mean_instructions_per_block"] == 2.75
    assert values["max_instructions_per_block"] == 4
    assert values["n_data_movement"] == 4
    assert values["n_arithmetic"] == 2
    assert values["n_logic"] == 1
    assert values["n_control"] == 3
    assert values["n_compare"] == 1


def test_graph23_category_counts_cover_every_instruction(small_corpus) -> None:
    for sample in small_corpus[:50]:
        values = graph_level_features(sample.cfg).values
        assert values[16:].sum() == sample.cfg.instruction_count()


def test_longest_path_collapses_loops(loop_cfg) -> None:
    values = dict(zip(GRAPH23_NAMES, graph_level_features(loop_cfg).values.tolist()))
    # {head, body} condense to one node, then one edge to exit
    assert values["longest_path_length"] == 1


def test_tfidf_matches_hand_computation(diamond_cfg, loop_cfg) -> None:
    corpus = [make_sample("f", diamond_cfg), make_sample("g", loop_cfg)]
    extractor = FeatureExtractor.fit("tfidf128", corpus)
    vector = extractor.graph_vector(corpus[0])

    counts = Counter(m for b in diamond_cfg.blocks for m in b.mnemonics)
    documents = [set(m for b in s.cfg.blocks for m in b.mnemonics) for s in corpus]
    assert vector.shape == (TFIDF_DIM,)
    assert extractor.tfidf is not None
    for position, token in enumerate(extractor.tfidf.tokens):
        df = sum(token in doc for doc in documents)
        expected = counts[token] * (math.log(3 / (1 + df)) + 1.0)
        assert vector[position] == pytest.approx(expected, abs=1e-12)
    assert not vector[len(extractor.tfidf.tokens) :].any()


def test_tfidf_unseen_mnemonics_are_ignored(diamond_cfg) -> None:
    extractor = FeatureExtractor.fit("tfidf128", [make_sample("f", diamond_cfg)])
    unseen = make_sample("h", make_cfg([block("x", "vpxor", "cpuid")], []))
    assert not extractor.graph_vector(unseen).any()


def test_smoothed_idf() -> None:
    assert smoothed_idf(9, 9) == pytest.approx(1.0)
    assert smoothed_idf(9, 0) == pytest.approx(math.log(10) + 1.0)


def test_identity_features_are_ones(diamond_cfg) -> None:
    matrix = node_features(diamond_cfg, "identity")
    assert matrix.values.shape == (4, 1)
    assert (matrix.values == 1.0).all()
    assert matrix.node_order == ("a", "b", "c", "d")


def test_mclass27_rows_count_instructions(diamond_cfg) -> None:
    taxonomy = default_taxonomy()
    matrix = node_features(diamond_cfg, "mclass27")
    assert matrix.cols == 27
    for row, blk in zip(matrix.values, diamond_cfg.blocks):
        assert row.sum() == len(blk.instructions)
        assert row[taxonomy.class_index("mov")] == blk.mnemonics.count("mov")


def test_structural_slice_of_entry_and_exit(diamond_cfg) -> None:
    extractor = FeatureExtractor.fit("pcode_sem", [make_sample("f", diamond_cfg)])
    values = extractor.node_matrix(make_sample("f", diamond_cfg)).values
    entry = dict(zip(STRUCTURAL_NAMES, values[0, :11].tolist()))
    exit_ = dict(zip(STRUCTURAL_NAMES, values[3, :11].tolist()))

    assert entry == {
        "n_instructions": 4,
        "in_degree": 0,
        "out_degree": 2,
        "is_entry": 1,
        "is_exit": 0,
        "n_call_like": 0,
        "n_ret_like": 0,
        "n_cond_branch": 1,
        "n_uncond_branch": 0,
        "n_arithmetic": 0,
        "n_load_store": 2,
    }
    assert exit_["is_exit"] == 1
    assert exit_["n_ret_like"] == 1
    assert exit_["in_degree"] == 2


def test_pcode_sem_counts_match_lifting_table(small_corpus) -> None:
    table = default_pcode_table()
    extractor = FeatureExtractor.fit("pcode_sem", small_corpus)
    assert extractor.vocabulary is not None
    index = extractor.vocabulary.pcode_index
    for sample in small_corpus[:50]:
        values = extractor.node_matrix(sample).values
        assert values.shape == (sample.cfg.n_nodes, extractor.dim)
        for row, blk in enumerate(sample.cfg.blocks):
            expected = np.zeros(len(index))
            for insn in blk.instructions:
                for op in table.ops_for(insn):
                    expected[index[op]] += 1
            assert np.array_equal(values[row, 11:], expected)


def test_asm_sem_counts_match_block_mnemonics(small_corpus) -> None:
    extractor = FeatureExtractor.fit("asm_sem", small_corpus)
    assert extractor.vocabulary is not None
    assert extractor.dim == 11 + len(extractor.vocabulary.tokens)
    for sample in small_corpus[:50]:
        values = extractor.node_matrix(sample).values
        for row, blk in enumerate(sample.cfg.blocks):
            counts = Counter(blk.mnemonics)
            for token, count in counts.items():
                assert values[row, 11 + extractor.vocabulary.index[token]] == count
            assert values[row, 11:].sum() == len(blk.instructions)


def test_unfitted_semantic_scheme_is_an_error(diamond_cfg) -> None:
    with pytest.raises(FeatureError):
        node_features(diamond_cfg, "asm_sem")
    with pytest.raises(FeatureError):
        FeatureExtractor(scheme="asm_sem").dim


def test_scheme_level_mismatches_are_errors(diamond_cfg) -> None:
    sample = make_sample("f", diamond_cfg)
    with pytest.raises(FeatureError):
        FeatureExtractor.fit("graph23", [sample]).node_matrix(sample)
    with pytest.raises(FeatureError):
        FeatureExtractor.fit("identity", [sample]).graph_vector(sample)
    with pytest.raises(FeatureError):
        FeatureExtractor(scheme="bag_of_words")


def test_extractor_state_survives_serialization(small_corpus) -> None:
    fitted = FeatureExtractor.fit("tfidf128", small_corpus)
    restored = FeatureExtractor.from_dict(json.loads(json.dumps(fitted.to_dict())))
    sample = small_corpus[3]
    assert np.array_equal(restored.graph_vector(sample), fitted.graph_vector(sample))


def test_export_feature_rows(diamond_cfg) -> None:
    sample = make_sample("f", diamond_cfg)
    graph_rows = [json.loads(line) for line in export_feature_rows(FeatureExtractor.fit("graph23", [sample]), [sample])]
    node_rows = [json.loads(line) for line in export_feature_rows(FeatureExtractor.fit("identity", [sample]), [sample])]

    assert graph_rows[0]["function_id"] == sample.function_id
    assert len(graph_rows[0]["values"]) == 23
    assert node_rows[0]["node_order"] == ["a", "b", "c", "d"]
    assert node_rows[0]["rows"] == [[1.0]] * 4


def _shuffled(cfg, seed: int):
    order = np.random.default_rng(seed).permutation(cfg.n_nodes)
    return make_cfg([cfg.blocks[i] for i in order], cfg.edges, cfg.entry)


@pytest.mark.parametrize("scheme", ["mclass27", "pcode_sem", "asm_sem"])
def test_node_rows_follow_block_order(small_corpus, scheme: str) -> None:
    extractor = FeatureExtractor.fit(scheme, small_corpus)
    for seed, sample in enumerate(small_corpus[::7]):
        shuffled = replace(sample, cfg=_shuffled(sample.cfg, seed))
        original = extractor.node_matrix(sample)
        reordered = extractor.node_matrix(shuffled)
        assert reordered.node_order == shuffled.cfg.block_ids
        rows = [original.node_order.index(block_id) for block_id in reordered.node_order]
        assert np.array_equal(reordered.values, original.values[rows])


def test_graph23_ignores_block_order(small_corpus) -> None:
    for seed, sample in enumerate(small_corpus[::5]):
        before = graph_level_features(sample.cfg).values
        after = graph_level_features(_shuffled(sample.cfg, seed)).values
        assert np.allclose(before, after)


def test_tfidf_width_is_bounded() -> None:
    with pytest.raises(ConfigError):
        tfidf_fit([], max_features=TFIDF_DIM + 1)
    with pytest.raises(ConfigError):
        tfidf_fit([], max_features=0)
    wide = TfidfModel(tokens=tuple(f"m{i}" for i in range(TFIDF_DIM + 1)), idf=(1.0,) * (TFIDF_DIM + 1), n_documents=1)
    with pytest.raises(FeatureError):
        tfidf_transform(wide, make_cfg([block("a", "ret")], []))


def test_taxonomy_needs_one_broad_category_per_class() -> None:
    data = default_taxonomy().to_dict()
    data["broad"] = data["broad"][:-1]
    with pytest.raises(ConfigError, match="broad categories"):
        MnemonicClassTaxonomy.from_dict(data)
