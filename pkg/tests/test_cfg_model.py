from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import pytest

from conftest import block, make_cfg, make_sample
from obfugraph.cfg_model import (
    FLAG_DEGENERATE,
    OBFUSCATION_CLASSES,
    Obfuscation,
    build_vocabulary,
    dump_sample,
    filter_opt_level,
    parse_corpus,
    read_corpus,
    serialize_corpus,
    validate_cfg,
    write_corpus,
)
from obfugraph.errors import CfgValidationError, CorpusParseError, DatasetError


def _record(function_id: str = "zlib:zlib.O0:inflate", label: str = "None", obfuscator: str = "none") -> dict:
    return {
        "function_id": function_id,
        "project": "zlib",
        "binary": "zlib.O0",
        "opt_level": "O0",
        "obfuscation": {"label": label, "obfuscator": obfuscator},
        "entry": "b0",
        "blocks": [
            {"id": "b0", "insns": [{"m": "MOV", "nops": 2}, {"m": "jmp", "nops": 1}]},
            {"id": "b1", "insns": [{"m": "ret", "nops": 0, "pcode": ["LOAD", "RETURN"]}]},
        ],
        "edges": [["b0", "b1"]],
    }


def _lines(*records: dict) -> bytes:
    return b"".join(json.dumps(record).encode("utf-8") + b"\n" for record in records)


def test_label_set_has_ten_obfuscated_values() -> None:
    assert len(OBFUSCATION_CLASSES) == 10
    assert Obfuscation.NONE not in OBFUSCATION_CLASSES


def test_parse_corpus_reads_records_and_lowercases_mnemonics() -> None:
    samples = parse_corpus(_lines(_record()))

    assert len(samples) == 1
    sample = samples[0]
    assert sample.symbol == "inflate"
    assert sample.cfg.n_nodes == 2
    assert sample.cfg.n_edges == 1
    assert sample.cfg.blocks[0].mnemonics == ["mov", "jmp"]
    assert sample.cfg.blocks[1].instructions[0].pcode_ops == ("LOAD", "RETURN")
    assert sample.line_no == 1


def test_parse_corpus_skips_blank_lines() -> None:
    data = _lines(_record()) + b"\n   \n" + _lines(_record("zlib:zlib.O0:deflate"))
    samples = parse_corpus(data)
    assert [sample.line_no for sample in samples] == [1, 4]


def test_serialized_corpus_parses_back_to_equal_samples(diamond_cfg) -> None:
    corpus = [
        make_sample("f", diamond_cfg),
        make_sample("f", diamond_cfg, Obfuscation.FLATTEN),
    ]
    assert parse_corpus(serialize_corpus(corpus)) == corpus


def test_malformed_json_reports_its_line_number() -> None:
    data = _lines(_record()) + b"{not json\n"
    with pytest.raises(CorpusParseError) as excinfo:
        parse_corpus(data)
    assert excinfo.value.line_no == 2


def test_invalid_utf8_reports_its_line_number(tmp_path) -> None:
    data = _lines(_record()) + b"\xff\n"
    with pytest.raises(CorpusParseError) as excinfo:
        parse_corpus(data)
    assert excinfo.value.line_no == 2
    assert "invalid UTF-8" in str(excinfo.value)

    path = tmp_path / "corpus.jsonl"
    path.write_bytes(data)
    with pytest.raises(CorpusParseError) as excinfo:
        read_corpus(path)
    assert excinfo.value.line_no == 2


def test_duplicate_function_id_is_rejected() -> None:
    with pytest.raises(CorpusParseError) as excinfo:
        parse_corpus(_lines(_record(), _record()))
    assert excinfo.value.line_no == 2
    assert "first seen at line 1" in str(excinfo.value)


def test_edge_to_missing_block_is_a_validation_error() -> None:
    record = _record()
    record["edges"].append(["b1", "ghost"])
    with pytest.raises(CfgValidationError) as excinfo:
        parse_corpus(_lines(record))
    assert excinfo.value.line_no == 1
    assert any("ghost" in violation for violation in excinfo.value.violations)


def test_missing_key_is_a_validation_error() -> None:
    record = _record()
    del record["entry"]
    with pytest.raises(CfgValidationError):
        parse_corpus(_lines(record))


def test_label_must_agree_with_obfuscator_tag() -> None:
    with pytest.raises(CfgValidationError):
        parse_corpus(_lines(_record(label="Flatten", obfuscator="none")))
    with pytest.raises(CfgValidationError):
        parse_corpus(_lines(_record(label="None", obfuscator="tigress")))
    assert parse_corpus(_lines(_record(label="None", obfuscator="synthetic-base")))


def test_validate_cfg_collects_every_violation() -> None:
    cfg = make_cfg(
        [block("a", "mov"), block("a", "add"), block("e")],
        [("a", "a"), ("a", "a"), ("a", "missing")],
        entry="nowhere",
    )
    violations = validate_cfg(cfg)
    assert any("duplicate block id" in v for v in violations)
    assert any("has no instructions" in v for v in violations)
    assert any("entry 'nowhere'" in v for v in violations)
    assert any("duplicate edge" in v for v in violations)
    assert any("missing block 'missing'" in v for v in violations)


def test_validate_cfg_accepts_self_loops(loop_cfg) -> None:
    cfg = make_cfg(list(loop_cfg.blocks), list(loop_cfg.edges) + [("exit", "exit")])
    assert validate_cfg(cfg) == []


def test_flags_are_written_only_when_present(diamond_cfg) -> None:
    sample = make_sample("f", diamond_cfg)
    assert "flags" not in json.loads(dump_sample(sample))
    flagged = replace(sample, flags=(FLAG_DEGENERATE,))
    assert json.loads(dump_sample(flagged))["flags"] == [FLAG_DEGENERATE]
    assert parse_corpus(serialize_corpus([flagged]))[0].degenerate


def test_corpus_file_round_trip(tmp_path: Path, diamond_cfg) -> None:
    path = tmp_path / "nested" / "corpus.jsonl"
    write_corpus(path, [make_sample("f", diamond_cfg)])
    assert read_corpus(path)[0].symbol == "f"


def test_read_corpus_missing_file_raises_dataset_error(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        read_corpus(tmp_path / "absent.jsonl")


def test_filter_opt_level_rejects_mixed_corpus(diamond_cfg) -> None:
    corpus = [make_sample("f", diamond_cfg, opt_level="O0"), make_sample("g", diamond_cfg, opt_level="O2")]
    with pytest.raises(DatasetError):
        filter_opt_level(corpus, None)
    assert [sample.symbol for sample in filter_opt_level(corpus, "O2")] == ["g"]
    with pytest.raises(DatasetError):
        filter_opt_level(corpus, "O3")


def test_vocabulary_orders_by_count_then_token(diamond_cfg) -> None:
    vocabulary = build_vocabulary([make_sample("f", diamond_cfg)])
    # mov x2, add x2, then single occurrences alphabetically
    assert vocabulary.tokens[:2] == ("add", "mov")
    assert list(vocabulary.tokens[2:]) == sorted(vocabulary.tokens[2:])
    assert vocabulary.counts[:2] == (2, 2)
    assert vocabulary.n_documents == 1


def test_vocabulary_max_size_truncates(diamond_cfg) -> None:
    vocabulary = build_vocabulary([make_sample("f", diamond_cfg)], max_size=3)
    assert len(vocabulary) == 3
