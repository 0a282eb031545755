from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from obfugraph.config import GnnConfig, TreeConfig
from obfugraph.errors import ModelError
from obfugraph.eval import BINARY_CLASSES, evaluate
from obfugraph.gnn import GnnModel
from obfugraph.models import TrainedModel, normalize_algorithm, train_model
from obfugraph.trees import TreeEnsembleModel

TINY_GNN = GnnConfig(n_layers=1, hidden=4, epochs=2, batch_size=16)


def _sets(corpus, manifest):
    return manifest.select(corpus, "train"), manifest.select(corpus, "validation"), manifest.select(corpus, "test")


def test_normalize_algorithm() -> None:
    assert normalize_algorithm("RF") == "rf"
    assert normalize_algorithm("random-forest") == "rf"
    assert normalize_algorithm("gradient_boosting") == "gb"
    assert normalize_algorithm(" GIN ") == "gin"
    with pytest.raises(ModelError):
        normalize_algorithm("xgboost")


def test_forest_detector_predicts_binary_names(small_corpus, small_manifest) -> None:
    train, validation, test = _sets(small_corpus, small_manifest)
    outcome = train_model("rf", "graph23", train, validation, "binary", "all", seed=0, tree_config=TreeConfig(n_trees=5))
    model = outcome.model

    assert isinstance(model.estimator, TreeEnsembleModel)
    assert model.classes == BINARY_CLASSES
    assert model.model_id == "rf:graph23"
    assert model.estimator.feature_scheme == "graph23"
    assert set(model.predict(test)) <= set(BINARY_CLASSES)
    assert model.predict_scores(test).shape == (len(test), 2)
    assert outcome.log is None and outcome.search_rows == []


def test_tree_config_kind_follows_the_algorithm(small_corpus, small_manifest) -> None:
    train, validation, _ = _sets(small_corpus, small_manifest)
    config = TreeConfig(kind="random_forest", n_trees=2, max_depth=2)
    outcome = train_model("gb", "graph23", train, validation, "binary", "all", seed=0, tree_config=config)
    assert outcome.model.estimator.kind == "gradient_boosting"


def test_multiclass_obfuscated_only_trains_on_ten_classes(small_corpus, small_manifest) -> None:
    train, validation, test = _sets(small_corpus, small_manifest)
    outcome = train_model(
        "gb", "tfidf128", train, validation, "multiclass", "obfuscated_only", seed=1,
        tree_config=TreeConfig(n_trees=3, max_depth=3),
    )
    model = outcome.model
    assert len(model.classes) == 10
    assert "None" not in model.predict(test)
    report = evaluate(model, test, "multiclass", "obfuscated_only")
    assert report.n_samples == sum(1 for s in test if s.obfuscation.is_obfuscated)


def test_schemes_must_match_the_estimator_family(small_corpus, small_manifest) -> None:
    train, validation, _ = _sets(small_corpus, small_manifest)
    with pytest.raises(ModelError):
        train_model("rf", "asm_sem", train, validation, "binary", "all", seed=0)
    with pytest.raises(ModelError):
        train_model("gin", "graph23", train, validation, "binary", "all", seed=0, gnn_config=TINY_GNN)


def test_tree_tuning_records_the_grid(small_corpus, small_manifest) -> None:
    train, validation, _ = _sets(small_corpus, small_manifest)
    outcome = train_model(
        "rf", "graph23", train, validation, "binary", "all", seed=0,
        tune=True, tree_grid={"n_trees": [2, 4], "max_depth": [3]},
    )
    assert [row["n_trees"] for row in outcome.search_rows] == [2, 4]
    assert outcome.model.estimator.config.n_trees in (2, 4)


def test_gnn_detector_trains_and_logs(small_corpus, small_manifest) -> None:
    train, validation, test = _sets(small_corpus, small_manifest)
    outcome = train_model("sage", "mclass27", train, validation, "binary", "all", seed=0, gnn_config=TINY_GNN)

    assert isinstance(outcome.model.estimator, GnnModel)
    assert outcome.model.estimator.config.architecture == "sage"
    assert len(outcome.log.rows) == 2
    assert outcome.model.predict_scores(test).shape == (len(test), 2)


@pytest.mark.parametrize("algorithm, scheme", [("rf", "graph23"), ("gin", "pcode_sem")])
def test_saved_detector_predicts_identically(tmp_path: Path, small_corpus, small_manifest, algorithm, scheme) -> None:
    train, validation, test = _sets(small_corpus, small_manifest)
    outcome = train_model(
        algorithm, scheme, train, validation, "binary", "all", seed=2,
        tree_config=TreeConfig(n_trees=3), gnn_config=TINY_GNN,
    )
    path = tmp_path / "model.json"
    outcome.model.save(path)
    restored = TrainedModel.load(path)

    assert json.loads(path.read_text(encoding="utf-8"))["format"] == "obfugraph.model"
    assert restored.algorithm == algorithm
    assert np.array_equal(restored.predict_scores(test), outcome.model.predict_scores(test))


def test_model_file_errors(tmp_path: Path) -> None:
    with pytest.raises(ModelError):
        TrainedModel.load(tmp_path / "missing.json")
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else", "version": 1}), encoding="utf-8")
    with pytest.raises(ModelError):
        TrainedModel.load(path)


def test_empty_training_set_is_an_error(small_corpus) -> None:
    bases = [s for s in small_corpus if not s.obfuscation.is_obfuscated]
    with pytest.raises(ModelError):
        train_model("rf", "graph23", bases, bases, "multiclass", "obfuscated_only", seed=0)
