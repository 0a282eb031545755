"""Metrics, task definitions and evaluation reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from obfugraph.cfg_model import OBFUSCATION_CLASSES, FunctionSample, Obfuscation
from obfugraph.errors import EvaluationError

logger = logging.getLogger(__name__)

TASKS = ("binary", "multiclass")
MODES = ("all", "obfuscated_only")
NEGATIVE, POSITIVE = 0, 1
BINARY_CLASSES: Tuple[str, ...] = ("unobfuscated", "obfuscated")
# An opaque predicate is an arithmetic encoding plus one fake branch.
DEFAULT_EQUIVALENCES: Tuple[Tuple[str, str], ...] = (
    (Obfuscation.OPAQUE_PREDICATES.value, Obfuscation.ENCODE_ARITHMETIC.value),
)


def _check_pair(predictions: Sequence[Any], truth: Sequence[Any]) -> None:
    if len(predictions) != len(truth):
        raise EvaluationError(f"length mismatch: {len(predictions)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise EvaluationError("cannot score an empty prediction set")


def per_class_recall(
    predictions: Sequence[Hashable],
    truth: Sequence[Hashable],
    classes: Sequence[Hashable],
) -> List[Optional[float]]:
    """Recall per class; ``None`` for classes without support in ``truth``."""
    _check_pair(predictions, truth)
    pred = np.asarray(predictions, dtype=object)
    true = np.asarray(truth, dtype=object)
    recalls: List[Optional[float]] = []
    for cls in classes:
        support = true == cls
        n_support = int(support.sum())
        recalls.append(None if n_support == 0 else float((pred[support] == cls).sum()) / n_support)
    return recalls


def balanced_accuracy(predictions: Sequence[Hashable], truth: Sequence[Hashable]) -> float:
    """Mean recall over the classes present in ``truth``."""
    _check_pair(predictions, truth)
    classes = sorted(set(truth), key=repr)
    recalls = per_class_recall(predictions, truth, classes)
    return float(np.mean([recall for recall in recalls if recall is not None]))


def confusion_matrix(
    predictions: Sequence[Hashable],
    truth: Sequence[Hashable],
    classes: Sequence[Hashable],
) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    _check_pair(predictions, truth)
    index = {cls: idx for idx, cls in enumerate(classes)}
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for predicted, actual in zip(predictions, truth):
        if actual not in index or predicted not in index:
            raise EvaluationError(f"label outside the class list: truth={actual!r} prediction={predicted!r}")
        matrix[index[actual], index[predicted]] += 1
    return matrix


def balanced_class_weights(targets: Sequence[int], n_classes: int) -> np.ndarray:
    """Inverse class frequency, scaled so the per-sample mean weight is 1; absent classes get 0."""
    y = np.asarray(targets, dtype=np.int64)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(n_classes, dtype=np.float64)
    weights[present] = len(y) / (present.sum() * counts[present])
    return weights


def to_binary_task(labels: Iterable[Obfuscation | str]) -> List[int]:
    return [NEGATIVE if Obfuscation(label) is Obfuscation.NONE else POSITIVE for label in labels]


def task_classes(task: str, mode: str = "obfuscated_only") -> Tuple[str, ...]:
    if task == "binary":
        return BINARY_CLASSES
    if task != "multiclass":
        raise EvaluationError(f"unknown task {task!r}")
    if mode == "obfuscated_only":
        return tuple(label.value for label in OBFUSCATION_CLASSES)
    if mode == "all":
        return tuple(label.value for label in Obfuscation)
    raise EvaluationError(f"unknown mode {mode!r}")


def is_eligible(sample: FunctionSample, task: str, mode: str) -> bool:
    return task == "binary" or mode == "all" or sample.obfuscation.is_obfuscated


def target_name(sample: FunctionSample, task: str) -> str:
    if task == "binary":
        return BINARY_CLASSES[to_binary_task([sample.label])[0]]
    return sample.label.value


def eligible_samples(samples: Sequence[FunctionSample], task: str, mode: str) -> List[FunctionSample]:
    return [sample for sample in samples if is_eligible(sample, task, mode)]


def apply_equivalences(
    predictions: Sequence[str],
    truth: Sequence[str],
    pairs: Iterable[Tuple[str, str]],
) -> List[str]:
    """Count a prediction as correct when (truth, prediction) is an accepted pair."""
    accepted = set(pairs)
    return [actual if (actual, predicted) in accepted else predicted for predicted, actual in zip(predictions, truth)]


class Predictor(Protocol):
    model_id: str
    feature_scheme: str
    task: str

    def predict(self, samples: Sequence[FunctionSample]) -> List[str]: ...


@dataclass
class EvalReport:
    task: str
    mode: str
    dataset_id: str
    model_id: str
    feature_scheme: str
    classes: Tuple[str, ...]
    balanced_accuracy: float
    per_class_recall: List[Optional[float]]
    confusion: np.ndarray
    n_samples: int
    lenient: bool = False
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "mode": self.mode,
            "dataset": self.dataset_id,
            "model": self.model_id,
            "features": self.feature_scheme,
            "classes": list(self.classes),
            "balanced_accuracy": self.balanced_accuracy,
            "per_class_recall": dict(zip(self.classes, self.per_class_recall)),
            "confusion_matrix": self.confusion.tolist(),
            "n_samples": self.n_samples,
            "lenient": self.lenient,
            "notes": list(self.notes),
        }


def _binary_from_names(names: Sequence[str]) -> List[str]:
    if all(name in BINARY_CLASSES for name in names):
        return list(names)
    return [BINARY_CLASSES[code] for code in to_binary_task(names)]


def evaluate(
    model: Predictor,
    samples: Sequence[FunctionSample],
    task: str,
    mode: str = "obfuscated_only",
    dataset_id: str = "",
    equivalences: Optional[Iterable[Tuple[str, str]]] = None,
) -> EvalReport:
    """Score ``model`` on the samples eligible for (task, mode)."""
    classes = task_classes(task, mode)
    eligible = eligible_samples(samples, task, mode)
    if not eligible:
        raise EvaluationError(f"no samples eligible for task={task} mode={mode}")
    if task == "multiclass" and model.task == "binary":
        raise EvaluationError("a binary model cannot be scored on the multi-class task")
    predictions = list(model.predict(eligible))
    if task == "binary":
        predictions = _binary_from_names(predictions)
    truth = [target_name(sample, task) for sample in eligible]
    notes = ["classes without support are excluded from the balanced accuracy"]
    lenient = False
    if equivalences is not None and task == "multiclass":
        predictions = apply_equivalences(predictions, truth, equivalences)
        lenient = True
        notes.append("lenient scoring: " + ", ".join(f"{a}->{b}" for a, b in equivalences))
    if mode == "obfuscated_only" and task == "multiclass":
        # Predicting "None" on an obfuscated sample is a miss, not a new column.
        predictions = [pred if pred in classes else "__other__" for pred in predictions]
        scored_classes: Sequence[str] = classes + ("__other__",)
    else:
        scored_classes = classes
    recalls = per_class_recall(predictions, truth, classes)
    confusion = confusion_matrix(predictions, truth, scored_classes)[: len(classes)]
    present = [recall for recall in recalls if recall is not None]
    report = EvalReport(
        task=task,
        mode=mode,
        dataset_id=dataset_id,
        model_id=model.model_id,
        feature_scheme=model.feature_scheme,
        classes=classes,
        balanced_accuracy=float(np.mean(present)),
        per_class_recall=recalls,
        confusion=confusion,
        n_samples=len(eligible),
        lenient=lenient,
        notes=notes,
    )
    logger.info("%s %s/%s: balanced accuracy %.4f", model.model_id, task, mode, report.balanced_accuracy)
    return report
