"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations

from typing import Sequence


class ObfugraphError(Exception):
    """Base class for every error raised on purpose by this package."""


class CorpusParseError(ObfugraphError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CfgValidationError(ObfugraphError):
    def __init__(self, violations: Sequence[str], line_no: int | None = None) -> None:
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + "; ".join(violations))
        self.violations = list(violations)
        self.line_no = line_no


class ConfigError(ObfugraphError):
    pass


class DatasetError(ObfugraphError):
    pass


class FeatureError(ObfugraphError):
    pass


class ModelError(ObfugraphError):
    pass


class TrainingFault(ObfugraphError):
    def __init__(self, epoch: int, batch: int, message: str) -> None:
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


class EvaluationError(ObfugraphError):
    pass
