"""Shared helpers for filesystem, hashing and JSON tasks."""

from __future__ import annotations

import json
from hashlib import sha1
from pathlib import Path
from typing import Any, Iterable

import numpy as np


def write_text(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content, encoding="utf-8")


def write_bytes(path: Path, content: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(content)


def stable_json(data: Any, indent: int | None = 2) -> str:
    """Serialize with sorted keys so equal payloads give equal bytes."""
    return json.dumps(data, indent=indent, sort_keys=True, default=_json_default)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def file_digest(paths: Iterable[Path]) -> str:
    digest = sha1()
    for path in paths:
        digest.update(str(path.name).encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def payload_digest(payload: Any) -> str:
    digest = sha1()
    digest.update(stable_json(payload, indent=None).encode("utf-8"))
    return digest.hexdigest()


def ensure_unique_paths(paths: Iterable[Path]) -> None:
    seen: set[Path] = set()
    for path in paths:
        if path in seen:
            raise ValueError(f"Duplicate output path detected: {path}")
        seen.add(path)


def parse_csv_list(value: str | None) -> list[str]:
    if not value:
        return []
    return [chunk.strip() for chunk in value.split(",") if chunk.strip()]


def derive_seed(*parts: int) -> int:
    """Independent 32-bit seed for one (seed, stream, index, ...) coordinate."""
    return int(np.random.SeedSequence([int(part) for part in parts]).generate_state(1)[0])


def normalize_token(value: str) -> str:
    """CLI spellings (``pcode-sem``, ``per-function``) to internal names."""
    return value.strip().lower().replace("-", "_")
