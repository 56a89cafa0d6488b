"""Dataset records and JSONL serialization."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


@dataclass
class Sample:
    id: str
    code: str
    target: str


def samples_to_jsonl(samples: Iterable[Sample]) -> str:
    lines = [
        json.dumps({"id": s.id, "code": s.code, "target": s.target})
        for s in samples
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def samples_from_jsonl(text: str) -> list[Sample]:
    samples = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        for key in ("id", "code", "target"):
            if key not in obj or not isinstance(obj[key], str):
                raise ValueError(f"line {i}: missing or non-string {key!r}")
        samples.append(Sample(obj["id"], obj["code"], obj["target"]))
    return samples


def load_jsonl(path: str | Path) -> list[Sample]:
    return samples_from_jsonl(Path(path).read_text(encoding="utf-8"))


def write_text_atomic(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_jsonl(path: str | Path, samples: Iterable[Sample]) -> None:
    write_text_atomic(path, samples_to_jsonl(samples))
