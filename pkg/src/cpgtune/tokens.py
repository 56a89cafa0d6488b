"""Shared code tokenization and the stable bucket hash.

Both the sequence vocabulary and the graph vectorizer split text the same
way: lowercased, identifiers/numbers kept whole, every punctuation
character its own token. Bucketing uses FNV-1a 64-bit, which is portable
and bit-stable across platforms.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^\sa-z0-9_]")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def split_tokens(text: str) -> list[str]:
    """Lowercased word/punctuation tokens in source order."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h
