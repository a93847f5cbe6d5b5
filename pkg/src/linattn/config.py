"""``key = value`` config files (``#`` starts a comment)."""

from __future__ import annotations

from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def int_list(value: str) -> list[int]:
    return [int(v) for v in value.replace(",", " ").split()]
