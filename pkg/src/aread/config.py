"""Flat ``key = value`` configuration files.

Values are parsed as Python literals when possible (numbers, tuples, lists,
booleans spelled ``true``/``false``), otherwise kept as strings.  ``#`` starts a
comment.
"""

from __future__ import annotations

import ast
import dataclasses
from pathlib import Path
from typing import Any, Mapping


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip("\"'")


def read_flat(path: str | Path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    if v is None:
        return "none"
    return repr(v)


def write_flat(path: str | Path, values: Mapping[str, Any]) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def coerce(cls, values: Mapping[str, Any]):
    """Build dataclass ``cls`` from a mapping, converting lists to tuples.

    Unknown keys raise ``KeyError`` so typos do not pass silently.
    """
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in names:
            raise KeyError(f"unknown {cls.__name__} key {k!r}")
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    return cls(**kwargs)
