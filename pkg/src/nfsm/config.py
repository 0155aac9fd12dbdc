"""Strict YAML-backed structured text: every file the package writes or reads as
configuration goes through here so unknown keys are rejected with a line number."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError


class Document:
    """A parsed mapping plus the source line of each key (1-based)."""

    def __init__(self, data: dict, lines: dict[tuple, int], source: str):
        self.data = data
        self.lines = lines
        self.source = source

    def line_of(self, *path) -> int | None:
        return self.lines.get(tuple(path))

    def where(self, *path) -> str:
        line = self.line_of(*path)
        return f"{self.source}:{line}" if line is not None else self.source


def _collect_lines(node, prefix: tuple, out: dict) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            out[path] = key_node.start_mark.line + 1
            _collect_lines(value_node, path, out)


def parse(text: str, source: str = "<string>") -> Document:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: malformed structured text: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines: dict[tuple, int] = {}
    if node is not None:
        _collect_lines(node, (), lines)
    return Document(data, lines, source)


def read(path: str | Path) -> Document:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from None
    return parse(text, str(path))


def dump(data: Mapping[str, Any]) -> str:
    """Deterministic rendering; nested numeric lists stay on one line per row."""
    return yaml.safe_dump(dict(data), sort_keys=False, default_flow_style=None, width=4096)


def check_keys(doc: Document, section: Mapping, allowed, path: tuple = ()) -> None:
    allowed = set(allowed)
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{doc.where(*path, key)}: unknown key '{'.'.join(map(str, path + (key,)))}'")


def build_dataclass(cls, doc: Document, section: Mapping | None, path: tuple = ()):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys and bad types."""
    section = section or {}
    if not isinstance(section, Mapping):
        raise ConfigError(f"{doc.where(*path)}: '{'.'.join(path)}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    check_keys(doc, section, fields, path)
    kwargs = {}
    for key, value in section.items():
        default = fields[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{doc.where(*path, key)}: '{key}' must be true or false")
        if isinstance(default, int) and not isinstance(default, bool) and (
            isinstance(value, bool) or not isinstance(value, int)
        ):
            raise ConfigError(f"{doc.where(*path, key)}: '{key}' must be an integer")
        if isinstance(default, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{doc.where(*path, key)}: '{key}' must be a number")
        kwargs[key] = float(value) if isinstance(default, float) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{doc.where(*path)}: {exc}") from None
