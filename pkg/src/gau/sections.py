"""Sectioned ``key = value`` text <-> dataclass instances."""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _resolve_type(cls, name):
    hints = typing.get_type_hints(cls)
    tp = hints[name]
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        tp = args[0]
    return tp


def _parse_value(raw: str, tp):
    raw = raw.strip()
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def section_from_mapping(cls, mapping: dict[str, str], section: str, problems: list[str]):
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in known:
            problems.append(f"[{section}] unknown key {key!r}")
            continue
        try:
            kwargs[key] = _parse_value(raw, _resolve_type(cls, key))
        except ValueError as exc:
            problems.append(f"[{section}] {key}: {exc}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"[{section}] {exc}")
        return None


def dump_sections(sections: dict[str, object]) -> str:
    out = io.StringIO()
    for name, obj in sections.items():
        out.write(f"[{name}]\n")
        for f in dataclasses.fields(obj):
            out.write(f"{f.name} = {_format_value(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def parse_sections(text: str, classes: dict[str, type]) -> dict[str, object]:
    """Inverse of :func:`dump_sections` for the given section classes."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(text)
    problems: list[str] = []
    out = {}
    for name, cls in classes.items():
        mapping = dict(parser[name]) if parser.has_section(name) else {}
        out[name] = section_from_mapping(cls, mapping, name, problems)
    if problems:
        raise ConfigError(problems)
    return out
