"""Typed structured-text configuration.

The dialect is deliberately small: ``[section]`` headers, ``key = value``
lines, ``#`` comments, UTF-8.  Every document is validated against a schema
that fixes the sections, the keys, their scalar types, and their defaults;
unknown sections or keys are rejected so typos cannot silently change an
experiment.  Rendering is canonical (schema order, shortest round-trip float
format), which makes parse -> render -> parse the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["Field", "Schema", "ConfigError", "parse_config", "render_config"]


class ConfigError(ValueError):
    """Malformed document or schema violation."""


_REQUIRED = object()


@dataclass(frozen=True)
class Field:
    name: str
    kind: str                 # "int" | "float" | "str" | "bool"
    default: object = _REQUIRED

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


class Schema:
    def __init__(self, sections: dict[str, list[Field]]):
        self.sections = sections

    def field(self, section: str, key: str) -> Field:
        try:
            fields = self.sections[section]
        except KeyError:
            raise ConfigError(f"unknown section [{section}]") from None
        for f in fields:
            if f.name == key:
                return f
        raise ConfigError(f"unknown key {key!r} in section [{section}]")


def _parse_scalar(raw: str, field: Field, where: str):
    raw = raw.strip()
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            return float(raw)
        if field.kind == "bool":
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(raw)
        if field.kind == "str":
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {field.kind}") from None
    raise ConfigError(f"{where}: unsupported kind {field.kind!r}")


def parse_config(text: str, schema: Schema) -> dict[str, dict[str, object]]:
    """Parse and validate; missing optional keys take their defaults."""
    values: dict[str, dict[str, object]] = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in schema.sections:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            if section in values:
                raise ConfigError(f"line {lineno}: duplicate section [{section}]")
            values[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        field = schema.field(section, key)
        if key in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[section][key] = _parse_scalar(raw_value, field, f"line {lineno}")

    for name, fields in schema.sections.items():
        section_values = values.setdefault(name, {})
        for f in fields:
            if f.name not in section_values:
                if f.required:
                    raise ConfigError(f"missing required key {f.name!r} in [{name}]")
                section_values[f.name] = f.default
    return values


def _render_scalar(value, kind: str) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


def render_config(values: dict[str, dict[str, object]], schema: Schema) -> str:
    """Canonical text: sections and keys in schema order."""
    lines = []
    for name, fields in schema.sections.items():
        lines.append(f"[{name}]")
        section_values = values.get(name, {})
        for f in fields:
            value = section_values.get(f.name, f.default)
            if value is _REQUIRED:
                raise ConfigError(f"missing required key {f.name!r} in [{name}]")
            lines.append(f"{f.name} = {_render_scalar(value, f.kind)}")
        lines.append("")
    return "\n".join(lines)
