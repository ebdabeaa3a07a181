"""Line-delimited JSON records with a one-line schema header, and flat
``key = value`` config files."""
from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from .nn import ConfigurationError


class FormatError(ValueError):
    pass


def write_jsonl(path, schema: str, records: Iterable[dict], meta: Optional[dict] = None) -> int:
    """Write header + records; returns the number of records. Floats go
    through ``repr`` so they read back bit-exact."""
    header = {"schema": schema}
    if meta:
        header["meta"] = meta
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, sort_keys=True, allow_nan=False) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, allow_nan=False, separators=(",", ":")) + "\n")
            n += 1
    return n


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as f:
        line = f.readline()
    return _parse_header(line, path)


def _parse_header(line: str, path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: bad schema header: {e}") from None
    if not isinstance(header, dict) or "schema" not in header:
        raise FormatError(f"{path}: first line is not a schema header")
    return header


def read_jsonl(path, schema: Optional[str] = None) -> tuple[dict, Iterator[dict]]:
    """Returns ``(header, records)``; ``schema`` (if given) must match."""
    f = open(path, encoding="utf-8")
    header = _parse_header(f.readline(), path)
    if schema is not None and header["schema"] != schema:
        f.close()
        raise FormatError(f"{path}: expected schema {schema!r}, found {header['schema']!r}")

    def gen():
        with f:
            for lineno, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    raise FormatError(f"{path}:{lineno}: {e}") from None
    return header, gen()


# ---------------------------------------------------------------------------
# flat config files

def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigurationError(f"{path}:{lineno}: empty key")
        out[k] = v
    return out


def write_config(path, values: dict[str, Any]) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _convert(text: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        items = [s.strip() for s in text.split(",") if s.strip()]
        inner = args[0] if args else str
        return tuple(_convert(s, inner) for s in items)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _convert(text, args[0])
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def config_from_mapping(cls, values: dict[str, str], strict: bool = True):
    """Build dataclass ``cls`` from string values, converting by field type.
    Unknown keys raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown and strict:
        raise ConfigurationError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if k not in names:
            continue
        try:
            kwargs[k] = _convert(v, hints[k])
        except ValueError as e:
            raise ConfigurationError(f"bad value for {k}: {v!r} ({e})") from None
    return cls(**kwargs)


def config_to_mapping(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.init}
