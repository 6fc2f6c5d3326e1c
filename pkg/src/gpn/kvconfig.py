"""``key = value`` text files mapped onto flat dataclasses."""

from __future__ import annotations

import dataclasses
import os
import typing
from typing import Any, Mapping, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(raw: str, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if tp in (int, float, str):
            return tp(raw)
        if origin is tuple:
            args = typing.get_args(tp)
            items = [s.strip() for s in raw.strip("()[] ").split(",") if s.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(args[0](s) for s in items)
            if len(items) != len(args):
                raise ValueError
            return tuple(a(s) for a, s in zip(args, items))
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {tp}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_mapping(cls: type[T], values: Mapping[str, str], **overrides) -> T:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_dataclass(cls: type[T], path: str | os.PathLike, **overrides) -> T:
    with open(path, encoding="utf-8") as fh:
        return from_mapping(cls, parse_kv(fh.read()), **overrides)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_kv(obj: Any) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))
