"""Canonical structured-text serialization for dataclass records.

Records become JSON objects with sorted keys and no insignificant whitespace,
so the same value always produces the same bytes and digests of serialized
records are reproducible.  Decoding is strict: unknown keys, missing keys and
wrongly typed values are rejected with :class:`MalformedMessage` naming the
offending path.
"""

from __future__ import annotations

import base64
import binascii
import dataclasses
import enum
import json
import types
import typing
from functools import lru_cache
from typing import Any

from .errors import LocflowError, MalformedMessage


def to_wire(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_wire(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (bytes, bytearray)):
        return base64.b64encode(bytes(obj)).decode("ascii")
    if isinstance(obj, dict):
        return {str(k): to_wire(v) for k, v in obj.items()}
    if isinstance(obj, (set, frozenset)):
        return sorted(to_wire(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [to_wire(v) for v in obj]
    return obj


def dumps(obj: Any) -> bytes:
    return json.dumps(
        to_wire(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def loads(tp: Any, data: bytes) -> Any:
    try:
        raw = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedMessage(exc.start, "invalid UTF-8") from None
    except json.JSONDecodeError as exc:
        raise MalformedMessage(exc.pos, exc.msg) from None
    except RecursionError:
        raise MalformedMessage(0, "nesting too deep") from None
    return from_wire(tp, raw)


@lru_cache(maxsize=None)
def _hints(cls: type) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def from_wire(tp: Any, data: Any, path: str = "$") -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if tp is Any:
        return data
    if origin in (typing.Union, types.UnionType):
        if data is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        if len(inner) != 1:
            raise TypeError(f"unsupported union {tp!r}")
        return from_wire(inner[0], data, path)
    if origin is typing.Literal:
        if data not in args:
            raise MalformedMessage(path, f"expected one of {args!r}")
        return data
    if dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise MalformedMessage(path, f"expected object for {tp.__name__}")
        hints = _hints(tp)
        fields = {f.name: f for f in dataclasses.fields(tp) if f.init}
        unknown = set(data) - set(fields)
        if unknown:
            raise MalformedMessage(f"{path}.{sorted(unknown)[0]}", "unknown field")
        kwargs = {}
        for name, f in fields.items():
            if name not in data:
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                    raise MalformedMessage(f"{path}.{name}", "missing field")
                continue
            kwargs[name] = from_wire(hints[name], data[name], f"{path}.{name}")
        try:
            return tp(**kwargs)
        except MalformedMessage:
            raise
        except (ValueError, TypeError, LocflowError) as exc:
            raise MalformedMessage(path, str(exc)) from None
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(data)
        except ValueError:
            raise MalformedMessage(path, f"bad {tp.__name__} value {data!r}") from None
    if tp is bytes:
        if not isinstance(data, str):
            raise MalformedMessage(path, "expected base64 string")
        try:
            return base64.b64decode(data.encode("ascii"), validate=True)
        except (binascii.Error, UnicodeEncodeError):
            raise MalformedMessage(path, "invalid base64") from None
    if tp is bool:
        if not isinstance(data, bool):
            raise MalformedMessage(path, "expected boolean")
        return data
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise MalformedMessage(path, "expected integer")
        return data
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise MalformedMessage(path, "expected number")
        return float(data)
    if tp is str:
        if not isinstance(data, str):
            raise MalformedMessage(path, "expected string")
        return data
    if origin in (list, tuple, frozenset, set):
        if not isinstance(data, list):
            raise MalformedMessage(path, "expected array")
        if origin is tuple and not (len(args) == 2 and args[1] is Ellipsis):
            if len(data) != len(args):
                raise MalformedMessage(path, f"expected {len(args)} items")
            return tuple(from_wire(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, data)))
        item = args[0]
        items = [from_wire(item, v, f"{path}[{i}]") for i, v in enumerate(data)]
        return origin(items) if origin is not list else items
    if origin is dict:
        if not isinstance(data, dict):
            raise MalformedMessage(path, "expected object")
        kt, vt = args
        return {from_wire(kt, k, path): from_wire(vt, v, f"{path}.{k}") for k, v in data.items()}
    raise TypeError(f"unsupported type {tp!r}")
