"""Dataclass <-> JSON document codec.

Encoding rules: enums by value, frozensets as sorted lists, tuples as lists,
mappings with str/enum keys as objects, mappings with dataclass keys as a
list of ``[key, value]`` pairs. Output of :func:`dumps` is canonical
(sorted keys, fixed indent) so documents are byte-stable.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from enum import Enum
from functools import lru_cache
from typing import Any, TypeVar

T = TypeVar("T")


class DecodeError(ValueError):
    """Raised when a document does not match the expected shape."""


@lru_cache(maxsize=None)
def _hints(cls: type) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def to_doc(obj: Any) -> Any:
    if obj is None or isinstance(obj, (bool, int, float, str)):
        if isinstance(obj, Enum):
            return obj.value
        return obj
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_doc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (frozenset, set)):
        return sorted((to_doc(v) for v in obj), key=_sort_key)
    if isinstance(obj, (list, tuple)):
        return [to_doc(v) for v in obj]
    if isinstance(obj, dict):
        if all(isinstance(k, (str, Enum)) for k in obj):
            return {(k.value if isinstance(k, Enum) else k): to_doc(v) for k, v in obj.items()}
        pairs = [[to_doc(k), to_doc(v)] for k, v in obj.items()]
        return sorted(pairs, key=lambda p: _sort_key(p[0]))
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _sort_key(value: Any) -> str:
    return json.dumps(value, sort_keys=True)


def from_doc(tp: Any, doc: Any) -> Any:
    """Decode ``doc`` into an instance of type ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if tp is Any:
        return doc
    if origin in (typing.Union, types.UnionType):
        if doc is None and type(None) in args:
            return None
        last_err: Exception | None = None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return from_doc(arg, doc)
            except (DecodeError, TypeError, ValueError, KeyError) as exc:
                last_err = exc
        raise DecodeError(f"no union member of {tp} matches {doc!r}: {last_err}")
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(doc)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
    if tp is float:
        if isinstance(doc, bool) or not isinstance(doc, (int, float)):
            raise DecodeError(f"expected number, got {doc!r}")
        return float(doc)
    if tp is int:
        if isinstance(doc, bool) or not isinstance(doc, int):
            raise DecodeError(f"expected integer, got {doc!r}")
        return doc
    if tp in (str, bool):
        if not isinstance(doc, tp):
            raise DecodeError(f"expected {tp.__name__}, got {doc!r}")
        return doc
    if dataclasses.is_dataclass(tp):
        if not isinstance(doc, dict):
            raise DecodeError(f"expected object for {tp.__name__}, got {type(doc).__name__}")
        hints = _hints(tp)
        kwargs = {}
        for f in dataclasses.fields(tp):
            if f.name in doc:
                kwargs[f.name] = from_doc(hints[f.name], doc[f.name])
            elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise DecodeError(f"{tp.__name__}: missing field {f.name!r}")
        return tp(**kwargs)
    if origin in (list, tuple, frozenset, set):
        if not isinstance(doc, list):
            raise DecodeError(f"expected list, got {type(doc).__name__}")
        if origin is tuple and args and not (len(args) == 2 and args[1] is Ellipsis):
            if len(args) != len(doc):
                raise DecodeError(f"expected {len(args)}-tuple, got {len(doc)} items")
            return tuple(from_doc(t, v) for t, v in zip(args, doc))
        inner = args[0] if args else Any
        items = [from_doc(inner, v) for v in doc]
        if origin is list:
            return items
        if origin is tuple:
            return tuple(items)
        return frozenset(items)
    if origin is dict or tp is dict:
        key_t, val_t = args if args else (Any, Any)
        if isinstance(doc, dict):
            return {from_doc(key_t, k): from_doc(val_t, v) for k, v in doc.items()}
        if isinstance(doc, list):
            return {from_doc(key_t, k): from_doc(val_t, v) for k, v in doc}
        raise DecodeError(f"expected mapping, got {type(doc).__name__}")
    raise TypeError(f"unsupported type {tp!r}")


def dumps(obj: Any) -> str:
    return json.dumps(to_doc(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def loads(tp: type[T], text: str) -> T:
    return from_doc(tp, json.loads(text))
