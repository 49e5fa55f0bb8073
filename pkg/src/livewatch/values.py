"""Self-describing values that flow through queries, the wire, and stream files.

A value is plain Python data: None, bool, int, float, str, a list of values,
or a dict with string keys (a "record"). Ints are restricted to the signed
64-bit range so every value survives serialization unchanged.
"""

from __future__ import annotations

import math
from typing import Any, Union

Value = Union[None, bool, int, float, str, list, dict]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_KINDS = {
    type(None): "null",
    bool: "bool",
    int: "int",
    float: "float",
    str: "str",
    list: "list",
    dict: "record",
}


class InvalidValue(ValueError):
    """Raised when an object is not representable as a stream value."""


def kind_of(value: Any) -> str:
    """Return the value kind name ("null", "bool", "int", ...).

    bool must be checked before int: Python bools are ints.
    """
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "str"
    if isinstance(value, list):
        return "list"
    if isinstance(value, dict):
        return "record"
    raise InvalidValue(f"not a value: {type(value).__name__}")


def ensure_value(value: Any, path: str = "value") -> Value:
    """Validate `value` recursively and return it.

    Raises InvalidValue for unsupported types, out-of-range ints, or record
    keys that are empty or not strings.
    """
    k = kind_of(value)
    if k == "int" and not INT64_MIN <= value <= INT64_MAX:
        raise InvalidValue(f"{path}: int out of 64-bit range: {value}")
    elif k == "list":
        for i, item in enumerate(value):
            ensure_value(item, f"{path}[{i}]")
    elif k == "record":
        for key, item in value.items():
            if not isinstance(key, str) or not key:
                raise InvalidValue(f"{path}: record keys must be non-empty strings")
            ensure_value(item, f"{path}.{key}")
    return value


def is_number(value: Any) -> bool:
    """True for int and float values, excluding bool."""
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def values_equal(a: Value, b: Value) -> bool:
    """Structural equality that distinguishes kinds and treats NaN == NaN.

    Plain `==` would call 1 equal to 1.0 and True equal to 1; round-trip
    checks need the stricter kind-aware comparison.
    """
    ka, kb = kind_of(a), kind_of(b)
    if ka != kb:
        return False
    if ka == "float":
        if math.isnan(a) and math.isnan(b):
            return True
        return a == b
    if ka == "list":
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if ka == "record":
        if list(a.keys()) != list(b.keys()):
            return False
        return all(values_equal(a[k], b[k]) for k in a)
    return a == b
