"""Expression evaluation for pipeline stages.

Expressions are compiled once into nested closures taking (current, record):
`current` is the stage binder's value, `record` the event scope for bare
identifiers. Arithmetic is numeric-only; "/" always yields a Float; "%" is
Int-only. Comparisons between Int and Float are numeric, any other kind
mismatch makes "==" False and an ordering operator an error.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Optional

from .dsl import (
    Binary,
    Call,
    Expr,
    FieldAccess,
    Ident,
    IndexAccess,
    Lit,
    Unary,
)
from .values import INT64_MAX, INT64_MIN, Value, is_number, kind_of


class EvalError(Exception):
    """Raised when an expression cannot produce a value for an input."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


CompiledExpr = Callable[[Value, Mapping[str, Value]], Value]


def _deep_eq(a: Value, b: Value) -> bool:
    if is_number(a) and is_number(b):
        return a == b
    ka, kb = kind_of(a), kind_of(b)
    if ka != kb:
        return False
    if ka == "list":
        return len(a) == len(b) and all(_deep_eq(x, y) for x, y in zip(a, b))
    if ka == "record":
        return set(a.keys()) == set(b.keys()) and all(
            _deep_eq(v, b[k]) for k, v in a.items()
        )
    return a == b


def _num2(op: str, a: Value, b: Value) -> None:
    if not (is_number(a) and is_number(b)):
        raise EvalError(f"'{op}' not defined for {kind_of(a)} and {kind_of(b)}")


def _add(a, b):
    _num2("+", a, b)
    return a + b


def _sub(a, b):
    _num2("-", a, b)
    return a - b


def _mul(a, b):
    _num2("*", a, b)
    return a * b


def _div(a, b):
    _num2("/", a, b)
    if b == 0:
        raise EvalError("division by zero")
    return a / b


def _mod(a, b):
    if kind_of(a) != "int" or kind_of(b) != "int":
        raise EvalError(f"'%' not defined for {kind_of(a)} and {kind_of(b)}")
    if b == 0:
        raise EvalError("modulo by zero")
    return a % b


def _lt(a, b):
    _num2("<", a, b)
    return a < b


def _le(a, b):
    _num2("<=", a, b)
    return a <= b


def _gt(a, b):
    _num2(">", a, b)
    return a > b


def _ge(a, b):
    _num2(">=", a, b)
    return a >= b


_ARITH = {
    "+": _add,
    "-": _sub,
    "*": _mul,
    "/": _div,
    "%": _mod,
    "<": _lt,
    "<=": _le,
    ">": _gt,
    ">=": _ge,
}


def _b_abs(x):
    if not is_number(x):
        raise EvalError(f"abs: expected a number, got {kind_of(x)}")
    return abs(x)


def _b_sqrt(x):
    if not is_number(x):
        raise EvalError(f"sqrt: expected a number, got {kind_of(x)}")
    if x < 0:
        raise EvalError("sqrt of a negative number")
    return math.sqrt(x)


def _b_exp(x):
    if not is_number(x):
        raise EvalError(f"exp: expected a number, got {kind_of(x)}")
    try:
        return math.exp(x)
    except OverflowError:
        raise EvalError("exp overflow") from None


def _b_ln(x):
    if not is_number(x):
        raise EvalError(f"ln: expected a number, got {kind_of(x)}")
    if x <= 0:
        raise EvalError("ln of a non-positive number")
    return math.log(x)


def _b_round(x):
    if not is_number(x):
        raise EvalError(f"round: expected a number, got {kind_of(x)}")
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        raise EvalError("round of a non-finite number")
    r = round(x)
    if not INT64_MIN <= r <= INT64_MAX:
        raise EvalError("round result out of range")
    return int(r)


def _b_len(x):
    k = kind_of(x)
    if k not in ("str", "list"):
        raise EvalError(f"len: expected str or list, got {k}")
    return len(x)


def _b_min(a, b):
    _num2("min", a, b)
    return b if b < a else a


def _b_max(a, b):
    _num2("max", a, b)
    return b if b > a else a


def _b_clamp(x, lo, hi):
    if not (is_number(x) and is_number(lo) and is_number(hi)):
        raise EvalError("clamp: expected numbers")
    if lo > hi:
        raise EvalError("clamp: lower bound above upper bound")
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


_BUILTINS = {
    "abs": _b_abs,
    "sqrt": _b_sqrt,
    "exp": _b_exp,
    "ln": _b_ln,
    "round": _b_round,
    "len": _b_len,
    "min": _b_min,
    "max": _b_max,
    "clamp": _b_clamp,
}


def compile_expr(expr: Expr, binder: Optional[str] = None) -> CompiledExpr:
    """Compile an expression into a closure of (current, record) -> Value."""
    if isinstance(expr, Lit):
        v = expr.value
        return lambda cur, rec: v
    if isinstance(expr, Ident):
        name = expr.name
        if name == binder:
            return lambda cur, rec: cur

        def ident_fn(cur, rec, _name=name):
            try:
                return rec[_name]
            except (KeyError, TypeError):
                raise EvalError(f"unknown identifier {_name!r}") from None

        return ident_fn
    if isinstance(expr, FieldAccess):
        obj_fn = compile_expr(expr.obj, binder)
        field = expr.name

        def field_fn(cur, rec):
            obj = obj_fn(cur, rec)
            if kind_of(obj) != "record":
                raise EvalError(f"field access on {kind_of(obj)}")
            try:
                return obj[field]
            except KeyError:
                raise EvalError(f"no field {field!r}") from None

        return field_fn
    if isinstance(expr, IndexAccess):
        obj_fn = compile_expr(expr.obj, binder)
        idx_fn = compile_expr(expr.index, binder)

        def index_fn(cur, rec):
            obj = obj_fn(cur, rec)
            if kind_of(obj) != "list":
                raise EvalError(f"indexing into {kind_of(obj)}")
            idx = idx_fn(cur, rec)
            if kind_of(idx) != "int":
                raise EvalError(f"list index must be Int, got {kind_of(idx)}")
            if not 0 <= idx < len(obj):
                raise EvalError(f"index {idx} out of range (len {len(obj)})")
            return obj[idx]

        return index_fn
    if isinstance(expr, Unary):
        operand_fn = compile_expr(expr.operand, binder)
        if expr.op == "-":

            def neg_fn(cur, rec):
                v = operand_fn(cur, rec)
                if not is_number(v):
                    raise EvalError(f"unary '-' on {kind_of(v)}")
                return -v

            return neg_fn

        def not_fn(cur, rec):
            v = operand_fn(cur, rec)
            if not isinstance(v, bool):
                raise EvalError(f"'!' on {kind_of(v)}")
            return not v

        return not_fn
    if isinstance(expr, Binary):
        left_fn = compile_expr(expr.left, binder)
        right_fn = compile_expr(expr.right, binder)
        op = expr.op
        if op == "&&" or op == "||":
            stop = op == "||"  # short-circuit value

            def logic_fn(cur, rec):
                l = left_fn(cur, rec)
                if not isinstance(l, bool):
                    raise EvalError(f"'{op}' requires Bool operands, got {kind_of(l)}")
                if l is stop:
                    return stop
                r = right_fn(cur, rec)
                if not isinstance(r, bool):
                    raise EvalError(f"'{op}' requires Bool operands, got {kind_of(r)}")
                return r

            return logic_fn
        if op == "==":
            return lambda cur, rec: _deep_eq(left_fn(cur, rec), right_fn(cur, rec))
        if op == "!=":
            return lambda cur, rec: not _deep_eq(left_fn(cur, rec), right_fn(cur, rec))
        fn = _ARITH[op]
        return lambda cur, rec: fn(left_fn(cur, rec), right_fn(cur, rec))
    # Call
    impl = _BUILTINS[expr.name]
    arg_fns = tuple(compile_expr(a, binder) for a in expr.args)
    if len(arg_fns) == 1:
        a0 = arg_fns[0]
        return lambda cur, rec: impl(a0(cur, rec))
    if len(arg_fns) == 2:
        a0, a1 = arg_fns
        return lambda cur, rec: impl(a0(cur, rec), a1(cur, rec))
    a0, a1, a2 = arg_fns
    return lambda cur, rec: impl(a0(cur, rec), a1(cur, rec), a2(cur, rec))


def evaluate(expr: Expr, scope: Mapping[str, Value]) -> Value:
    """Evaluate an expression with bare identifiers resolved from `scope`."""
    return compile_expr(expr, binder=None)(None, scope)
