"""The pipeline query language: parser, AST, printer, and static analysis.

A query is a sequence of stages joined by "|":

    map(b -> b.loss) | where(x -> x > 0.1) | reduce(avg, x -> x) | window(count=10)

Stage binders name the value flowing into the stage; for the first stage that
value is the event record. Bare identifiers other than the binder resolve
against the event scope, so "map(b -> b.loss + lr)" reads the observable "lr"
directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Iterator, Optional, Set, Tuple, Union

from .values import Value

AGGREGATORS = ("sum", "avg", "min", "max", "count", "last", "hist")

BUILTIN_ARITY = {
    "abs": 1,
    "sqrt": 1,
    "exp": 1,
    "ln": 1,
    "round": 1,
    "len": 1,
    "min": 2,
    "max": 2,
    "clamp": 3,
}


class ParseError(ValueError):
    """Syntax error with 1-based source position."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class ValidationError(ValueError):
    """A syntactically valid query that violates stage placement rules."""


# --- expression AST ---------------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: Value


@dataclass(frozen=True)
class Ident:
    name: str


@dataclass(frozen=True)
class FieldAccess:
    obj: "Expr"
    name: str


@dataclass(frozen=True)
class IndexAccess:
    obj: "Expr"
    index: "Expr"


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "!"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple["Expr", ...]


Expr = Union[Lit, Ident, FieldAccess, IndexAccess, Unary, Binary, Call]


# --- window modes and stages ------------------------------------------------


@dataclass(frozen=True)
class GroupWindow:
    """Emission driven by the host's group-completion flag."""


@dataclass(frozen=True)
class CountWindow:
    n: int


@dataclass(frozen=True)
class TimeWindow:
    seconds: float


WindowMode = Union[GroupWindow, CountWindow, TimeWindow]

GROUP_WINDOW = GroupWindow()


@dataclass(frozen=True)
class MapStage:
    binder: str
    expr: Expr


@dataclass(frozen=True)
class WhereStage:
    binder: str
    expr: Expr


@dataclass(frozen=True)
class ReduceStage:
    aggregator: str
    hist_bins: Optional[int] = None
    binder: Optional[str] = None
    expr: Optional[Expr] = None


@dataclass(frozen=True)
class WindowStage:
    mode: WindowMode


Stage = Union[MapStage, WhereStage, ReduceStage, WindowStage]


@dataclass(frozen=True)
class Pipeline:
    stages: Tuple[Stage, ...]
    referenced_names: FrozenSet[str] = field(default_factory=frozenset)

    @property
    def reduce_stage(self) -> Optional[ReduceStage]:
        for s in self.stages:
            if isinstance(s, ReduceStage):
                return s
        return None

    @property
    def window_mode(self) -> WindowMode:
        for s in self.stages:
            if isinstance(s, WindowStage):
                return s.mode
        return GROUP_WINDOW


# --- tokenizer ---------------------------------------------------------------

_TWO_CHAR = ("->", "==", "!=", "<=", ">=", "&&", "||")
_ONE_CHAR = "()[].,|!<>=+-*/%"
_KEYWORD_LITERALS = {"true": True, "false": False, "null": None}


@dataclass(frozen=True)
class _Token:
    kind: str  # IDENT, INT, FLOAT, STRING, punctuation text, or EOF
    text: str
    value: Value
    line: int
    column: int


def _tokenize(text: str) -> Iterator[_Token]:
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            if c == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1
            continue
        start_line, start_col = line, col
        two = text[i : i + 2]
        if two in _TWO_CHAR:
            yield _Token(two, two, None, start_line, start_col)
            i += 2
            col += 2
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            is_float = False
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                is_float = True
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if is_float and j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    while k < n and text[k].isdigit():
                        k += 1
                    j = k
            tok_text = text[i:j]
            if is_float:
                yield _Token("FLOAT", tok_text, float(tok_text), start_line, start_col)
            else:
                yield _Token("INT", tok_text, int(tok_text), start_line, start_col)
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            name = text[i:j]
            yield _Token("IDENT", name, None, start_line, start_col)
            col += j - i
            i = j
            continue
        if c == '"':
            j = i + 1
            out = []
            while True:
                if j >= n or text[j] == "\n":
                    raise ParseError("unterminated string", start_line, start_col)
                ch = text[j]
                if ch == '"':
                    j += 1
                    break
                if ch == "\\":
                    if j + 1 >= n:
                        raise ParseError("unterminated string", start_line, start_col)
                    esc = text[j + 1]
                    if esc == '"':
                        out.append('"')
                    elif esc == "\\":
                        out.append("\\")
                    elif esc == "n":
                        out.append("\n")
                    else:
                        raise ParseError(
                            f"unsupported escape \\{esc}", line, col + (j - i)
                        )
                    j += 2
                    continue
                out.append(ch)
                j += 1
            yield _Token("STRING", text[i:j], "".join(out), start_line, start_col)
            col += j - i
            i = j
            continue
        if c in _ONE_CHAR:
            yield _Token(c, c, None, start_line, start_col)
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {c!r}", start_line, start_col)
    yield _Token("EOF", "", None, line, col)


# --- parser ------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.tokens = list(_tokenize(text))
        self.pos = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def accept(self, kind: str) -> Optional[_Token]:
        if self.cur.kind == kind:
            return self.advance()
        return None

    def expect(self, kind: str, what: str = "") -> _Token:
        if self.cur.kind != kind:
            desc = what or f"{kind!r}"
            found = self.cur.text or self.cur.kind
            raise ParseError(
                f"expected {desc}, found {found!r}", self.cur.line, self.cur.column
            )
        return self.advance()

    def fail(self, message: str) -> ParseError:
        return ParseError(message, self.cur.line, self.cur.column)

    # stages

    def pipeline(self) -> Pipeline:
        stages = [self.stage()]
        while self.accept("|"):
            stages.append(self.stage())
        self.expect("EOF", "end of query")
        return _validated(tuple(stages))

    def stage(self) -> Stage:
        tok = self.expect("IDENT", "a stage (map/where/reduce/window)")
        name = tok.text
        if name in ("map", "where"):
            self.expect("(")
            binder = self.binder()
            self.expect("->")
            expr = self.expr()
            self.expect(")")
            return MapStage(binder, expr) if name == "map" else WhereStage(binder, expr)
        if name == "reduce":
            self.expect("(")
            agg_tok = self.expect("IDENT", "an aggregator")
            agg = agg_tok.text
            if agg not in AGGREGATORS:
                raise ParseError(
                    f"unknown aggregator {agg!r}", agg_tok.line, agg_tok.column
                )
            bins = None
            if agg == "hist":
                self.expect("[")
                bins_tok = self.expect("INT", "bin count")
                bins = bins_tok.value
                if bins < 1:
                    raise ParseError(
                        "hist bin count must be >= 1", bins_tok.line, bins_tok.column
                    )
                self.expect("]")
            binder = expr = None
            if self.accept(","):
                binder = self.binder()
                self.expect("->")
                expr = self.expr()
            if agg == "count" and expr is not None:
                raise ParseError(
                    "count takes no expression", agg_tok.line, agg_tok.column
                )
            if agg != "count" and expr is None:
                raise ParseError(
                    f"aggregator {agg!r} requires an expression",
                    agg_tok.line,
                    agg_tok.column,
                )
            self.expect(")")
            return ReduceStage(agg, bins, binder, expr)
        if name == "window":
            self.expect("(")
            mode = self.window_mode()
            self.expect(")")
            return WindowStage(mode)
        raise ParseError(f"unknown stage {name!r}", tok.line, tok.column)

    def binder(self) -> str:
        tok = self.expect("IDENT", "a binder name")
        if tok.text in _KEYWORD_LITERALS:
            raise ParseError(f"{tok.text!r} cannot be a binder", tok.line, tok.column)
        return tok.text

    def window_mode(self) -> WindowMode:
        tok = self.expect("IDENT", "group, count=N, or seconds=T")
        if tok.text == "group":
            return GROUP_WINDOW
        if tok.text == "count":
            self.expect("=")
            n_tok = self.expect("INT", "a window size")
            if n_tok.value < 1:
                raise ParseError("window count must be >= 1", n_tok.line, n_tok.column)
            return CountWindow(n_tok.value)
        if tok.text == "seconds":
            self.expect("=")
            if self.cur.kind not in ("INT", "FLOAT"):
                raise self.fail("expected a number of seconds")
            s_tok = self.advance()
            seconds = float(s_tok.value)
            if seconds <= 0:
                raise ParseError(
                    "window seconds must be > 0", s_tok.line, s_tok.column
                )
            return TimeWindow(seconds)
        raise ParseError(
            f"unknown window mode {tok.text!r}", tok.line, tok.column
        )

    # expressions, lowest to highest precedence

    def expr(self) -> Expr:
        return self.or_expr()

    def or_expr(self) -> Expr:
        left = self.and_expr()
        while self.accept("||"):
            left = Binary("||", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.cmp_expr()
        while self.accept("&&"):
            left = Binary("&&", left, self.cmp_expr())
        return left

    def cmp_expr(self) -> Expr:
        left = self.add_expr()
        while self.cur.kind in ("==", "!=", "<", "<=", ">", ">="):
            op = self.advance().kind
            left = Binary(op, left, self.add_expr())
        return left

    def add_expr(self) -> Expr:
        left = self.mul_expr()
        while self.cur.kind in ("+", "-"):
            op = self.advance().kind
            left = Binary(op, left, self.mul_expr())
        return left

    def mul_expr(self) -> Expr:
        left = self.unary_expr()
        while self.cur.kind in ("*", "/", "%"):
            op = self.advance().kind
            left = Binary(op, left, self.unary_expr())
        return left

    def unary_expr(self) -> Expr:
        if self.cur.kind in ("-", "!"):
            op = self.advance().kind
            return Unary(op, self.unary_expr())
        return self.postfix_expr()

    def postfix_expr(self) -> Expr:
        node = self.primary()
        while True:
            if self.accept("."):
                name_tok = self.expect("IDENT", "a field name")
                node = FieldAccess(node, name_tok.text)
            elif self.accept("["):
                index = self.expr()
                self.expect("]")
                node = IndexAccess(node, index)
            else:
                return node

    def primary(self) -> Expr:
        tok = self.cur
        if tok.kind in ("INT", "FLOAT", "STRING"):
            self.advance()
            return Lit(tok.value)
        if tok.kind == "IDENT":
            self.advance()
            if tok.text in _KEYWORD_LITERALS:
                return Lit(_KEYWORD_LITERALS[tok.text])
            if self.cur.kind == "(":
                return self.call(tok)
            return Ident(tok.text)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        found = tok.text or tok.kind
        raise ParseError(f"expected an expression, found {found!r}", tok.line, tok.column)

    def call(self, name_tok: _Token) -> Expr:
        name = name_tok.text
        if name not in BUILTIN_ARITY:
            raise ParseError(
                f"unknown function {name!r}", name_tok.line, name_tok.column
            )
        self.expect("(")
        args = []
        if self.cur.kind != ")":
            args.append(self.expr())
            while self.accept(","):
                args.append(self.expr())
        self.expect(")")
        if len(args) != BUILTIN_ARITY[name]:
            raise ParseError(
                f"{name} takes {BUILTIN_ARITY[name]} argument(s), got {len(args)}",
                name_tok.line,
                name_tok.column,
            )
        return Call(name, tuple(args))


def _validated(stages: Tuple[Stage, ...]) -> Pipeline:
    reduce_idx = [i for i, s in enumerate(stages) if isinstance(s, ReduceStage)]
    window_idx = [i for i, s in enumerate(stages) if isinstance(s, WindowStage)]
    if len(reduce_idx) > 1:
        raise ValidationError("at most one reduce stage is allowed")
    if len(window_idx) > 1:
        raise ValidationError("at most one window stage is allowed")
    if window_idx and not reduce_idx:
        raise ValidationError("a window stage requires a reduce stage")
    if reduce_idx:
        for i in range(reduce_idx[0] + 1, len(stages)):
            if not isinstance(stages[i], WindowStage):
                raise ValidationError("no stage may follow reduce (except window)")
    return Pipeline(stages, frozenset(_referenced_names(stages)))


def _referenced_names(stages: Tuple[Stage, ...]) -> Set[str]:
    names: Set[str] = set()
    for stage in stages:
        if isinstance(stage, WindowStage) or stage.expr is None:
            continue
        names |= _expr_idents(stage.expr) - {stage.binder}
    return names


def _expr_idents(expr: Expr) -> Set[str]:
    if isinstance(expr, Ident):
        return {expr.name}
    if isinstance(expr, (Lit,)):
        return set()
    if isinstance(expr, FieldAccess):
        return _expr_idents(expr.obj)
    if isinstance(expr, IndexAccess):
        return _expr_idents(expr.obj) | _expr_idents(expr.index)
    if isinstance(expr, Unary):
        return _expr_idents(expr.operand)
    if isinstance(expr, Binary):
        return _expr_idents(expr.left) | _expr_idents(expr.right)
    out: Set[str] = set()
    for arg in expr.args:
        out |= _expr_idents(arg)
    return out


def parse(text: str) -> Pipeline:
    """Parse and validate a query string.

    Raises ParseError for syntax problems (with line/column) and
    ValidationError for stage placement violations.
    """
    return _Parser(text).pipeline()


def free_identifiers(pipeline: Pipeline) -> Set[str]:
    """Identifiers the pipeline reads from the event scope, binders excluded."""
    return set(pipeline.referenced_names)


def observable_reads(pipeline: Pipeline) -> Tuple[FrozenSet[str], bool]:
    """Statically derive which event-scope names the pipeline can touch.

    Returns (names, needs_all). `names` collects bare identifiers plus fields
    accessed directly on a binder that still holds the event record.
    `needs_all` is True when the record itself escapes the analysis: it is
    used whole (indexed, passed to a function, aggregated, or emitted as the
    pipeline's output), in which case every observable must be pulled.
    """
    names: Set[str] = set(pipeline.referenced_names)
    needs_all = False
    record_flows = True  # the value entering the next stage is the event record
    saw_reduce = False
    for stage in pipeline.stages:
        if isinstance(stage, WindowStage):
            continue
        if isinstance(stage, ReduceStage):
            saw_reduce = True
        expr, binder = stage.expr, stage.binder
        if expr is None:
            continue
        identity = isinstance(stage, MapStage) and expr == Ident(binder)
        if record_flows and binder is not None and not identity:
            fields, escapes = _binder_field_roots(expr, binder)
            names |= fields
            needs_all = needs_all or escapes
        if isinstance(stage, MapStage) and not identity:
            record_flows = False
        if isinstance(stage, ReduceStage):
            record_flows = False
    if record_flows and not saw_reduce:
        needs_all = True  # map/where-only pipeline emitting whole records
    return frozenset(names), needs_all


def _binder_field_roots(expr: Expr, binder: str) -> Tuple[Set[str], bool]:
    fields: Set[str] = set()
    escapes = False

    def walk(node: Expr) -> None:
        nonlocal escapes
        if isinstance(node, FieldAccess) and node.obj == Ident(binder):
            fields.add(node.name)
            return
        if isinstance(node, Ident):
            if node.name == binder:
                escapes = True
            return
        if isinstance(node, Lit):
            return
        if isinstance(node, FieldAccess):
            walk(node.obj)
        elif isinstance(node, IndexAccess):
            walk(node.obj)
            walk(node.index)
        elif isinstance(node, Unary):
            walk(node.operand)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)
        else:
            for arg in node.args:
                walk(arg)

    walk(expr)
    return fields, escapes


# --- printer -----------------------------------------------------------------

_BINARY_LEVEL = {
    "||": 1,
    "&&": 2,
    "==": 3,
    "!=": 3,
    "<": 3,
    "<=": 3,
    ">": 3,
    ">=": 3,
    "+": 4,
    "-": 4,
    "*": 5,
    "/": 5,
    "%": 5,
}
_UNARY_LEVEL = 6
_POSTFIX_LEVEL = 7


def _float_literal(f: float) -> str:
    s = repr(f)
    if "e" in s or "E" in s:
        mant, _, exp = s.partition("e")
        if "." not in mant:
            mant += ".0"
        return f"{mant}e{exp}"
    if "." not in s:
        s += ".0"
    return s


def _string_literal(s: str) -> str:
    body = s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{body}"'


def format_expr(expr: Expr, parent_level: int = 0) -> str:
    if isinstance(expr, Lit):
        v = expr.value
        if v is None:
            return "null"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return _float_literal(v)
        if isinstance(v, str):
            return _string_literal(v)
        return str(v)
    if isinstance(expr, Ident):
        return expr.name
    if isinstance(expr, FieldAccess):
        return f"{format_expr(expr.obj, _POSTFIX_LEVEL)}.{expr.name}"
    if isinstance(expr, IndexAccess):
        return f"{format_expr(expr.obj, _POSTFIX_LEVEL)}[{format_expr(expr.index)}]"
    if isinstance(expr, Unary):
        text = f"{expr.op}{format_expr(expr.operand, _UNARY_LEVEL)}"
        return f"({text})" if parent_level > _UNARY_LEVEL else text
    if isinstance(expr, Binary):
        level = _BINARY_LEVEL[expr.op]
        left = format_expr(expr.left, level)
        right = format_expr(expr.right, level + 1)  # left-associative
        text = f"{left} {expr.op} {right}"
        return f"({text})" if parent_level > level else text
    args = ", ".join(format_expr(a) for a in expr.args)
    return f"{expr.name}({args})"


def format_window(mode: WindowMode) -> str:
    if isinstance(mode, GroupWindow):
        return "group"
    if isinstance(mode, CountWindow):
        return f"count={mode.n}"
    seconds = mode.seconds
    text = str(int(seconds)) if seconds == int(seconds) else _float_literal(seconds)
    return f"seconds={text}"


def format_pipeline(pipeline: Pipeline) -> str:
    parts = []
    for stage in pipeline.stages:
        if isinstance(stage, MapStage):
            parts.append(f"map({stage.binder} -> {format_expr(stage.expr)})")
        elif isinstance(stage, WhereStage):
            parts.append(f"where({stage.binder} -> {format_expr(stage.expr)})")
        elif isinstance(stage, ReduceStage):
            agg = stage.aggregator
            if stage.hist_bins is not None:
                agg = f"hist[{stage.hist_bins}]"
            if stage.expr is None:
                parts.append(f"reduce({agg})")
            else:
                parts.append(
                    f"reduce({agg}, {stage.binder} -> {format_expr(stage.expr)})"
                )
        else:
            parts.append(f"window({format_window(stage.mode)})")
    return " | ".join(parts)
