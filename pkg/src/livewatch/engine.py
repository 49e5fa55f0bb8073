"""Push-driven pipeline evaluator: post (value, group_end) pairs, get at most
one output back per post.

Semantics in brief:
- Map transforms the flowing value, where drops it; a dropped item still
  closes a Group window (the flag rides beside the value) but is invisible to
  Count/Time windows.
- An item whose evaluation fails anywhere yields Error and changes nothing:
  no fold, no window progress, no group close.
- Group windows emit when an item arrives with group_end=true and the
  accumulator is non-empty; Count(n) after the n-th accepted item; Time(T)
  when an accepted item's timestamp reaches window_start + T, emitting the
  closed window before folding that item. Time windows anchor at the first
  accepted item of each window.
- hist[k] bins are equal-width over the closed group's [min, max]:
  edges[i] = min + (max - min) * (i / k), samples assigned to half-open bins
  with the last bin closed; min == max degenerates to one bin [min, min + 1].
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

from .dsl import (
    CountWindow,
    GroupWindow,
    MapStage,
    Pipeline,
    ReduceStage,
    TimeWindow,
    WhereStage,
    WindowStage,
)
from .dsl_eval import CompiledExpr, EvalError, compile_expr
from .values import Value, is_number, kind_of


@dataclass
class StreamItem:
    value: Value
    group_end: bool = False
    seq: int = 0
    t_wall: float = 0.0


@dataclass(frozen=True)
class Emit:
    value: Value


@dataclass(frozen=True)
class Silent:
    pass


@dataclass(frozen=True)
class Error:
    error: EvalError


SILENT = Silent()

Output = Union[Emit, Silent, Error]


class _Aggregator:
    """check() validates a sample without mutating; fold() then accepts it."""

    empty = True

    def check(self, sample: Value) -> None:
        pass

    def fold(self, sample: Value) -> None:
        raise NotImplementedError

    def result(self) -> Value:
        raise NotImplementedError

    def reset(self) -> None:
        raise NotImplementedError

    def _check_number(self, name: str, sample: Value) -> None:
        if not is_number(sample):
            raise EvalError(f"{name}: expected a number, got {kind_of(sample)}")


class _Sum(_Aggregator):
    def __init__(self):
        self.acc = None

    @property
    def empty(self):
        return self.acc is None

    def check(self, sample):
        self._check_number("sum", sample)

    def fold(self, sample):
        self.acc = sample if self.acc is None else self.acc + sample

    def result(self):
        return self.acc

    def reset(self):
        self.acc = None


class _Avg(_Aggregator):
    def __init__(self):
        self.total = 0
        self.n = 0

    @property
    def empty(self):
        return self.n == 0

    def check(self, sample):
        self._check_number("avg", sample)

    def fold(self, sample):
        self.total += sample
        self.n += 1

    def result(self):
        return self.total / self.n

    def reset(self):
        self.total = 0
        self.n = 0


class _Extremum(_Aggregator):
    def __init__(self, name: str, want_smaller: bool):
        self.name = name
        self.want_smaller = want_smaller
        self.cur = None
        self.seen = False

    @property
    def empty(self):
        return not self.seen

    def check(self, sample):
        self._check_number(self.name, sample)

    def fold(self, sample):
        if not self.seen:
            self.cur = sample
            self.seen = True
        elif (sample < self.cur) if self.want_smaller else (sample > self.cur):
            self.cur = sample

    def result(self):
        return self.cur

    def reset(self):
        self.cur = None
        self.seen = False


class _Count(_Aggregator):
    def __init__(self):
        self.n = 0

    @property
    def empty(self):
        return self.n == 0

    def fold(self, sample):
        self.n += 1

    def result(self):
        return self.n

    def reset(self):
        self.n = 0


class _Last(_Aggregator):
    def __init__(self):
        self.value = None
        self.seen = False

    @property
    def empty(self):
        return not self.seen

    def fold(self, sample):
        self.value = sample
        self.seen = True

    def result(self):
        return self.value

    def reset(self):
        self.value = None
        self.seen = False


class _Hist(_Aggregator):
    def __init__(self, bins: int):
        self.bins = bins
        self.samples: List[Value] = []

    @property
    def empty(self):
        return not self.samples

    def check(self, sample):
        self._check_number("hist", sample)

    def fold(self, sample):
        self.samples.append(sample)

    def result(self):
        lo, hi = min(self.samples), max(self.samples)
        if lo == hi:
            return {"edges": [float(lo), float(lo) + 1.0], "counts": [len(self.samples)]}
        k = self.bins
        edges = [lo + (hi - lo) * (i / k) for i in range(k + 1)]
        counts = [0] * k
        for v in self.samples:
            i = bisect_right(edges, v) - 1
            counts[min(max(i, 0), k - 1)] += 1
        return {"edges": [float(e) for e in edges], "counts": counts}

    def reset(self):
        self.samples = []


def _make_aggregator(stage: ReduceStage) -> _Aggregator:
    agg = stage.aggregator
    if agg == "sum":
        return _Sum()
    if agg == "avg":
        return _Avg()
    if agg == "min":
        return _Extremum("min", True)
    if agg == "max":
        return _Extremum("max", False)
    if agg == "count":
        return _Count()
    if agg == "last":
        return _Last()
    return _Hist(stage.hist_bins)


class StreamProcessor:
    """Single-threaded; posts must be externally serialized."""

    def __init__(self, pipeline: Pipeline):
        self._stages: List[Tuple[bool, CompiledExpr]] = []  # (is_filter, fn)
        self._agg: Optional[_Aggregator] = None
        self._reduce_fn: Optional[CompiledExpr] = None
        self._mode = pipeline.window_mode
        for stage in pipeline.stages:
            if isinstance(stage, MapStage):
                self._stages.append((False, compile_expr(stage.expr, stage.binder)))
            elif isinstance(stage, WhereStage):
                self._stages.append((True, compile_expr(stage.expr, stage.binder)))
            elif isinstance(stage, ReduceStage):
                self._agg = _make_aggregator(stage)
                if stage.expr is not None:
                    self._reduce_fn = compile_expr(stage.expr, stage.binder)
        self._accepted = 0  # accepted items in the open window
        self._win_start = 0.0
        self._win_open = False

    def post(self, item: StreamItem) -> Output:
        record = item.value if isinstance(item.value, dict) else {}
        current = item.value
        accepted = True
        try:
            for is_filter, fn in self._stages:
                out = fn(current, record)
                if is_filter:
                    if not isinstance(out, bool):
                        raise EvalError(
                            f"where predicate must be Bool, got {kind_of(out)}"
                        )
                    if not out:
                        accepted = False
                        break
                else:
                    current = out
        except EvalError as e:
            return Error(e)

        if self._agg is None:
            return Emit(current) if accepted else SILENT

        emitted: Output = SILENT
        if accepted:
            try:
                sample = (
                    self._reduce_fn(current, record) if self._reduce_fn else current
                )
                self._agg.check(sample)
            except EvalError as e:
                return Error(e)
            if isinstance(self._mode, TimeWindow):
                if self._win_open and item.t_wall >= self._win_start + self._mode.seconds:
                    emitted = self._emit_and_reset()
                if not self._win_open:
                    self._win_start = item.t_wall
                    self._win_open = True
            self._agg.fold(sample)
            self._accepted += 1

        if isinstance(self._mode, GroupWindow):
            if item.group_end:
                if not self._agg.empty:
                    emitted = self._emit_and_reset()
                else:
                    self._reset_window()
        elif isinstance(self._mode, CountWindow):
            if accepted and self._accepted >= self._mode.n:
                emitted = self._emit_and_reset()
        return emitted

    def flush(self) -> Output:
        """Terminal call: emit a partial Count/Time window, drop open groups."""
        if self._agg is None or isinstance(self._mode, GroupWindow):
            return SILENT
        if self._agg.empty:
            return SILENT
        return self._emit_and_reset()

    def _emit_and_reset(self) -> Emit:
        value = self._agg.result()
        self._agg.reset()
        self._reset_window()
        return Emit(value)

    def _reset_window(self) -> None:
        self._accepted = 0
        self._win_open = False


def create_stream_processor(pipeline: Pipeline) -> StreamProcessor:
    return StreamProcessor(pipeline)
