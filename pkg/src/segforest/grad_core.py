"""Reverse-mode automatic differentiation over scalar values.

A :class:`Tape` is an append-only list of nodes. Each node stores its
operation kind, the indices of its operands, its forward value and the local
partial derivatives with respect to every operand. ``backward`` is then a
single reverse sweep that accumulates adjoints.

Subgradient conventions: ``relu'(0) = 0``, ``abs'(0) = 0``, ``sqrt'(0) = 0``
and ties in ``max2`` propagate to the first operand.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence

LOG_FLOOR = 1e-12

OPS = ("add", "sub", "mul", "div", "neg", "abs", "max2", "relu", "sigmoid",
       "square", "sqrt", "exp", "log_guarded")

_ARITY = {"add": 2, "sub": 2, "mul": 2, "div": 2, "max2": 2}


class DomainError(ValueError):
    """Raised when an operation is applied outside of its domain."""


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class Tape:
    """Append-only computation graph of scalar nodes."""

    def __init__(self):
        self.kinds: list[str] = []
        self.operands: list[tuple[int, ...]] = []
        self.values: list[float] = []
        self.partials: list[tuple[float, ...]] = []
        # Smallest distance of any non-smooth operation argument to its kink.
        self.kink_margin = math.inf
        # Branch taken at every non-smooth operation, in creation order.
        self.branches: list[int] = []

    def __len__(self):
        return len(self.values)

    def _push(self, kind, operands, value, partials) -> DiffValue:
        self.kinds.append(kind)
        self.operands.append(operands)
        self.values.append(value)
        self.partials.append(partials)
        return DiffValue(self, len(self.values) - 1)

    def note_kink(self, distance: float, branch: int):
        """Record a data-dependent branch at ``distance`` from its switch point."""
        self.kink_margin = min(self.kink_margin, abs(distance))
        self.branches.append(branch)

    def lift(self, constant: float) -> DiffValue:
        constant = float(constant)
        if not math.isfinite(constant):
            raise DomainError(f"lift: non-finite constant {constant!r}")
        return self._push("const", (), constant, ())

    def variable(self, initial: float) -> DiffValue:
        initial = float(initial)
        if not math.isfinite(initial):
            raise DomainError(f"variable: non-finite initial value {initial!r}")
        return self._push("var", (), initial, ())

    def coerce(self, x) -> DiffValue:
        if isinstance(x, DiffValue):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.lift(x)

    def apply(self, kind: str, *operands) -> DiffValue:
        """Append one operation node and return its value."""
        if kind not in OPS:
            raise ValueError(f"unknown operation {kind!r}")
        arity = _ARITY.get(kind, 1)
        if len(operands) != arity:
            raise ValueError(f"{kind} takes {arity} operand(s), got {len(operands)}")
        idx = tuple(o.index if type(o) is DiffValue and o.tape is self else self.coerce(o).index
                    for o in operands)
        vals = [self.values[i] for i in idx]

        if kind == "add":
            a, b = vals
            return self._push(kind, idx, a + b, (1.0, 1.0))
        if kind == "sub":
            a, b = vals
            return self._push(kind, idx, a - b, (1.0, -1.0))
        if kind == "mul":
            a, b = vals
            return self._push(kind, idx, a * b, (b, a))
        if kind == "div":
            a, b = vals
            if b == 0.0:
                raise DomainError(f"node {len(self.values)} (div): division by zero")
            return self._push(kind, idx, a / b, (1.0 / b, -a / (b * b)))
        if kind == "max2":
            a, b = vals
            first = a >= b
            self.note_kink(a - b, int(first))
            return self._push(kind, idx, a if first else b,
                              (1.0, 0.0) if first else (0.0, 1.0))

        (x,) = vals
        if kind == "neg":
            return self._push(kind, idx, -x, (-1.0,))
        if kind == "abs":
            self.note_kink(x, (x > 0) - (x < 0))
            return self._push(kind, idx, abs(x), (float((x > 0) - (x < 0)),))
        if kind == "relu":
            self.note_kink(x, int(x > 0))
            return self._push(kind, idx, max(x, 0.0), (1.0 if x > 0 else 0.0,))
        if kind == "sigmoid":
            s = _sigmoid(x)
            return self._push(kind, idx, s, (s * (1.0 - s),))
        if kind == "square":
            return self._push(kind, idx, x * x, (2.0 * x,))
        if kind == "sqrt":
            if x < 0.0:
                raise DomainError(f"node {len(self.values)} (sqrt): sqrt of negative value {x!r}")
            self.note_kink(x, int(x > 0))
            r = math.sqrt(x)
            return self._push(kind, idx, r, (0.5 / r if r > 0 else 0.0,))
        if kind == "exp":
            if x > 700.0:
                raise DomainError(f"node {len(self.values)} (exp): exp overflow for {x!r}")
            e = math.exp(x)
            return self._push(kind, idx, e, (e,))
        # log_guarded
        self.note_kink(x - LOG_FLOOR, int(x >= LOG_FLOOR))
        if x >= LOG_FLOOR:
            return self._push(kind, idx, math.log(x), (1.0 / x,))
        return self._push(kind, idx, math.log(LOG_FLOOR), (0.0,))

    def backward(self, output: DiffValue) -> dict[int, float]:
        """Adjoints of every variable node, keyed by node index."""
        if output.tape is not self:
            raise ValueError("output is not on this tape")
        adj = [0.0] * (output.index + 1)
        adj[output.index] = 1.0
        for i in range(output.index, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            for j, d in zip(self.operands[i], self.partials[i]):
                adj[j] += a * d
        return {i: adj[i] for i in range(output.index + 1) if self.kinds[i] == "var"}


class DiffValue:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.values[self.index]

    def __repr__(self):
        return f"DiffValue({self.value!r}, node={self.index})"

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    def __rmul__(self, other):
        return self.tape.apply("mul", other, self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.apply("div", other, self)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __abs__(self):
        return self.tape.apply("abs", self)


def _unary(kind):
    def op(x: DiffValue) -> DiffValue:
        return x.tape.apply(kind, x)
    op.__name__ = kind
    return op


relu = _unary("relu")
sigmoid = _unary("sigmoid")
square = _unary("square")
sqrt = _unary("sqrt")
exp = _unary("exp")
log_guarded = _unary("log_guarded")


def max2(a, b) -> DiffValue:
    tape = a.tape if isinstance(a, DiffValue) else b.tape
    return tape.apply("max2", a, b)


def total(values: Sequence[DiffValue]) -> DiffValue:
    """Left-to-right sum of a nonempty sequence."""
    acc = values[0]
    for v in values[1:]:
        acc = acc + v
    return acc


def softmax(values: Sequence[DiffValue]) -> list[DiffValue]:
    """Softmax with max subtraction; the shift is a constant, which is exact."""
    tape = values[0].tape
    shift = max(v.value for v in values)
    exps = [exp(v - tape.lift(shift)) for v in values]
    z = total(exps)
    return [e / z for e in exps]


def gradient(function: Callable[[list[DiffValue]], DiffValue], point: Sequence[float]):
    """Return ``(value, gradient list, tape)`` of ``function`` at ``point``."""
    tape = Tape()
    xs = [tape.variable(p) for p in point]
    out = function(xs)
    if not isinstance(out, DiffValue):
        out = tape.lift(out)
    table = tape.backward(out)
    return out.value, [table[x.index] for x in xs], tape


def evaluate(function: Callable[[list[DiffValue]], DiffValue], point: Sequence[float]) -> float:
    tape = Tape()
    out = function([tape.variable(p) for p in point])
    return out.value if isinstance(out, DiffValue) else float(out)


def relative_error(analytic: float, numeric: float) -> float:
    if not (math.isfinite(analytic) and math.isfinite(numeric)):
        return math.inf
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def central_difference(value: Callable[[list[float]], float], point: Sequence[float],
                       step: float) -> list[float]:
    out = []
    for i in range(len(point)):
        hi = list(point)
        lo = list(point)
        hi[i] += step
        lo[i] -= step
        try:
            out.append((value(hi) - value(lo)) / (2.0 * step))
        except (DomainError, ZeroDivisionError, OverflowError):
            out.append(math.nan)
    return out


def grad_check(function: Callable[[list[DiffValue]], DiffValue], point: Sequence[float],
               step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    A non-finite evaluation counts as an infinite error for that coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    try:
        _, analytic, _ = gradient(function, point)
    except (DomainError, ZeroDivisionError, OverflowError):
        return math.inf
    numeric = central_difference(lambda p: evaluate(function, p), point, step)
    return max((relative_error(a, n) for a, n in zip(analytic, numeric)), default=0.0)
