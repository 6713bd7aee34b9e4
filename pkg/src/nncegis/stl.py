"""Signal Temporal Logic: syntax, text grammar, horizons and robustness.

Formulas are immutable trees. Robustness is computed over uniformly sampled
traces: a temporal interval ``[a, b]`` anchored at sample ``t`` covers the
sample indices ``{k : t*h + a <= k*h <= t*h + b}``. Windows that run past the
end of the trace are truncated; an empty window yields the identity element
(``+inf`` for min-windows, ``-inf`` for max-windows).

Text grammar (whitespace-insensitive)::

    formula   := implies
    implies   := or_expr [ "=>" implies ]
    or_expr   := and_expr { "or" and_expr }
    and_expr  := until { "and" until }
    until     := unary [ "until_" interval unary ]
    unary     := "not" unary
               | ("alw" | "ev") [ "_" interval ] unary
               | "true" | "false" | "(" formula ")" | predicate
    predicate := expr cmp bound
    cmp       := "<" | "<=" | ">" | ">=" | "==" | "!="
    expr      := term { ("+" | "-") term }
    term      := [ "-" ] ( number [ "*" factor ] | factor )
    factor    := signal | "abs" "(" expr ")" | "norm" "(" signal ")" | "(" expr ")"
    signal    := ident [ "[" int "]" ]
    bound     := [ "-" ] number | ident
    interval  := "[" bound "," ( bound | "inf" ) "]"

An identifier in a bound position is a named parameter (see :mod:`nncegis.pstl`).
``=`` and ``!=`` predicates get the non-robust semantics ``-|g-b|`` / ``+|g-b|``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

TRACE_BOUNDED = math.inf
"""Horizon marker for formulas whose look-ahead reaches the end of the trace."""

_EPS_IDX = 1e-9


class StlError(ValueError):
    pass


class StlSyntaxError(StlError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnboundParameterError(StlError):
    pass


# ---------------------------------------------------------------------------
# Syntax tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    name: str

    def __str__(self) -> str:
        return self.name


Bound = Union[float, Param]


@dataclass(frozen=True)
class Interval:
    lo: Bound = 0.0
    hi: Bound = math.inf

    def __post_init__(self):
        lo, hi = self.lo, self.hi
        if not isinstance(lo, Param):
            object.__setattr__(self, "lo", float(lo))
            if not (self.lo >= 0 and math.isfinite(self.lo)):
                raise StlError(f"interval lower bound must be finite and >= 0, got {lo}")
        if not isinstance(hi, Param):
            object.__setattr__(self, "hi", float(hi))
        if not isinstance(self.lo, Param) and not isinstance(self.hi, Param):
            if not self.lo < self.hi:
                raise StlError(f"malformed interval [{self.lo}, {self.hi}]: need a < b")

    @property
    def unbounded(self) -> bool:
        return not isinstance(self.hi, Param) and math.isinf(self.hi)

    def offsets(self, step: float) -> tuple[int, int | None]:
        """Sample offsets ``(lo, hi)``; ``hi`` is None for end-of-trace."""
        if isinstance(self.lo, Param) or isinstance(self.hi, Param):
            name = self.lo.name if isinstance(self.lo, Param) else self.hi.name
            raise UnboundParameterError(f"unbound parameter {name}")
        lo = math.ceil(self.lo / step - _EPS_IDX)
        hi = None if math.isinf(self.hi) else math.floor(self.hi / step + _EPS_IDX)
        return lo, hi


# expressions over signal samples


@dataclass(frozen=True)
class Var:
    name: str
    index: int | None = None


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Lin:
    """Linear combination ``sum(c * e) + offset``."""

    terms: tuple[tuple[float, "Expr"], ...]
    offset: float = 0.0


@dataclass(frozen=True)
class Abs:
    arg: "Expr"


@dataclass(frozen=True)
class Norm:
    """Infinity norm of a (vector) signal sample."""

    arg: Var


Expr = Union[Var, Num, Lin, Abs, Norm]


def lin(terms, offset: float = 0.0) -> Expr:
    """Build a normalized linear expression (collapses ``1*e`` to ``e``)."""
    terms = tuple((float(c), e) for c, e in terms)
    if len(terms) == 1 and terms[0][0] == 1.0 and offset == 0.0:
        return terms[0][1]
    if not terms:
        return Num(float(offset))
    return Lin(terms, float(offset))


def diff(a: str, b: str) -> Expr:
    return Lin(((1.0, Var(a)), (-1.0, Var(b))), 0.0)


COMPARATORS = ("<", "<=", ">", ">=", "==", "!=")


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class Pred:
    expr: Expr
    cmp: str
    threshold: Bound

    def __post_init__(self):
        if self.cmp not in COMPARATORS:
            raise StlError(f"unknown comparator {self.cmp!r}")
        if not isinstance(self.threshold, Param):
            object.__setattr__(self, "threshold", float(self.threshold))


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Always:
    interval: Interval
    arg: "Formula"


@dataclass(frozen=True)
class Eventually:
    interval: Interval
    arg: "Formula"


@dataclass(frozen=True)
class Until:
    interval: Interval
    left: "Formula"
    right: "Formula"


Formula = Union[TrueF, Pred, Not, And, Or, Implies, Always, Eventually, Until]

FALSE = Not(TrueF())


def conjunction(*fs: Formula) -> Formula:
    if not fs:
        return TrueF()
    out = fs[0]
    for f in fs[1:]:
        out = And(out, f)
    return out


def children(f: Formula) -> tuple[Formula, ...]:
    if isinstance(f, (TrueF, Pred)):
        return ()
    if isinstance(f, (Not, Always, Eventually)):
        return (f.arg,)
    return (f.left, f.right)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampledSignal:
    name: str
    step: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"signal {self.name}: need at least one sample")
        if not self.step > 0:
            raise ValueError(f"signal {self.name}: step must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"signal {self.name}: non-finite samples")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


class Trace:
    """Named signals sharing one sample step and one length."""

    def __init__(self, signals: Mapping[str, SampledSignal] | None = None, step: float | None = None,
                 **arrays):
        sigs = dict(signals or {})
        if arrays:
            if step is None:
                raise ValueError("step is required when passing raw arrays")
            for name, arr in arrays.items():
                sigs[name] = SampledSignal(name, step, arr)
        if not sigs:
            raise ValueError("empty trace")
        steps = {s.step for s in sigs.values()}
        lengths = {len(s) for s in sigs.values()}
        if len(steps) != 1 or len(lengths) != 1:
            raise ValueError("all signals of a trace must share step and length")
        self.signals = sigs
        self.step = steps.pop()
        self.length = lengths.pop()

    def __getitem__(self, name: str) -> SampledSignal:
        return self.signals[name]

    def __contains__(self, name: str) -> bool:
        return name in self.signals

    def env(self) -> dict[str, np.ndarray]:
        return {k: s.values for k, s in self.signals.items()}


# ---------------------------------------------------------------------------
# Parsing and printing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z][A-Za-z0-9_]*)"
    r"|(?P<op>=>|<=|>=|==|!=|[<>()\[\],*+\-]))"
)

_TEMPORAL = {"alw_": "alw", "ev_": "ev", "until_": "until"}
_KEYWORDS = {"not", "and", "or", "true", "false", "alw", "ev", "abs", "norm", "inf"}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                if text[pos:].strip() == "":
                    break
                off = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise StlSyntaxError(f"unexpected character {text[off]!r}", off)
            kind = m.lastgroup
            start = m.start(kind)
            self.toks.append((kind, m.group(kind), start))
            pos = m.end()
        self.i = 0

    # token helpers
    def peek(self, k: int = 0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else ("eof", "", len(self.text))

    def take(self):
        t = self.peek()
        self.i += 1
        return t

    def expect(self, value: str):
        kind, v, off = self.peek()
        if v != value or kind == "eof":
            what = "end of input" if kind == "eof" else repr(v)
            raise StlSyntaxError(f"expected {value!r}, found {what}", off)
        return self.take()

    def at(self, value: str) -> bool:
        kind, v, _ = self.peek()
        return kind != "eof" and v == value

    # grammar
    def formula(self) -> Formula:
        left = self.or_expr()
        if self.at("=>"):
            self.take()
            return Implies(left, self.formula())
        return left

    def or_expr(self) -> Formula:
        f = self.and_expr()
        while self.at("or"):
            self.take()
            f = Or(f, self.and_expr())
        return f

    def and_expr(self) -> Formula:
        f = self.until()
        while self.at("and"):
            self.take()
            f = And(f, self.until())
        return f

    def until(self) -> Formula:
        f = self.unary()
        kind, v, off = self.peek()
        if kind == "id" and v == "until_":
            self.take()
            iv = self.interval()
            return Until(iv, f, self.unary())
        return f

    def unary(self) -> Formula:
        kind, v, off = self.peek()
        if kind == "id":
            if v == "not":
                self.take()
                return Not(self.unary())
            if v in ("alw", "ev"):
                self.take()
                cls = Always if v == "alw" else Eventually
                return cls(Interval(), self.unary())
            if v.endswith("_") and self.peek(1)[1] == "[":
                op = _TEMPORAL.get(v)
                if op is None or op == "until":
                    raise StlSyntaxError(f"unknown operator {v[:-1]!r}", off)
                self.take()
                iv = self.interval()
                cls = Always if op == "alw" else Eventually
                return cls(iv, self.unary())
            if v == "true":
                self.take()
                return TrueF()
            if v == "false":
                self.take()
                return FALSE
        if v == "(" and kind == "op":
            # either a parenthesized formula or the start of an expression
            save = self.i
            try:
                self.take()
                f = self.formula()
                self.expect(")")
                if self.peek()[1] in COMPARATORS or self.peek()[1] in ("+", "-", "*"):
                    raise StlSyntaxError("expression continues", self.peek()[2])
                return f
            except StlSyntaxError as first:
                self.i = save
                try:
                    return self.predicate()
                except StlSyntaxError as second:
                    # report whichever reading got further into the text
                    raise (first if first.offset > second.offset else second) from None
        return self.predicate()

    def predicate(self) -> Formula:
        expr = self.expr()
        kind, v, off = self.peek()
        if v not in COMPARATORS or kind == "eof":
            what = "end of input" if kind == "eof" else repr(v)
            raise StlSyntaxError(f"expected comparator, found {what}", off)
        self.take()
        return Pred(expr, v, self.bound())

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.at("+") or self.at("-"):
            sign = 1.0 if self.take()[1] == "+" else -1.0
            c, e = self.term()
            terms.append((sign * c, e))
        offset = 0.0
        out = []
        for c, e in terms:
            if e is None:
                offset += c
            else:
                out.append((c, e))
        if not out:
            return Num(offset)
        return lin(out, offset)

    def term(self) -> tuple[float, Expr | None]:
        sign = 1.0
        if self.at("-"):
            self.take()
            sign = -1.0
        kind, v, off = self.peek()
        if kind == "num":
            self.take()
            c = sign * float(v)
            if self.at("*"):
                self.take()
                return c, self.factor()
            return c, None
        return sign, self.factor()

    def factor(self) -> Expr:
        kind, v, off = self.peek()
        if kind == "id" and v == "abs":
            self.take()
            self.expect("(")
            e = self.expr()
            self.expect(")")
            return Abs(e)
        if kind == "id" and v == "norm":
            self.take()
            self.expect("(")
            s = self.signal()
            self.expect(")")
            return Norm(s)
        if kind == "op" and v == "(":
            self.take()
            e = self.expr()
            self.expect(")")
            return e
        return self.signal()

    def signal(self) -> Var:
        kind, v, off = self.peek()
        if kind != "id" or v in _KEYWORDS or v.endswith("_"):
            what = "end of input" if kind == "eof" else repr(v)
            raise StlSyntaxError(f"expected signal name, found {what}", off)
        self.take()
        if self.at("["):
            self.take()
            k, idx, ioff = self.take()
            if k != "num" or not idx.isdigit():
                raise StlSyntaxError("expected component index", ioff)
            self.expect("]")
            return Var(v, int(idx))
        return Var(v)

    def bound(self, allow_inf: bool = False) -> Bound:
        sign = 1.0
        if self.at("-"):
            self.take()
            sign = -1.0
        kind, v, off = self.peek()
        if kind == "num":
            self.take()
            return sign * float(v)
        if kind == "id" and v == "inf" and allow_inf and sign > 0:
            self.take()
            return math.inf
        if kind == "id" and v not in _KEYWORDS and sign > 0:
            self.take()
            return Param(v)
        what = "end of input" if kind == "eof" else repr(v)
        raise StlSyntaxError(f"expected number or parameter, found {what}", off)

    def interval(self) -> Interval:
        _, _, start = self.expect("[")
        lo = self.bound()
        self.expect(",")
        hi = self.bound(allow_inf=True)
        self.expect("]")
        try:
            return Interval(lo, hi)
        except StlError as exc:
            raise StlSyntaxError(str(exc), start) from None


def parse_formula(text: str) -> Formula:
    """Parse formula text into a syntax tree."""
    p = _Parser(text)
    f = p.formula()
    kind, v, off = p.peek()
    if kind != "eof":
        raise StlSyntaxError(f"unexpected {v!r}", off)
    return f


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def _bound_text(b: Bound) -> str:
    if isinstance(b, Param):
        return b.name
    if math.isinf(b):
        return "inf"
    return _num(b)


def expr_to_text(e: Expr) -> str:
    if isinstance(e, Var):
        return e.name if e.index is None else f"{e.name}[{e.index}]"
    if isinstance(e, Num):
        return _num(e.value) if e.value >= 0 else f"-{_num(-e.value)}"
    if isinstance(e, Abs):
        return f"abs({expr_to_text(e.arg)})"
    if isinstance(e, Norm):
        return f"norm({expr_to_text(e.arg)})"
    parts = []
    for i, (c, sub) in enumerate(e.terms):
        body = expr_to_text(sub)
        if isinstance(sub, Lin):
            body = f"({body})"
        mag = abs(c)
        txt = body if mag == 1.0 else f"{_num(mag)}*{body}"
        if i == 0:
            parts.append(txt if c >= 0 else f"-{txt}")
        else:
            parts.append(f"+ {txt}" if c >= 0 else f"- {txt}")
    if e.offset:
        parts.append(f"+ {_num(e.offset)}" if e.offset > 0 else f"- {_num(-e.offset)}")
    return " ".join(parts)


def to_text(f: Formula) -> str:
    """Pretty-print a formula in the text grammar (fully parenthesized)."""
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, Pred):
        return f"{expr_to_text(f.expr)} {f.cmp} {_bound_text(f.threshold)}"
    if isinstance(f, Not):
        return f"not ({to_text(f.arg)})"
    if isinstance(f, (Always, Eventually)):
        op = "alw" if isinstance(f, Always) else "ev"
        iv = f.interval
        return f"{op}_[{_bound_text(iv.lo)},{_bound_text(iv.hi)}] ({to_text(f.arg)})"
    if isinstance(f, Until):
        iv = f.interval
        return (f"({to_text(f.left)}) until_[{_bound_text(iv.lo)},{_bound_text(iv.hi)}] "
                f"({to_text(f.right)})")
    op = {And: "and", Or: "or", Implies: "=>"}[type(f)]
    return f"({to_text(f.left)}) {op} ({to_text(f.right)})"


# ---------------------------------------------------------------------------
# Horizon
# ---------------------------------------------------------------------------


def _bound_value(b: Bound) -> float:
    if isinstance(b, Param):
        raise UnboundParameterError(f"unbound parameter {b.name}")
    return b


def horizon(f: Formula) -> float:
    """Look-ahead (seconds) needed to evaluate ``f`` at time 0.

    Returns :data:`TRACE_BOUNDED` when an interval reaches the end of the trace.
    """
    if isinstance(f, (TrueF, Pred)):
        return 0.0
    if isinstance(f, Not):
        return horizon(f.arg)
    if isinstance(f, (And, Or, Implies)):
        return max(horizon(f.left), horizon(f.right))
    hi = _bound_value(f.interval.hi)
    if isinstance(f, Until):
        return hi + max(horizon(f.left), horizon(f.right))
    return hi + horizon(f.arg)


def obligation_horizon(f: Formula) -> float:
    """Horizon of the per-instant obligation: outer ``alw`` scopes are stripped.

    For an invariant ``alw_[0,T] (trigger => psi)`` this is ``horizon(trigger => psi)``.
    """
    if isinstance(f, Always):
        return obligation_horizon(f.arg)
    if isinstance(f, And):
        return max(obligation_horizon(f.left), obligation_horizon(f.right))
    return horizon(f)


# ---------------------------------------------------------------------------
# Robustness
# ---------------------------------------------------------------------------


def _eval_expr(e: Expr, env: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(e, Var):
        try:
            arr = env[e.name]
        except KeyError:
            raise StlError(f"signal {e.name!r} missing from trace") from None
        if e.index is None:
            if arr.shape[-1] != 1:
                raise StlError(f"signal {e.name!r} is {arr.shape[-1]}-dimensional; "
                               "use an index or norm()")
            return arr[..., 0]
        if e.index >= arr.shape[-1]:
            raise StlError(f"component {e.index} out of range for {e.name!r}")
        return arr[..., e.index]
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Abs):
        return np.abs(_eval_expr(e.arg, env))
    if isinstance(e, Norm):
        v = e.arg
        if v.index is not None:
            return np.abs(_eval_expr(v, env))
        try:
            arr = env[v.name]
        except KeyError:
            raise StlError(f"signal {v.name!r} missing from trace") from None
        return np.max(np.abs(arr), axis=-1)
    out = np.float64(e.offset)
    for c, sub in e.terms:
        out = out + c * _eval_expr(sub, env)
    return out


def _shift(s: np.ndarray, j: int, fill: float) -> np.ndarray:
    """``out[..., t] = s[..., t + j]`` with ``fill`` past the end."""
    if j == 0:
        return s
    out = np.full_like(s, fill)
    K = s.shape[-1]
    if j < K:
        out[..., : K - j] = s[..., j:]
    return out


def _window(s: np.ndarray, lo: int, hi: int | None, reduce, fill: float) -> np.ndarray:
    K = s.shape[-1]
    hi = K - 1 if hi is None else min(hi, K - 1 + max(lo, 0))
    if lo > hi or lo > K - 1:
        return np.full_like(s, fill)
    acc = _shift(s, lo, fill).copy()
    for j in range(lo + 1, hi + 1):
        reduce(acc, _shift(s, j, fill), out=acc)
    return acc


def _pred_signal(f: Pred, env) -> np.ndarray:
    if isinstance(f.threshold, Param):
        raise UnboundParameterError(f"unbound parameter {f.threshold.name}")
    g = _eval_expr(f.expr, env)
    b = f.threshold
    if f.cmp in (">", ">="):
        return np.asarray(g - b, dtype=float)
    if f.cmp in ("<", "<="):
        return np.asarray(b - g, dtype=float)
    if f.cmp == "==":
        return -np.abs(np.asarray(g - b, dtype=float))
    return np.abs(np.asarray(g - b, dtype=float))


def robustness_signal(f: Formula, env: Mapping[str, np.ndarray], step: float) -> np.ndarray:
    """Robustness at every sample index.

    ``env`` maps signal names to arrays of shape ``(..., K, dim)``; the result
    has shape ``(..., K)``. Leading axes are batch axes.
    """
    any_sig = next(iter(env.values()))
    shape = any_sig.shape[:-1]
    return np.broadcast_to(_rob(f, env, step), shape).astype(float, copy=False)


def _rob(f: Formula, env, step: float) -> np.ndarray:
    if isinstance(f, TrueF):
        any_sig = next(iter(env.values()))
        return np.full(any_sig.shape[:-1], np.inf)
    if isinstance(f, Pred):
        any_sig = next(iter(env.values()))
        return np.broadcast_to(_pred_signal(f, env), any_sig.shape[:-1])
    if isinstance(f, Not):
        return -_rob(f.arg, env, step)
    if isinstance(f, And):
        return np.minimum(_rob(f.left, env, step), _rob(f.right, env, step))
    if isinstance(f, Or):
        return np.maximum(_rob(f.left, env, step), _rob(f.right, env, step))
    if isinstance(f, Implies):
        return np.maximum(-_rob(f.left, env, step), _rob(f.right, env, step))
    lo, hi = f.interval.offsets(step)
    if isinstance(f, Always):
        return _window(np.asarray(_rob(f.arg, env, step)), lo, hi, np.minimum, np.inf)
    if isinstance(f, Eventually):
        return _window(np.asarray(_rob(f.arg, env, step)), lo, hi, np.maximum, -np.inf)
    # until: max over t' in t+I of min(rho2(t'), min_{t'' in [t, t']} rho1(t''))
    s1 = np.asarray(_rob(f.left, env, step))
    s2 = np.asarray(_rob(f.right, env, step))
    K = s1.shape[-1]
    hi = K - 1 if hi is None else min(hi, K - 1)
    acc = np.full_like(s1, -np.inf)
    run = s1.copy()
    for j in range(0, hi + 1):
        if j > 0:
            np.minimum(run, _shift(s1, j, np.inf), out=run)
        if j >= lo:
            cand = np.minimum(_shift(s2, j, -np.inf), run)
            np.maximum(acc, cand, out=acc)
    return acc


def robustness(f: Formula, trace: Trace, t_index: int = 0) -> float:
    """Robustness of ``f`` on ``trace`` at sample ``t_index``."""
    if not 0 <= t_index < trace.length:
        raise StlError(f"t_index {t_index} outside trace of length {trace.length}")
    return float(robustness_signal(f, trace.env(), trace.step)[t_index])


def robustness_batch(f: Formula, env: Mapping[str, np.ndarray], step: float) -> np.ndarray:
    """Robustness at time 0 for a batch of traces (arrays shaped ``(B, K, dim)``)."""
    return robustness_signal(f, env, step)[..., 0]


def signal_names(f: Formula) -> set[str]:
    out: set[str] = set()

    def walk_e(e):
        if isinstance(e, Var):
            out.add(e.name)
        elif isinstance(e, (Abs, Norm)):
            walk_e(e.arg)
        elif isinstance(e, Lin):
            for _, sub in e.terms:
                walk_e(sub)

    def walk(g):
        if isinstance(g, Pred):
            walk_e(g.expr)
        for c in children(g):
            walk(c)

    walk(f)
    return out


# ---------------------------------------------------------------------------
# Property templates
# ---------------------------------------------------------------------------

PROPERTY_PARAMS = {
    "matching": ("e", "T_sim"),
    "stabilization": ("eps_r", "T1", "T2", "T3", "T4", "e", "T_sim"),
    "settling": ("eps_r", "T5", "T6", "e_settle", "T_sim"),
    "overshoot": ("eps_r", "T7", "T8", "eps_y", "T_sim"),
}


def build_property(kind: str, params: Mapping[str, float], *, output: str = "y",
                   reference: str = "r", nominal_output: str = "y_nom") -> Formula:
    """Closed STL formula for one of the control property templates.

    The reference step trigger ``|r[t+dt] - r[t]| > eps_r`` reads the one-sample
    shifted signal ``<reference>_next``; ``dt`` is accepted and clamped to one
    sample. The overshoot trigger is signed (increasing steps only).
    """
    if kind not in PROPERTY_PARAMS:
        raise StlError(f"unknown property kind {kind!r}")
    missing = [k for k in PROPERTY_PARAMS[kind] if k not in params]
    if missing:
        raise StlError(f"property {kind!r} missing parameter(s): {', '.join(missing)}")
    unknown = set(params) - set(PROPERTY_PARAMS[kind]) - {"dt"}
    if unknown:
        raise StlError(f"property {kind!r} got unknown parameter(s): {', '.join(sorted(unknown))}")
    p = {k: float(v) for k, v in params.items()}
    y, r = output, reference
    r_next = f"{reference}_next"
    whole = Interval(0.0, p["T_sim"])
    track_err = Abs(diff(y, r))
    step_change = Pred(Abs(diff(r_next, r)), ">", p.get("eps_r", 0.0))
    if kind == "matching":
        return Always(whole, Pred(Abs(diff(y, nominal_output)), "<", p["e"]))
    if kind == "stabilization":
        body = Eventually(Interval(p["T1"], p["T2"]),
                          Always(Interval(p["T3"], p["T4"]), Pred(track_err, "<", p["e"])))
        return Always(whole, Implies(step_change, body))
    if kind == "settling":
        body = Always(Interval(p["T5"], p["T6"]), Pred(track_err, "<", p["e_settle"]))
        return Always(whole, Implies(step_change, body))
    step_up = Pred(diff(r_next, r), ">", p["eps_r"])
    body = Always(Interval(p["T7"], p["T8"]), Pred(diff(y, r), "<", p["eps_y"]))
    return Always(whole, Implies(step_up, body))
