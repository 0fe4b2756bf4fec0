"""Cylinder payoffs ``phi(B_t1, B_t2 - B_t1, ...)`` and their G-expectation.

Payoff text grammar (increments are ``b1 .. bn``)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | 'b' INT | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Functions: ``abs(x)``, ``min(x, y, ...)``, ``max(x, y, ...)``, ``exp(x)``, ``sin(x)``,
``cos(x)``, ``pow(x, k)`` with a non-negative integer literal ``k``, and
``clamp(x, lo, hi)`` with constant bounds. Division is only by nonzero constants,
and ``exp``/``pow`` may only be applied to bounded arguments (wrap variables in
``clamp``). Products of unbounded factors such as ``b1*b1`` are accepted with an
:class:`UnboundedPayoffWarning`: they are Lipschitz on the truncated domain only.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gexpect.gcore import GDriver
from gexpect.gheat import (
    GridError,
    SpaceGrid,
    TimeGrid,
    ValueSurface,
    _interp_x,
    continuation_at_origin,
    solve_gheat_batch,
)

MAX_TIMES = 4


class PayoffError(ValueError):
    pass


class PayoffSyntaxError(PayoffError):
    def __init__(self, message: str, column: int):
        super().__init__(f"syntax error at column {column}: {message}")
        self.column = column


class UnknownIdentifierError(PayoffSyntaxError):
    pass


class LipschitzError(PayoffError):
    def __init__(self, message: str, subtree: "Node"):
        super().__init__(f"{message}: {to_text(subtree)}")
        self.subtree = subtree


class UnboundedPayoffWarning(UserWarning):
    pass


# --- AST ---------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Node", ...]


Node = Num | Var | Neg | Bin | Call

_ARITY = {"abs": (1, 1), "exp": (1, 1), "sin": (1, 1), "cos": (1, 1),
          "min": (2, None), "max": (2, None), "pow": (2, 2), "clamp": (3, 3)}


# --- tokenizer / parser ------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            col = pos + 1 + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise PayoffSyntaxError(f"unexpected character {text[col - 1]!r}", col)
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    toks.append(_Tok("end", "", len(text) + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.k = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.k]

    def take(self) -> _Tok:
        t = self.toks[self.k]
        self.k += 1
        return t

    def expect(self, text: str) -> None:
        t = self.cur
        if t.text != text or t.kind == "end":
            what = "end of input" if t.kind == "end" else repr(t.text)
            raise PayoffSyntaxError(f"expected {text!r}, found {what}", t.col)
        self.take()

    def parse(self) -> Node:
        node = self.expr()
        if self.cur.kind != "end":
            raise PayoffSyntaxError(f"unexpected {self.cur.text!r}", self.cur.col)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.cur.text in ("+", "-") and self.cur.kind == "op":
            op = self.take().text
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.cur.text in ("*", "/") and self.cur.kind == "op":
            op = self.take().text
            node = Bin(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.cur.kind == "op" and self.cur.text == "-":
            self.take()
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Node:
        t = self.cur
        if t.kind == "num":
            self.take()
            return Num(float(t.text))
        if t.kind == "name":
            self.take()
            if self.cur.text == "(" and self.cur.kind == "op":
                if t.text not in _ARITY:
                    raise UnknownIdentifierError(f"unknown function {t.text!r}", t.col)
                self.take()
                args = [self.expr()]
                while self.cur.text == "," and self.cur.kind == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                lo, hi = _ARITY[t.text]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    raise PayoffSyntaxError(f"{t.text} takes {lo}{'' if hi == lo else '+'} arguments, got {len(args)}", t.col)
                return Call(t.text, tuple(args))
            m = re.fullmatch(r"b([1-9][0-9]*)", t.text)
            if not m:
                raise UnknownIdentifierError(f"unknown identifier {t.text!r}", t.col)
            return Var(int(m.group(1)))
        if t.kind == "op" and t.text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if t.kind == "end" else repr(t.text)
        raise PayoffSyntaxError(f"unexpected {what}", t.col)


# --- printer -----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node: Node) -> int:
    if isinstance(node, Bin):
        return _PREC[node.op]
    if isinstance(node, Neg) or (isinstance(node, Num) and node.value < 0):
        return 3
    return 4


def _num_text(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_text(node: Node) -> str:
    """Canonical text: minimal parentheses, single spaces around binary operators."""
    if isinstance(node, Num):
        return _num_text(node.value)
    if isinstance(node, Var):
        return f"b{node.index}"
    if isinstance(node, Neg):
        inner = to_text(node.arg)
        return f"-({inner})" if _prec(node.arg) < 3 else f"-{inner}"
    if isinstance(node, Bin):
        p = _PREC[node.op]
        left = to_text(node.left)
        right = to_text(node.right)
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
        return f"{left} {node.op} {right}"
    return f"{node.name}({', '.join(to_text(a) for a in node.args)})"


# --- analysis ----------------------------------------------------------------


def _max_var(node: Node) -> int:
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Num):
        return 0
    if isinstance(node, Neg):
        return _max_var(node.arg)
    if isinstance(node, Bin):
        return max(_max_var(node.left), _max_var(node.right))
    return max(_max_var(a) for a in node.args)


def _is_const(node: Node) -> bool:
    return _max_var(node) == 0


def _bounded(node: Node) -> bool:
    if _is_const(node):
        return True
    if isinstance(node, Var):
        return False
    if isinstance(node, Neg):
        return _bounded(node.arg)
    if isinstance(node, Bin):
        if node.op == "/":
            return _bounded(node.left)
        return _bounded(node.left) and _bounded(node.right)
    if node.name in ("clamp", "sin", "cos"):
        return True
    if node.name in ("abs", "exp", "min", "max"):
        return all(_bounded(a) for a in node.args)
    if node.name == "pow":
        return _bounded(node.args[0])
    return False


def _validate(node: Node, unbounded_products: list[Node]) -> None:
    if isinstance(node, (Num, Var)):
        return
    if isinstance(node, Neg):
        _validate(node.arg, unbounded_products)
        return
    if isinstance(node, Bin):
        _validate(node.left, unbounded_products)
        _validate(node.right, unbounded_products)
        if node.op == "/":
            if not _is_const(node.right):
                raise LipschitzError("division only by constants", node)
            if _eval(node.right, ()) == 0.0:
                raise LipschitzError("division by zero", node)
        if node.op == "*" and not _is_const(node.left) and not _is_const(node.right):
            if not (_bounded(node.left) and _bounded(node.right)):
                unbounded_products.append(node)
        return
    for a in node.args:
        _validate(a, unbounded_products)
    if node.name == "pow":
        k = node.args[1]
        if not (isinstance(k, Num) and k.value.is_integer() and k.value >= 0):
            raise LipschitzError("pow exponent must be a non-negative integer literal", node)
        if not _bounded(node.args[0]) and k.value > 1:
            raise LipschitzError("pow of an unbounded argument (wrap it in clamp)", node)
    elif node.name == "exp":
        if not _bounded(node.args[0]):
            raise LipschitzError("exp of an unbounded argument (wrap it in clamp)", node)
    elif node.name == "clamp":
        lo, hi = node.args[1], node.args[2]
        if not (_is_const(lo) and _is_const(hi)):
            raise LipschitzError("clamp bounds must be constants", node)
        if _eval(lo, ()) > _eval(hi, ()):
            raise LipschitzError("clamp bounds out of order", node)


# --- evaluation --------------------------------------------------------------


def _eval(node: Node, xs: Sequence):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return xs[node.index - 1]
    if isinstance(node, Neg):
        return -_eval(node.arg, xs)
    if isinstance(node, Bin):
        a = _eval(node.left, xs)
        b = _eval(node.right, xs)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return a / b
    args = [_eval(a, xs) for a in node.args]
    name = node.name
    if name == "abs":
        return np.abs(args[0])
    if name == "min":
        out = args[0]
        for a in args[1:]:
            out = np.minimum(out, a)
        return out
    if name == "max":
        out = args[0]
        for a in args[1:]:
            out = np.maximum(out, a)
        return out
    if name == "exp":
        return np.exp(args[0])
    if name == "sin":
        return np.sin(args[0])
    if name == "cos":
        return np.cos(args[0])
    if name == "pow":
        return np.power(args[0], int(args[1]))
    return np.clip(args[0], args[1], args[2])


@dataclass(frozen=True)
class PayoffExpr:
    """A validated payoff expression; ``arity`` is the largest increment index used."""

    root: Node
    arity: int
    unbounded: bool = False

    @property
    def text(self) -> str:
        return to_text(self.root)

    def __str__(self) -> str:
        return self.text

    def __neg__(self) -> "PayoffExpr":
        return PayoffExpr(Neg(self.root), self.arity, self.unbounded)

    def scaled(self, lam: float) -> "PayoffExpr":
        return PayoffExpr(Bin("*", Num(float(lam)), self.root), self.arity, self.unbounded)

    def __add__(self, other: "PayoffExpr") -> "PayoffExpr":
        return PayoffExpr(Bin("+", self.root, other.root), max(self.arity, other.arity),
                          self.unbounded or other.unbounded)


def parse_payoff(text: str, warn: bool = True) -> PayoffExpr:
    """Parse and validate payoff text; see the module docstring for the grammar."""
    root = _Parser(text).parse()
    products: list[Node] = []
    _validate(root, products)
    if products and warn:
        warnings.warn(
            f"payoff {to_text(root)!r} is not globally Lipschitz ({to_text(products[0])}); "
            "results refer to the truncated space domain",
            UnboundedPayoffWarning,
            stacklevel=2,
        )
    return PayoffExpr(root, _max_var(root), bool(products))


def eval_payoff(expr: PayoffExpr, increments: Sequence, n_vars: int | None = None):
    """Evaluate on increments (floats or broadcastable arrays).

    ``n_vars`` defaults to ``expr.arity``; the number of increments must match it.
    """
    n = expr.arity if n_vars is None else n_vars
    if n < expr.arity:
        raise PayoffError(f"expression uses b{expr.arity} but only {n} variables are declared")
    if len(increments) != n:
        raise PayoffError(f"expected {n} increments, got {len(increments)}")
    xs = [np.asarray(v, dtype=float) if not np.isscalar(v) else float(v) for v in increments]
    out = _eval(expr.root, xs)
    if np.ndim(out) == 0 and all(np.ndim(v) == 0 for v in xs):
        return float(out)
    shape = np.broadcast_shapes(*[np.shape(v) for v in xs]) if xs else ()
    return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()


@dataclass(frozen=True)
class CylinderPayoff:
    """``phi(B_t1, B_t2 - B_t1, ..., B_tn - B_tn-1)`` with ``0 < t1 < ... < tn``."""

    times: tuple[float, ...]
    expr: PayoffExpr

    def __post_init__(self) -> None:
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 1:
            raise PayoffError("need at least one time point")
        if ts[0] <= 0.0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise PayoffError(f"time points must satisfy 0 < t1 < ... < tn, got {ts}")
        if self.expr.arity > len(ts):
            raise PayoffError(f"expression uses b{self.expr.arity} but only {len(ts)} time points given")

    @classmethod
    def from_text(cls, text: str, times: Sequence[float], warn: bool = True) -> "CylinderPayoff":
        return cls(tuple(times), parse_payoff(text, warn=warn))

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def interval_starts(self) -> tuple[float, ...]:
        return (0.0,) + self.times[:-1]

    def evaluate(self, increments: Sequence):
        return eval_payoff(self.expr, increments, n_vars=self.n)

    def negated(self) -> "CylinderPayoff":
        return CylinderPayoff(self.times, -self.expr)


# --- nested backward recursion ----------------------------------------------


@dataclass(eq=False)
class SliceFamily:
    """Solutions of one interval's PDE, one slice per node tuple of earlier increments.

    Interval ``k`` (1-based) covers ``[t_{k-1}, t_k]``; its slices are indexed by
    ``k - 1`` grid-node indices. Slices are re-solved on demand, so only the
    requested time layers are ever held in memory.
    """

    index: int
    driver: GDriver
    time_grid: TimeGrid
    space_grid: SpaceGrid
    _terminal_rows: object = field(repr=False)  # callable: keys (m, k-1) -> (m, nx)
    workers: int = 1

    @property
    def n_params(self) -> int:
        return self.index - 1

    def terminal_rows(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[1] != self.n_params:
            raise ValueError(f"keys must have shape (m, {self.n_params}), got {keys.shape}")
        return self._terminal_rows(keys)

    def materialize(self, keys: np.ndarray, keep_times=None):
        """Batch-solve the slices for ``keys`` (shape ``(m, k-1)``)."""
        rows = self.terminal_rows(keys)
        return solve_gheat_batch(self.driver, rows, self.time_grid, self.space_grid,
                                 keep_times=keep_times, workers=self.workers)

    def surface(self, key: Sequence[int] = (), keep_times=None) -> ValueSurface:
        key = tuple(int(k) for k in key)
        if len(key) != self.n_params:
            raise ValueError(f"interval {self.index} slices take {self.n_params} indices, got {len(key)}")
        s = self.materialize(np.array([key], dtype=np.int64).reshape(1, self.n_params), keep_times)
        return ValueSurface(self.time_grid, self.space_grid, s.times, s.v[0], s.vx[0], s.vxx[0])


@dataclass(eq=False)
class NestedSolution:
    """``E_G[xi]`` together with the per-interval slice families used to compute it."""

    value: float
    surfaces: list[SliceFamily]
    driver: GDriver
    payoff: CylinderPayoff
    space_grid: SpaceGrid

    @property
    def dx(self) -> float:
        return self.space_grid.dx


def interval_time_grids(driver: GDriver, cp: CylinderPayoff, sg: SpaceGrid, cfl: float = 0.5,
                        nt: int | None = None) -> list[TimeGrid]:
    """Per-interval time grids; ``nt`` (total over ``[0, tn]``) is split by interval length."""
    grids = []
    for a, b in zip(cp.interval_starts, cp.times):
        if nt is None:
            grids.append(TimeGrid.for_cfl(driver, sg, a, b, cfl))
        else:
            grids.append(TimeGrid(a, b, max(1, math.ceil(nt * (b - a) / cp.horizon - 1e-9))))
    return grids


def _grid_product(sg: SpaceGrid, n_params: int, keys: np.ndarray) -> list[np.ndarray]:
    xs = sg.nodes
    return [xs[keys[:, j]][:, None] for j in range(n_params)]


def nested_expectation(driver: GDriver, cp: CylinderPayoff, sg: SpaceGrid | None = None,
                       cfl: float = 0.5, nt: int | None = None, workers: int = 1,
                       max_times: int = MAX_TIMES) -> NestedSolution:
    """``E_G[phi(B_t1, ..., B_tn - B_tn-1)]`` by backward recursion over the intervals.

    On the last interval the G-heat equation is solved with terminal
    ``phi(y, x)`` for every node tuple ``y`` of earlier increments; its value at
    ``x = 0`` becomes the terminal data (in the last earlier increment) of the
    interval before, and so on down to ``[0, t1]``.
    """
    if cp.n > max_times:
        raise PayoffError(f"{cp.n} time points exceeds the cap of {max_times}")
    sg = sg if sg is not None else SpaceGrid.default(driver, cp.horizon)
    tgs = interval_time_grids(driver, cp, sg, cfl, nt)
    nx = sg.n_points
    xs = sg.nodes
    n = cp.n

    def last_rows(keys: np.ndarray) -> np.ndarray:
        params = _grid_product(sg, n - 1, keys)
        vals = cp.evaluate(params + [xs[None, :]])
        return np.broadcast_to(vals, (keys.shape[0], nx)).astype(float, copy=True)

    families: list[SliceFamily] = [None] * n  # type: ignore[list-item]
    families[n - 1] = SliceFamily(n, driver, tgs[n - 1], sg, last_rows, workers)
    for k in range(n, 1, -1):
        fam = families[k - 1]
        all_keys = np.stack(np.unravel_index(np.arange(nx ** (k - 1)), (nx,) * (k - 1)), axis=1)
        cont = continuation_at_origin(driver, fam.terminal_rows(all_keys), fam.time_grid, sg,
                                      workers=workers).reshape((nx,) * (k - 1))

        def rows(keys: np.ndarray, cont=cont, m=k - 2) -> np.ndarray:
            if m == 0:
                return np.broadcast_to(cont, (keys.shape[0], nx)).copy()
            return cont[tuple(keys[:, j] for j in range(m))].copy()

        families[k - 2] = SliceFamily(k - 1, driver, tgs[k - 2], sg, rows, workers)

    first = families[0]
    s = first.materialize(np.zeros((1, 0), dtype=np.int64), keep_times=[0.0])
    value = float(_interp_x(sg, s.v[0, 0], 0.0))
    return NestedSolution(value, families, driver, cp, sg)


__all__ = [
    "PayoffError",
    "PayoffSyntaxError",
    "UnknownIdentifierError",
    "LipschitzError",
    "UnboundedPayoffWarning",
    "PayoffExpr",
    "parse_payoff",
    "to_text",
    "eval_payoff",
    "CylinderPayoff",
    "SliceFamily",
    "NestedSolution",
    "interval_time_grids",
    "nested_expectation",
]
