"""Max/min/plus expression trees.

Expressions are immutable and may share sub-expressions, so a network's
unrolled completion time is stored as a DAG even when its tree form is
exponentially large.  All traversals run over the DAG in post-order with
per-node memoization; none of them recurse.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

MAX_ORDER_STAT_ITEMS = 20
DEFAULT_SIZE_CAP = 100_000


class ExprError(Exception):
    pass


class UnboundVariableError(ExprError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"no value assigned to variate {self.name!r}"


class SizeCapExceeded(ExprError):
    pass


class NonIntegerConstant(ExprError):
    pass


class Expr:
    __slots__ = ("_leaves",)
    kind = ""

    @property
    def children(self) -> tuple["Expr", ...]:
        return ()

    def leaf_count(self) -> int:
        """Number of leaves of the expanded tree (shared nodes counted per use)."""
        if self._leaves is None:
            for node in postorder(self):
                if node._leaves is None:
                    node._leaves = sum(c._leaves for c in node.children) if node.children else 1
        return self._leaves

    def variables(self) -> set[str]:
        return {n.name for n in postorder(self) if isinstance(n, Var)}

    def __str__(self) -> str:
        return to_sexpr(self)


class Var(Expr):
    __slots__ = ("name",)
    kind = "var"

    def __init__(self, name: str):
        self.name = name
        self._leaves = 1

    def __repr__(self) -> str:
        return f"Var({self.name!r})"

    def __eq__(self, other):
        return isinstance(other, Var) and other.name == self.name

    def __hash__(self):
        return hash(("var", self.name))


class Const(Expr):
    __slots__ = ("value",)
    kind = "const"

    def __init__(self, value: Union[int, Fraction]):
        value = Fraction(value)
        self.value = int(value) if value.denominator == 1 else value
        self._leaves = 1

    def __repr__(self) -> str:
        return f"Const({self.value!r})"

    def __eq__(self, other):
        return isinstance(other, Const) and other.value == self.value

    def __hash__(self):
        return hash(("const", self.value))


class _Op(Expr):
    __slots__ = ("_children", "_hash")

    def __init__(self, children: Sequence[Expr]):
        if len(children) < 2:
            raise ExprError(f"{self.kind} needs at least two operands")
        self._children = tuple(children)
        self._leaves = None
        self._hash = None

    @property
    def children(self) -> tuple[Expr, ...]:
        return self._children

    def __repr__(self) -> str:
        return f"{type(self).__name__}{self._children!r}"

    def __eq__(self, other):
        if self is other:
            return True
        return type(other) is type(self) and other._children == self._children

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.kind, self._children))
        return self._hash


class Max(_Op):
    __slots__ = ()
    kind = "max"


class Min(_Op):
    __slots__ = ()
    kind = "min"


class Sum(_Op):
    __slots__ = ()
    kind = "+"


ExprLike = Union[Expr, str, int]


def as_expr(x: ExprLike) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        return Var(x)
    if isinstance(x, (int, Fraction)):
        return Const(x)
    raise TypeError(f"cannot build an expression from {x!r}")


def _build(cls, items: Iterable[ExprLike]) -> Expr:
    children = [as_expr(x) for x in items]
    if not children:
        raise ExprError(f"{cls.kind} of nothing")
    if len(children) == 1:
        return children[0]
    return cls(children)


def maximum(*items: ExprLike) -> Expr:
    return _build(Max, items)


def minimum(*items: ExprLike) -> Expr:
    return _build(Min, items)


def add(*items: ExprLike) -> Expr:
    return _build(Sum, items)


def postorder(root: Expr) -> list[Expr]:
    """Distinct nodes of the DAG under ``root``, children before parents."""
    seen: set[int] = set()
    out: list[Expr] = []
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            out.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in reversed(node.children):
            if id(child) not in seen:
                stack.append((child, False))
    return out


def evaluate(e: Expr, assignment: Mapping[str, float]):
    """Value of ``e`` with every variate replaced by ``assignment[name]``.

    Values may be Python numbers or equally shaped numpy arrays (one entry per
    replication).  Integer inputs give exact integer results.
    """
    values: dict[int, object] = {}
    for node in postorder(e):
        if isinstance(node, Var):
            try:
                values[id(node)] = assignment[node.name]
            except KeyError:
                raise UnboundVariableError(node.name) from None
        elif isinstance(node, Const):
            values[id(node)] = node.value
        else:
            vals = [values[id(c)] for c in node.children]
            if isinstance(node, Sum):
                acc = vals[0]
                for v in vals[1:]:
                    acc = acc + v
            elif isinstance(node, Max):
                acc = vals[0]
                for v in vals[1:]:
                    acc = np.maximum(acc, v) if _is_array(acc, v) else max(acc, v)
            else:
                acc = vals[0]
                for v in vals[1:]:
                    acc = np.minimum(acc, v) if _is_array(acc, v) else min(acc, v)
            values[id(node)] = acc
    return values[id(e)]


def _is_array(a, b) -> bool:
    return isinstance(a, np.ndarray) or isinstance(b, np.ndarray)


def path_derivative(
    e: Expr,
    assignment: Mapping[str, float],
    derivs: Mapping[str, np.ndarray],
    dim: int | None = None,
) -> np.ndarray:
    """Sample gradient of ``e`` by the chain rule along the realized path.

    A max/min node passes on the gradient of the child attaining it; on an exact
    tie the lowest-index child wins.  Variates missing from ``derivs`` are
    treated as parameter-free.
    """
    if dim is None:
        dim = len(next(iter(derivs.values()))) if derivs else 0
    zero = np.zeros(dim)
    values: dict[int, float] = {}
    grads: dict[int, np.ndarray] = {}
    for node in postorder(e):
        key = id(node)
        if isinstance(node, Var):
            try:
                values[key] = assignment[node.name]
            except KeyError:
                raise UnboundVariableError(node.name) from None
            g = derivs.get(node.name)
            grads[key] = zero if g is None else np.asarray(g, dtype=float)
        elif isinstance(node, Const):
            values[key] = node.value
            grads[key] = zero
        elif isinstance(node, Sum):
            values[key] = sum(values[id(c)] for c in node.children)
            grads[key] = sum((grads[id(c)] for c in node.children), zero)
        else:
            is_max = isinstance(node, Max)
            child = node.children[0]
            for c in node.children[1:]:
                v, best = values[id(c)], values[id(child)]
                if (v > best) if is_max else (v < best):
                    child = c
            values[key] = values[id(child)]
            grads[key] = grads[id(child)]
    return np.array(grads[id(e)], dtype=float)


def order_statistic_expr(items: Sequence[ExprLike], k: int) -> Expr:
    """Expression for the k-th smallest of ``items`` (1-based): the minimum over
    all k-subsets of the subset maximum."""
    n = len(items)
    if not 1 <= k <= n:
        raise ValueError(f"order statistic k={k} outside 1..{n}")
    if n > MAX_ORDER_STAT_ITEMS:
        raise SizeCapExceeded(f"order statistic over {n} items (limit {MAX_ORDER_STAT_ITEMS})")
    exprs = [as_expr(x) for x in items]
    return minimum(*(maximum(*subset) for subset in itertools.combinations(exprs, k)))


# --------------------------------------------------------------------------
# canonical max-min-linear form


@dataclass(frozen=True)
class LinearTerm:
    """``const + sum(coef * x)`` with integer coefficients."""

    coeffs: tuple[tuple[str, int], ...]
    const: int = 0

    def __add__(self, other: "LinearTerm") -> "LinearTerm":
        acc = dict(self.coeffs)
        for name, c in other.coeffs:
            acc[name] = acc.get(name, 0) + c
        return LinearTerm(tuple(sorted((k, v) for k, v in acc.items() if v)), self.const + other.const)

    def evaluate(self, assignment: Mapping[str, float]):
        total = self.const
        for name, c in self.coeffs:
            try:
                total = total + c * assignment[name]
            except KeyError:
                raise UnboundVariableError(name) from None
        return total

    def __str__(self) -> str:
        parts = [name if c == 1 else f"{c}*{name}" for name, c in self.coeffs]
        if self.const or not parts:
            parts.append(str(self.const))
        return " + ".join(parts)


@dataclass(frozen=True)
class CanonicalForm:
    """``max_i min_{j in J_i} term_ij``; ``groups[i]`` holds the terms of J_i."""

    groups: tuple[tuple[LinearTerm, ...], ...]

    def evaluate(self, assignment: Mapping[str, float]):
        return max(min(t.evaluate(assignment) for t in group) for group in self.groups)

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.groups)

    def coefficient(self, i: int, j: int, name: str) -> int:
        return dict(self.groups[i][j].coeffs).get(name, 0)

    def __str__(self) -> str:
        return " v ".join("(" + " ^ ".join(f"[{t}]" for t in g) + ")" for g in self.groups)


def _dedup(items):
    return tuple(dict.fromkeys(items))


def canonicalize(e: Expr, size_cap: int = DEFAULT_SIZE_CAP) -> CanonicalForm:
    """Rewrite ``e`` as a max of mins of integer linear forms.

    Sums are pushed inside max/min by distributivity, then min is distributed
    over max.  Repeated terms inside one min (and repeated min-groups) are
    merged; nothing else is pruned.
    """
    forms: dict[int, tuple[tuple[LinearTerm, ...], ...]] = {}

    def check(n: int):
        if n > size_cap:
            raise SizeCapExceeded(f"canonical form would hold {n} terms (cap {size_cap})")

    for node in postorder(e):
        if isinstance(node, Var):
            form = ((LinearTerm(((node.name, 1),)),),)
        elif isinstance(node, Const):
            if not isinstance(node.value, int):
                raise NonIntegerConstant(f"constant {node.value} is not an integer")
            form = ((LinearTerm((), node.value),),)
        else:
            parts = [forms[id(c)] for c in node.children]
            form = parts[0]
            for other in parts[1:]:
                if isinstance(node, Max):
                    check(sum(map(len, form)) + sum(map(len, other)))
                    form = _dedup(form + other)
                elif isinstance(node, Min):
                    check(sum(len(a) + len(b) for a in form for b in other))
                    form = _dedup(_dedup(a + b) for a in form for b in other)
                else:
                    check(sum(len(a) * len(b) for a in form for b in other))
                    form = _dedup(_dedup(s + t for s in a for t in b) for a in form for b in other)
        forms[id(node)] = form
    return CanonicalForm(forms[id(e)])


# --------------------------------------------------------------------------
# S-expression text form

_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")
_OPS = {"max": Max, "min": Min, "+": Sum}


def to_sexpr(e: Expr) -> str:
    text: dict[int, str] = {}
    for node in postorder(e):
        if isinstance(node, Var):
            text[id(node)] = node.name
        elif isinstance(node, Const):
            text[id(node)] = str(node.value)
        else:
            text[id(node)] = "(" + " ".join([node.kind] + [text[id(c)] for c in node.children]) + ")"
    return text[id(e)]


def parse_sexpr(text: str) -> Expr:
    tokens = _TOKEN.findall(text)
    if not tokens or "".join(tokens) != re.sub(r"\s+", "", text):
        raise ExprError(f"cannot tokenize {text!r}")
    stack: list[list] = []
    result = None
    for tok in tokens:
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if not stack or not stack[-1]:
                raise ExprError("unbalanced or empty parentheses")
            op, *args = stack.pop()
            if op not in _OPS or not isinstance(op, str):
                raise ExprError(f"unknown operator {op!r}")
            node = _build(_OPS[op], args)
            if stack:
                stack[-1].append(node)
            elif result is None:
                result = node
            else:
                raise ExprError("trailing input after expression")
        else:
            atom: object
            if stack and not stack[-1]:
                atom = tok
            else:
                atom = _atom(tok)
            if stack:
                stack[-1].append(atom)
            elif result is None:
                result = atom
            else:
                raise ExprError("trailing input after expression")
    if stack or result is None:
        raise ExprError("unbalanced parentheses")
    if isinstance(result, str):
        raise ExprError(f"bare operator {result!r}")
    return result


def _atom(tok: str) -> Expr:
    if re.fullmatch(r"-?\d+", tok):
        return Const(int(tok))
    if re.fullmatch(r"-?\d+/\d+", tok):
        return Const(Fraction(tok))
    return Var(tok)
