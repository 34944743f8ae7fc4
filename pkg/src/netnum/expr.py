"""Symbolic expression trees: the substrate every other module rewrites.

An Expr is an immutable tree over named, optionally indexed variables.
Supported node kinds:

    const   -- finite real number
    var     -- variable; identity is the (base, index) pair
    add     -- n-ary sum of children
    mul     -- n-ary product of children
    neg     -- unary negation
    div     -- quotient of two children
    func    -- unary function from FUNCTIONS (log2, ln, sqrt, exp10)
    bigsum  -- symbolic sum of one body over one index-set symbol

A var's index is either None (plain scalar), an int (a concrete entity,
rendered base_NN), or a string naming the index set of an enclosing
bigsum that binds it.  expand_sums() turns bigsums into explicit sums by
substituting concrete indices for the symbolic ones.

Construction goes through the factory functions (const, var, add, ...),
which fold only 0/1 identities so that rewrite output stays structurally
predictable.  No general simplification is attempted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

Env = dict[str, float]


class ExprError(Exception):
    """Base class for expression errors."""


class UnboundVariable(ExprError):
    def __init__(self, name: str):
        super().__init__(f"unbound variable: {name}")
        self.name = name


class DomainError(ExprError):
    pass


class UnsupportedNode(ExprError):
    def __init__(self, kind: str):
        super().__init__(f"unsupported node kind: {kind}")
        self.kind = kind


class UnboundIndexSet(ExprError):
    def __init__(self, symbol: str):
        super().__init__(f"no binding for index set: {symbol}")
        self.symbol = symbol


# name -> (evaluator, domain check message or None)
_FUNC_EVAL: dict[str, Callable[[float], float]] = {
    "log2": math.log2,
    "ln": math.log,
    "sqrt": math.sqrt,
    "exp10": lambda x: 10.0**x,
}


@dataclass(frozen=True)
class Expr:
    kind: str
    children: tuple["Expr", ...] = ()
    value: float = 0.0
    # var: base name; func: function name; bigsum: index-set symbol
    name: str = ""
    # var only: None | int (concrete) | str (symbolic, bound by a bigsum)
    index: int | str | None = field(default=None)

    def __str__(self) -> str:
        return render(self)


def const(v: float) -> Expr:
    if not math.isfinite(v):
        raise DomainError(f"non-finite constant: {v}")
    return Expr("const", value=float(v))


ZERO = const(0.0)
ONE = const(1.0)


def var(base: str, index: int | str | None = None) -> Expr:
    return Expr("var", name=base, index=index)


def var_name(base: str, index: int | str | None = None) -> str:
    """Canonical identifier of a variable: base, or base_NN for int index.

    Symbolic indices render bare; the enclosing bigsum carries the set name.
    """
    if isinstance(index, int):
        return f"{base}_{index:02d}"
    return base


def _is_const(e: Expr, v: float) -> bool:
    return e.kind == "const" and e.value == v


def add(*terms: Expr) -> Expr:
    flat: list[Expr] = []
    for t in terms:
        if t.kind == "add":
            flat.extend(t.children)
        elif not _is_const(t, 0.0):
            flat.append(t)
    if not flat:
        return ZERO
    if len(flat) == 1:
        return flat[0]
    return Expr("add", children=tuple(flat))


def mul(*factors: Expr) -> Expr:
    flat: list[Expr] = []
    for f in factors:
        if f.kind == "mul":
            flat.extend(f.children)
        elif _is_const(f, 0.0):
            return ZERO
        elif not _is_const(f, 1.0):
            flat.append(f)
    if not flat:
        return ONE
    if len(flat) == 1:
        return flat[0]
    return Expr("mul", children=tuple(flat))


def neg(e: Expr) -> Expr:
    if e.kind == "const" and e.value == 0.0:
        return ZERO
    if e.kind == "neg":
        return e.children[0]
    return Expr("neg", children=(e,))


def sub(a: Expr, b: Expr) -> Expr:
    return add(a, neg(b))


def div(num: Expr, den: Expr) -> Expr:
    if _is_const(den, 1.0):
        return num
    if _is_const(num, 0.0):
        return ZERO
    return Expr("div", children=(num, den))


def func(fname: str, arg: Expr) -> Expr:
    if fname not in _FUNC_EVAL:
        raise UnsupportedNode(f"func:{fname}")
    return Expr("func", children=(arg,), name=fname)


def log2(e: Expr) -> Expr:
    return func("log2", e)


def ln(e: Expr) -> Expr:
    return func("ln", e)


def sqrt(e: Expr) -> Expr:
    return func("sqrt", e)


def exp10(e: Expr) -> Expr:
    return func("exp10", e)


def bigsum(set_symbol: str, body: Expr) -> Expr:
    return Expr("bigsum", children=(body,), name=set_symbol)


# ---------------------------------------------------------------------------
# evaluation

def eval_expr(e: Expr, env: Env) -> float:
    """Evaluate e under env; every free variable must be bound."""
    k = e.kind
    if k == "const":
        return e.value
    if k == "var":
        name = var_name(e.name, e.index)
        try:
            return env[name]
        except KeyError:
            raise UnboundVariable(name) from None
    if k == "add":
        return sum(eval_expr(c, env) for c in e.children)
    if k == "mul":
        r = 1.0
        for c in e.children:
            r *= eval_expr(c, env)
        return r
    if k == "neg":
        return -eval_expr(e.children[0], env)
    if k == "div":
        d = eval_expr(e.children[1], env)
        if d == 0.0:
            raise DomainError("division by zero")
        return eval_expr(e.children[0], env) / d
    if k == "func":
        x = eval_expr(e.children[0], env)
        if e.name in ("log2", "ln") and x <= 0.0:
            raise DomainError(f"{e.name} of non-positive value {x}")
        if e.name == "sqrt" and x < 0.0:
            raise DomainError(f"sqrt of negative value {x}")
        return _FUNC_EVAL[e.name](x)
    if k == "bigsum":
        raise UnboundIndexSet(e.name)
    raise UnsupportedNode(k)


def compile_expr(e: Expr) -> Callable[[Env], float]:
    """Compile to a closure tree; same semantics as eval_expr, much faster
    when one expression is evaluated many times (simulation inner loops)."""
    k = e.kind
    if k == "const":
        v = e.value
        return lambda env: v
    if k == "var":
        name = var_name(e.name, e.index)

        def _var(env: Env, _n=name) -> float:
            try:
                return env[_n]
            except KeyError:
                raise UnboundVariable(_n) from None

        return _var
    if k == "add":
        parts = [compile_expr(c) for c in e.children]
        return lambda env: sum(p(env) for p in parts)
    if k == "mul":
        parts = [compile_expr(c) for c in e.children]

        def _mul(env: Env) -> float:
            r = 1.0
            for p in parts:
                r *= p(env)
            return r

        return _mul
    if k == "neg":
        inner = compile_expr(e.children[0])
        return lambda env: -inner(env)
    if k == "div":
        num = compile_expr(e.children[0])
        den = compile_expr(e.children[1])

        def _div(env: Env) -> float:
            d = den(env)
            if d == 0.0:
                raise DomainError("division by zero")
            return num(env) / d

        return _div
    if k == "func":
        inner = compile_expr(e.children[0])
        fn = _FUNC_EVAL[e.name]
        fname = e.name

        def _fn(env: Env) -> float:
            x = inner(env)
            if fname in ("log2", "ln") and x <= 0.0:
                raise DomainError(f"{fname} of non-positive value {x}")
            if fname == "sqrt" and x < 0.0:
                raise DomainError(f"sqrt of negative value {x}")
            return fn(x)

        return _fn
    if k == "bigsum":
        raise UnboundIndexSet(e.name)
    raise UnsupportedNode(k)


# ---------------------------------------------------------------------------
# differentiation

def differentiate(e: Expr, wrt: str) -> Expr:
    """Exact symbolic partial derivative of e with respect to the variable
    whose canonical identifier is `wrt`."""
    k = e.kind
    if k == "const":
        return ZERO
    if k == "var":
        return ONE if var_name(e.name, e.index) == wrt else ZERO
    if k == "add":
        return add(*(differentiate(c, wrt) for c in e.children))
    if k == "neg":
        return neg(differentiate(e.children[0], wrt))
    if k == "mul":
        terms = []
        cs = e.children
        for i in range(len(cs)):
            di = differentiate(cs[i], wrt)
            if _is_const(di, 0.0):
                continue
            terms.append(mul(*cs[:i], di, *cs[i + 1:]))
        return add(*terms)
    if k == "div":
        a, b = e.children
        da, db = differentiate(a, wrt), differentiate(b, wrt)
        return div(add(mul(da, b), neg(mul(a, db))), mul(b, b))
    if k == "func":
        u = e.children[0]
        du = differentiate(u, wrt)
        if _is_const(du, 0.0):
            return ZERO
        if e.name == "log2":
            return div(du, mul(const(math.log(2.0)), u))
        if e.name == "ln":
            return div(du, u)
        if e.name == "sqrt":
            return div(du, mul(const(2.0), sqrt(u)))
        if e.name == "exp10":
            return mul(const(math.log(10.0)), exp10(u), du)
    raise UnsupportedNode(k)


# ---------------------------------------------------------------------------
# structural rewrites

def bind_index(e: Expr, symbol: str, index: int) -> Expr:
    """Replace the symbolic index `symbol` on every variable with a
    concrete index."""
    if e.kind == "var":
        if e.index == symbol:
            return var(e.name, index)
        return e
    if not e.children:
        return e
    return Expr(e.kind, tuple(bind_index(c, symbol, index) for c in e.children),
                e.value, e.name, e.index)


def expand_sums(e: Expr, bindings: Mapping[str, Iterable[int]]) -> Expr:
    """Expand every bigsum by substituting its index set's members in
    binding order.  The result contains no bigsum nodes."""
    if e.kind == "bigsum":
        if e.name not in bindings:
            raise UnboundIndexSet(e.name)
        body = e.children[0]
        terms = [expand_sums(bind_index(body, e.name, i), bindings)
                 for i in bindings[e.name]]
        return add(*terms)
    if not e.children:
        return e
    return Expr(e.kind, tuple(expand_sums(c, bindings) for c in e.children),
                e.value, e.name, e.index)


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables (matched by canonical identifier) with expressions."""
    if e.kind == "var":
        return mapping.get(var_name(e.name, e.index), e)
    if not e.children:
        return e
    return Expr(e.kind, tuple(substitute(c, mapping) for c in e.children),
                e.value, e.name, e.index)


def level1_terms(e: Expr) -> list[Expr]:
    """Additive terms whose sum is algebraically equal to e.

    Negations are carried into terms; a negated sum is distributed so
    that no returned term has an additive root.
    """
    if e.kind == "add":
        out: list[Expr] = []
        for c in e.children:
            out.extend(level1_terms(c))
        return out
    if e.kind == "neg" and e.children[0].kind == "add":
        return [neg(t) for t in level1_terms(e.children[0])]
    return [e]


def free_vars(e: Expr) -> set[str]:
    """Canonical identifiers of every variable occurring in e."""
    if e.kind == "var":
        return {var_name(e.name, e.index)}
    out: set[str] = set()
    for c in e.children:
        out |= free_vars(c)
    return out


def contains_bigsum(e: Expr) -> bool:
    if e.kind == "bigsum":
        return True
    return any(contains_bigsum(c) for c in e.children)


# ---------------------------------------------------------------------------
# canonical rendering

_PREC = {"add": 1, "neg": 2, "mul": 3, "div": 3}
_ATOM = 4


def _prec(e: Expr) -> int:
    return _PREC.get(e.kind, _ATOM)


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def render(e: Expr) -> str:
    """Canonical text form: infix, minimally parenthesized, sum(S: body)
    for bigsums.  Used by golden tests and CLI dumps."""
    k = e.kind
    if k == "const":
        return _fmt_const(e.value)
    if k == "var":
        return var_name(e.name, e.index)
    if k == "add":
        parts = []
        for i, c in enumerate(e.children):
            if c.kind == "neg":
                inner = render(c.children[0])
                if _prec(c.children[0]) < _PREC["neg"]:
                    inner = f"({inner})"
                parts.append(f"- {inner}" if i else f"-{inner}")
            else:
                s = render(c)
                parts.append(f"+ {s}" if i else s)
        return " ".join(parts)
    if k == "neg":
        inner = render(e.children[0])
        if _prec(e.children[0]) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    if k == "mul":
        parts = []
        for c in e.children:
            s = render(c)
            if _prec(c) < _PREC["mul"]:
                s = f"({s})"
            parts.append(s)
        return "*".join(parts)
    if k == "div":
        num, den = e.children
        ns = render(num)
        if _prec(num) < _PREC["div"]:
            ns = f"({ns})"
        ds = render(den)
        if _prec(den) <= _PREC["div"]:
            ds = f"({ds})"
        return f"{ns}/{ds}"
    if k == "func":
        return f"{e.name}({render(e.children[0])})"
    if k == "bigsum":
        return f"sum({e.name}: {render(e.children[0])})"
    raise UnsupportedNode(k)
