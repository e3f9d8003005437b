"""Coefficient expression mini-language.

Small arithmetic grammar over named variables, with exact symbolic
differentiation and compilation to fast numpy callables:

    expr   := term (('+'|'-') term)*
    term   := unary (('*'|'/') unary)*
    unary  := '-' unary | power
    power  := atom (('^'|'**') unary)?
    atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

Recognised unary functions: exp, log, sin, cos, sqrt.  ASTs are plain
nested tuples: ('num', v), ('var', name), ('neg', a), ('call', fn, a)
and ('add'|'sub'|'mul'|'div'|'pow', a, b).  `parse` and `format_expr`
are mutually stable: parse(format_expr(t)) == t for every AST t, so
parse -> print -> parse is a fixed point.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "DomainEvalError",
    "parse",
    "format_expr",
    "differentiate",
    "simplify",
    "evaluate",
    "compile_expr",
    "free_variables",
]

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt")

_BINOPS = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


class ExprError(ValueError):
    """Base class for expression-language failures."""


class ExprSyntaxError(ExprError):
    """Malformed source text.  `offset` is the 1-based byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnknownIdentifierError(ExprError):
    """Identifier outside the declared variable set."""


class DomainEvalError(ExprError):
    """Numeric evaluation hit a singularity; carries the subexpression."""

    def __init__(self, message: str, subexpr: tuple):
        super().__init__(f"{message} in '{format_expr(subexpr)}'")
        self.subexpr = subexpr


# --------------------------------------------------------------------------
# Tokenizer / parser
# --------------------------------------------------------------------------

def _tokenize(source: str) -> list[tuple[str, str, int]]:
    """Return (kind, text, offset) tokens; offsets are 1-based."""
    tokens = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            seen_exp = False
            while j < n and (source[j].isdigit() or source[j] == "."
                             or source[j] in "eE"
                             or (seen_exp and source[j] in "+-" and source[j - 1] in "eE")):
                if source[j] in "eE":
                    # only an exponent if followed by digit or sign+digit
                    k = j + 1
                    if k < n and source[k] in "+-":
                        k += 1
                    if k >= n or not source[k].isdigit():
                        break
                    seen_exp = True
                j += 1
            tokens.append(("num", source[i:j], i + 1))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(("ident", source[i:j], i + 1))
            i = j
            continue
        if source.startswith("**", i):
            tokens.append(("op", "^", i + 1))
            i += 2
            continue
        if c in "+-*/^()":
            tokens.append(("op", c, i + 1))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", i + 1)
    tokens.append(("end", "", n + 1))
    return tokens


class _Parser:
    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.pos = 0
        self.variables = frozenset(variables)

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, text):
        kind, tok, off = self.peek()
        if kind != "op" or tok != text:
            raise ExprSyntaxError(f"expected {text!r}", off)
        return self.next()

    def parse_expr(self):
        node = self.parse_term()
        while True:
            kind, tok, _ = self.peek()
            if kind == "op" and tok in "+-":
                self.next()
                rhs = self.parse_term()
                node = ("add" if tok == "+" else "sub", node, rhs)
            else:
                return node

    def parse_term(self):
        node = self.parse_unary()
        while True:
            kind, tok, _ = self.peek()
            if kind == "op" and tok in "*/":
                self.next()
                rhs = self.parse_unary()
                node = ("mul" if tok == "*" else "div", node, rhs)
            else:
                return node

    def parse_unary(self):
        kind, tok, _ = self.peek()
        if kind == "op" and tok == "-":
            self.next()
            return ("neg", self.parse_unary())
        if kind == "op" and tok == "+":
            self.next()
            return self.parse_unary()
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        kind, tok, _ = self.peek()
        if kind == "op" and tok == "^":
            self.next()
            return ("pow", base, self.parse_unary())
        return base

    def parse_atom(self):
        kind, tok, off = self.next()
        if kind == "num":
            return ("num", float(tok))
        if kind == "ident":
            nxt_kind, nxt_tok, _ = self.peek()
            if nxt_kind == "op" and nxt_tok == "(":
                if tok not in FUNCTIONS:
                    raise UnknownIdentifierError(
                        f"unknown function {tok!r} (offset {off}); "
                        f"known: {', '.join(FUNCTIONS)}")
                self.next()
                arg = self.parse_expr()
                self.expect_op(")")
                return ("call", tok, arg)
            if tok not in self.variables:
                raise UnknownIdentifierError(
                    f"unknown identifier {tok!r} (offset {off}); "
                    f"declared: {', '.join(sorted(self.variables))}")
            return ("var", tok)
        if kind == "op" and tok == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        raise ExprSyntaxError("expected a number, variable, or '('", off)


def parse(source: str, variables: Iterable[str]) -> tuple:
    """Parse `source` into an AST closed over `variables`."""
    parser = _Parser(_tokenize(source), variables)
    node = parser.parse_expr()
    kind, _, off = parser.peek()
    if kind != "end":
        raise ExprSyntaxError("unexpected trailing input", off)
    return node


def free_variables(node: tuple) -> set[str]:
    match node:
        case ("num", _):
            return set()
        case ("var", name):
            return {name}
        case ("neg", a) | ("call", _, a):
            return free_variables(a)
        case (_, a, b):
            return free_variables(a) | free_variables(b)
    raise ExprError(f"malformed AST node {node!r}")


# --------------------------------------------------------------------------
# Printing
# --------------------------------------------------------------------------

_PRECEDENCE = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def format_expr(node: tuple, parent_prec: int = 0) -> str:
    """Render an AST with minimal parentheses; output re-parses to the same AST."""
    match node:
        case ("num", v):
            text = _fmt_num(v)
            # a bare negative literal binds like unary minus when re-parsed
            if v < 0 and parent_prec > _PRECEDENCE["neg"]:
                return f"({text})"
            return text
        case ("var", name):
            return name
        case ("call", fn, a):
            return f"{fn}({format_expr(a)})"
        case ("neg", a):
            text = "-" + format_expr(a, _PRECEDENCE["neg"])
            return f"({text})" if parent_prec > _PRECEDENCE["neg"] else text
        case (op, a, b):
            prec = _PRECEDENCE[op]
            if op == "pow":  # right-associative
                left, rhs = format_expr(a, prec + 1), format_expr(b, prec)
            else:  # left-associative; right operand re-groups without parens
                left, rhs = format_expr(a, prec), format_expr(b, prec + 1)
            text = f"{left} {_BINOPS[op]} {rhs}"
            return f"({text})" if prec < parent_prec else text
    raise ExprError(f"malformed AST node {node!r}")


# --------------------------------------------------------------------------
# Simplification and differentiation
# --------------------------------------------------------------------------

def _is_num(node, value=None):
    return node[0] == "num" and (value is None or node[1] == value)


def simplify(node: tuple) -> tuple:
    """Constant-fold and drop algebraic no-ops (deterministic, single pass)."""
    match node:
        case ("num", _) | ("var", _):
            return node
        case ("neg", a):
            a = simplify(a)
            if _is_num(a):
                return ("num", -a[1])
            if a[0] == "neg":
                return a[1]
            return ("neg", a)
        case ("call", fn, a):
            a = simplify(a)
            if _is_num(a):
                try:
                    return ("num", float(getattr(math, fn)(a[1])))
                except (ValueError, OverflowError):
                    pass  # e.g. log(-1): keep symbolic, evaluation reports it
            return ("call", fn, a)
        case (op, a, b):
            a, b = simplify(a), simplify(b)
            if _is_num(a) and _is_num(b):
                try:
                    return ("num", _FOLD[op](a[1], b[1]))
                except (ZeroDivisionError, OverflowError, ValueError):
                    return (op, a, b)
            match op:
                case "add":
                    if _is_num(a, 0.0):
                        return b
                    if _is_num(b, 0.0):
                        return a
                case "sub":
                    if _is_num(b, 0.0):
                        return a
                    if _is_num(a, 0.0):
                        return simplify(("neg", b))
                    if a == b:
                        return ("num", 0.0)
                case "mul":
                    if _is_num(a, 0.0) or _is_num(b, 0.0):
                        return ("num", 0.0)
                    if _is_num(a, 1.0):
                        return b
                    if _is_num(b, 1.0):
                        return a
                case "div":
                    if _is_num(a, 0.0) and not _is_num(b, 0.0):
                        return ("num", 0.0)
                    if _is_num(b, 1.0):
                        return a
                case "pow":
                    if _is_num(b, 0.0):
                        return ("num", 1.0)
                    if _is_num(b, 1.0):
                        return a
                    if _is_num(a, 1.0):
                        return ("num", 1.0)
            return (op, a, b)
    raise ExprError(f"malformed AST node {node!r}")


_FOLD = {
    "add": lambda x, y: x + y,
    "sub": lambda x, y: x - y,
    "mul": lambda x, y: x * y,
    "div": lambda x, y: x / y,
    "pow": lambda x, y: float(x ** y),
}


def differentiate(node: tuple, wrt: str, order: int = 1) -> tuple:
    """Exact partial derivative d^order/d(wrt)^order, simplified."""
    if order not in (1, 2):
        raise ExprError(f"derivative order must be 1 or 2, got {order}")
    out = simplify(_diff(simplify(node), wrt))
    if order == 2:
        out = simplify(_diff(out, wrt))
    return out


def _diff(node: tuple, wrt: str) -> tuple:
    match node:
        case ("num", _):
            return ("num", 0.0)
        case ("var", name):
            return ("num", 1.0 if name == wrt else 0.0)
        case ("neg", a):
            return ("neg", _diff(a, wrt))
        case ("add", a, b):
            return ("add", _diff(a, wrt), _diff(b, wrt))
        case ("sub", a, b):
            return ("sub", _diff(a, wrt), _diff(b, wrt))
        case ("mul", a, b):
            return ("add", ("mul", _diff(a, wrt), b), ("mul", a, _diff(b, wrt)))
        case ("div", a, b):
            num = ("sub", ("mul", _diff(a, wrt), b), ("mul", a, _diff(b, wrt)))
            return ("div", num, ("pow", b, ("num", 2.0)))
        case ("pow", a, b):
            if _is_num(b):
                n = b[1]
                return ("mul", ("mul", b, ("pow", a, ("num", n - 1.0))), _diff(a, wrt))
            # general a^b = exp(b log a)
            term = ("add",
                    ("mul", _diff(b, wrt), ("call", "log", a)),
                    ("div", ("mul", b, _diff(a, wrt)), a))
            return ("mul", node, term)
        case ("call", fn, a):
            da = _diff(a, wrt)
            outer = {
                "exp": lambda u: ("call", "exp", u),
                "log": lambda u: ("div", ("num", 1.0), u),
                "sin": lambda u: ("call", "cos", u),
                "cos": lambda u: ("neg", ("call", "sin", u)),
                "sqrt": lambda u: ("div", ("num", 0.5), ("call", "sqrt", u)),
            }[fn](a)
            return ("mul", outer, da)
    raise ExprError(f"malformed AST node {node!r}")


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate(node: tuple, env: dict[str, float | np.ndarray]):
    """Tree-walking evaluation that reports the offending subexpression
    on domain errors (division by zero, log/sqrt outside the domain)."""
    match node:
        case ("num", v):
            return v
        case ("var", name):
            try:
                return env[name]
            except KeyError:
                raise UnknownIdentifierError(f"no value bound for {name!r}") from None
        case ("neg", a):
            return -evaluate(a, env)
        case ("call", fn, a):
            arg = evaluate(a, env)
            with np.errstate(all="ignore"):
                out = _NUMPY_FUNCS[fn](arg)
            if not np.all(np.isfinite(out)):
                raise DomainEvalError(f"{fn} out of domain", node)
            return out
        case (op, a, b):
            lhs, rhs = evaluate(a, env), evaluate(b, env)
            with np.errstate(all="ignore"):
                if op == "div":
                    out = np.divide(lhs, rhs)
                elif op == "pow":
                    out = np.power(lhs, rhs)
                else:
                    out = _FOLD[op](lhs, rhs)
            if not np.all(np.isfinite(out)):
                kind = "division by zero" if op == "div" else f"{op} out of domain"
                raise DomainEvalError(kind, node)
            return out
    raise ExprError(f"malformed AST node {node!r}")


_NUMPY_FUNCS = {"exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos,
                "sqrt": np.sqrt}
_MATH_FUNCS = {"exp": math.exp, "log": math.log, "sin": math.sin, "cos": math.cos,
               "sqrt": math.sqrt}


def _emit(node: tuple) -> str:
    """Emit Python source for the AST (names resolve in the compile namespace)."""
    match node:
        case ("num", v):
            return repr(v)
        case ("var", name):
            return name
        case ("neg", a):
            return f"(-{_emit(a)})"
        case ("call", fn, a):
            return f"{fn}({_emit(a)})"
        case (op, a, b):
            py = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "**"}[op]
            return f"({_emit(a)} {py} {_emit(b)})"
    raise ExprError(f"malformed AST node {node!r}")


def compile_expr(node: tuple, variables: tuple[str, ...],
                 scalar: bool = False) -> Callable:
    """Compile to `f(v1, ..., vn)` taking the variables positionally.

    With scalar=True the unary functions bind to `math` (fast float path
    for deterministic single-path loops); otherwise to numpy ufuncs.
    No domain checks: callers screen outputs for non-finite values.
    """
    args = ", ".join(variables)
    source = f"lambda {args}: {_emit(simplify(node))}"
    namespace = dict(_MATH_FUNCS if scalar else _NUMPY_FUNCS)
    return eval(source, namespace)  # noqa: S307 - closed grammar, no free names
