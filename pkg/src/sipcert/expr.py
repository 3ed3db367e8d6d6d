"""Expression language for problem definitions.

Decision variables are written ``x1 .. x16``; any other identifier is an
index variable bound at evaluation time. Supported operators: ``+ - * / ^``
(``^`` right-associative, binding tighter than unary minus) and the calls
``sin cos exp log sqrt``. Gradients with respect to the decision variables
are propagated forward with dual numbers; the index variable is held
constant. Evaluation broadcasts over numpy arrays bound to the index
variable, which is how whole index grids are scanned in one pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

import numpy as np

MAX_DIM = 16


class ExprError(ValueError):
    """Base class for expression failures."""


class ParseError(ExprError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DomainError(ExprError):
    """Evaluation hit a domain violation (log of nonpositive, division by zero, ...)."""

    def __init__(self, message: str, subexpr: "ExprAst"):
        super().__init__(f"{message} in '{to_source(subexpr)}'")
        self.subexpr = subexpr


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    position: int  # 1-based


@dataclass(frozen=True)
class IndexVar:
    name: str


@dataclass(frozen=True)
class Neg:
    child: "ExprAst"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "ExprAst"
    right: "ExprAst"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "ExprAst"


ExprAst = Union[Const, Var, IndexVar, Neg, BinOp, Call]

_FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")

_TOKEN_RE = re.compile(
    r"""
    (?P<num>\d+(\.\d*)?([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
  | (?P<ws>\s+)
  | (?P<bad>.)
    """,
    re.VERBOSE,
)

_VAR_RE = re.compile(r"x([1-9][0-9]*)$")


@dataclass(frozen=True)
class _Token:
    kind: str  # num | ident | op | end
    text: str
    line: int
    column: int


def _tokenize(source: str) -> Iterator[_Token]:
    line, col = 1, 1
    for m in _TOKEN_RE.finditer(source):
        text = m.group(0)
        if m.lastgroup == "ws":
            newlines = text.count("\n")
            if newlines:
                line += newlines
                col = len(text) - text.rfind("\n")
            else:
                col += len(text)
            continue
        if m.lastgroup == "bad":
            raise ParseError(f"unexpected character {text!r}", line, col)
        yield _Token(m.lastgroup, text, line, col)
        col += len(text)
    yield _Token("end", "", line, col)


class _Parser:
    def __init__(self, source: str):
        self._tokens = list(_tokenize(source))
        self._pos = 0

    def peek(self) -> _Token:
        return self._tokens[self._pos]

    def advance(self) -> _Token:
        tok = self._tokens[self._pos]
        self._pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.kind == "op" and tok.text == text:
            return self.advance()
        shown = tok.text if tok.kind != "end" else "end of input"
        raise ParseError(f"expected {text!r}, found {shown!r}", tok.line, tok.column)

    def parse(self) -> ExprAst:
        node = self.sum_expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.line, tok.column)
        return node

    def sum_expr(self) -> ExprAst:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> ExprAst:
        node = self.factor()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> ExprAst:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.advance()
            return Neg(self.factor())
        return self.power()

    def power(self) -> ExprAst:
        base = self.atom()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.advance()
            # right-associative; exponent may carry a unary minus
            return BinOp("^", base, self.factor())
        return base

    def atom(self) -> ExprAst:
        tok = self.advance()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.kind == "ident":
            if tok.text in _FUNCTIONS:
                self.expect("(")
                arg = self.sum_expr()
                self.expect(")")
                return Call(tok.text, arg)
            m = _VAR_RE.match(tok.text)
            if m:
                pos = int(m.group(1))
                if pos > MAX_DIM:
                    raise ParseError(
                        f"decision variable {tok.text} exceeds the supported dimension {MAX_DIM}",
                        tok.line,
                        tok.column,
                    )
                return Var(pos)
            return IndexVar(tok.text)
        if tok.kind == "op" and tok.text == "(":
            node = self.sum_expr()
            self.expect(")")
            return node
        shown = tok.text if tok.kind != "end" else "end of input"
        raise ParseError(f"unexpected {shown!r}", tok.line, tok.column)


def parse(source: str) -> ExprAst:
    """Parse ``source`` into an AST. Raises ParseError with line/column on bad input."""
    return _Parser(source).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _render(node: ExprAst, ctx: int) -> str:
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return f"x{node.position}"
    if isinstance(node, IndexVar):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}({_render(node.arg, 0)})"
    if isinstance(node, Neg):
        body = "-" + _render(node.child, 4)
        return f"({body})" if ctx > 3 else body
    prec = _PREC[node.op]
    if node.op == "^":
        body = _render(node.left, 5) + "^" + _render(node.right, 4)
    else:
        body = _render(node.left, prec) + node.op + _render(node.right, prec + 1)
    return f"({body})" if ctx > prec else body


def to_source(ast: ExprAst) -> str:
    """Canonical text form; parse(to_source(ast)) is structurally equal to ast."""
    return _render(ast, 0)


def free_index_names(ast: ExprAst) -> set[str]:
    if isinstance(ast, IndexVar):
        return {ast.name}
    if isinstance(ast, Neg):
        return free_index_names(ast.child)
    if isinstance(ast, Call):
        return free_index_names(ast.arg)
    if isinstance(ast, BinOp):
        return free_index_names(ast.left) | free_index_names(ast.right)
    return set()


def max_var_position(ast: ExprAst) -> int:
    if isinstance(ast, Var):
        return ast.position
    if isinstance(ast, Neg):
        return max_var_position(ast.child)
    if isinstance(ast, Call):
        return max_var_position(ast.arg)
    if isinstance(ast, BinOp):
        return max(max_var_position(ast.left), max_var_position(ast.right))
    return 0


def _int_exponent(node: ExprAst):
    """Integer value of a constant exponent subtree, or None."""
    if isinstance(node, Const) and float(node.value).is_integer():
        return int(node.value)
    if isinstance(node, Neg):
        inner = _int_exponent(node.child)
        return None if inner is None else -inner
    return None


Bindings = Mapping[str, object]


def _check_x(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] > MAX_DIM:
        raise ExprError(f"decision vector must have between 1 and {MAX_DIM} components")
    return arr


def eval_value(ast: ExprAst, x, index: Bindings | None = None):
    """Evaluate the expression at decision vector ``x`` (shape (n,) or (m, n)).

    Index bindings may be scalars or numpy arrays; array bindings broadcast,
    giving one value per index entry.
    """
    xa = _check_x(x)
    env = dict(index or {})

    def rec(node: ExprAst):
        if isinstance(node, Const):
            return node.value
        if isinstance(node, Var):
            if node.position > xa.shape[-1]:
                raise ExprError(f"x{node.position} out of range for dimension {xa.shape[-1]}")
            return xa[..., node.position - 1]
        if isinstance(node, IndexVar):
            if node.name not in env:
                raise ExprError(f"unbound index variable '{node.name}'")
            return np.asarray(env[node.name], dtype=float)
        if isinstance(node, Neg):
            return -rec(node.child)
        if isinstance(node, Call):
            return _apply_call(node, rec(node.arg))
        a = rec(node.left)
        if node.op == "^":
            k = _int_exponent(node.right)
            if k is not None:
                return _int_pow_val(node, a, k)
            b = rec(node.right)
            if np.any(np.asarray(a) <= 0.0):
                raise DomainError("non-integer power of a nonpositive base", node)
            return np.exp(b * np.log(a))
        b = rec(node.right)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0.0):
            raise DomainError("division by zero", node)
        return a / b

    return rec(ast)


def _apply_call(node: Call, a):
    if node.fn == "sin":
        return np.sin(a)
    if node.fn == "cos":
        return np.cos(a)
    if node.fn == "exp":
        return np.exp(a)
    if node.fn == "log":
        if np.any(np.asarray(a) <= 0.0):
            raise DomainError("log of a nonpositive value", node)
        return np.log(a)
    if np.any(np.asarray(a) < 0.0):
        raise DomainError("sqrt of a negative value", node)
    return np.sqrt(a)


def _int_pow_val(node: BinOp, a, k: int):
    if k < 0 and np.any(np.asarray(a) == 0.0):
        raise DomainError("zero base with a negative exponent", node)
    # repeated multiplication keeps x^3 exact for negative bases
    r = np.ones_like(np.asarray(a, dtype=float)) if np.ndim(a) else 1.0
    base = a
    e = abs(k)
    while e > 0:
        if e & 1:
            r = r * base
        base = base * base
        e >>= 1
    return 1.0 / r if k < 0 else r


def _scale(tan, v):
    """Multiply a tangent block (..., n) by a value (...,) with broadcasting."""
    if np.ndim(v) == 0:
        return tan * v
    return tan * np.asarray(v)[..., None]


def eval_grad(ast: ExprAst, x, index: Bindings | None = None):
    """Value and gradient in the decision variables via forward-mode duals.

    Returns ``(value, grad)``. With scalar bindings ``grad`` has shape (n,);
    with an array bound to the index variable the shapes are (m,) and (m, n).
    """
    xa = _check_x(x)
    if xa.ndim != 1:
        raise ExprError("eval_grad expects a single decision vector")
    n = xa.shape[0]
    env = dict(index or {})
    zeros = np.zeros(n)

    def rec(node: ExprAst):
        if isinstance(node, Const):
            return node.value, zeros
        if isinstance(node, Var):
            if node.position > n:
                raise ExprError(f"x{node.position} out of range for dimension {n}")
            e = np.zeros(n)
            e[node.position - 1] = 1.0
            return xa[node.position - 1], e
        if isinstance(node, IndexVar):
            if node.name not in env:
                raise ExprError(f"unbound index variable '{node.name}'")
            v = np.asarray(env[node.name], dtype=float)
            # index variables are constants for the decision gradient
            return v, np.zeros(v.shape + (n,)) if v.ndim else zeros
        if isinstance(node, Neg):
            v, t = rec(node.child)
            return -v, -t
        if isinstance(node, Call):
            v, t = rec(node.arg)
            return _call_dual(node, v, t)
        va, ta = rec(node.left)
        if node.op == "^":
            k = _int_exponent(node.right)
            if k is not None:
                return _int_pow_dual(node, va, ta, k)
            vb, tb = rec(node.right)
            if np.any(np.asarray(va) <= 0.0):
                raise DomainError("non-integer power of a nonpositive base", node)
            val = np.exp(vb * np.log(va))
            tan = _scale(tb, val * np.log(va)) + _scale(ta, val * vb / va)
            return val, tan
        vb, tb = rec(node.right)
        if node.op == "+":
            return va + vb, ta + tb
        if node.op == "-":
            return va - vb, ta - tb
        if node.op == "*":
            return va * vb, _scale(ta, vb) + _scale(tb, va)
        if np.any(np.asarray(vb) == 0.0):
            raise DomainError("division by zero", node)
        val = va / vb
        tan = _scale(ta - _scale(tb, val), 1.0 / vb)
        return val, tan

    val, tan = rec(ast)
    return np.asarray(val, dtype=float), np.asarray(tan, dtype=float)


def _call_dual(node: Call, v, t):
    if node.fn == "sin":
        return np.sin(v), _scale(t, np.cos(v))
    if node.fn == "cos":
        return np.cos(v), _scale(t, -np.sin(v))
    if node.fn == "exp":
        ev = np.exp(v)
        return ev, _scale(t, ev)
    if node.fn == "log":
        if np.any(np.asarray(v) <= 0.0):
            raise DomainError("log of a nonpositive value", node)
        return np.log(v), _scale(t, 1.0 / v)
    if np.any(np.asarray(v) < 0.0):
        raise DomainError("sqrt of a negative value", node)
    if np.any(np.asarray(v) == 0.0):
        raise DomainError("sqrt gradient at zero", node)
    sv = np.sqrt(v)
    return sv, _scale(t, 0.5 / sv)


def _int_pow_dual(node: BinOp, v, t, k: int):
    if k < 0 and np.any(np.asarray(v) == 0.0):
        raise DomainError("zero base with a negative exponent", node)
    one_v = np.ones_like(np.asarray(v, dtype=float)) if np.ndim(v) else 1.0
    rv, rt = one_v, np.zeros_like(t)
    bv, bt = v, t
    e = abs(k)
    while e > 0:
        if e & 1:
            rv, rt = rv * bv, _scale(rt, bv) + _scale(bt, rv)
        e >>= 1
        if e:
            bv, bt = bv * bv, 2.0 * _scale(bt, bv)
    if k < 0:
        return 1.0 / rv, _scale(rt, -1.0 / (rv * rv))
    return rv, rt


def _affine_info(node: ExprAst) -> tuple[bool, bool]:
    """(affine in x, free of x)."""
    if isinstance(node, (Const, IndexVar)):
        return True, True
    if isinstance(node, Var):
        return True, False
    if isinstance(node, Neg):
        return _affine_info(node.child)
    if isinstance(node, Call):
        _, xfree = _affine_info(node.arg)
        return xfree, xfree
    la, lf = _affine_info(node.left)
    ra, rf = _affine_info(node.right)
    if node.op in "+-":
        return la and ra, lf and rf
    if node.op == "*":
        return (lf and ra) or (rf and la), lf and rf
    if node.op == "/":
        return la and rf, lf and rf
    return lf and rf, lf and rf


def is_affine_in_x(ast: ExprAst) -> bool:
    return _affine_info(ast)[0]


def affine_coefficients(ast: ExprAst, n: int, index: Bindings | None = None):
    """For an expression affine in x, return (a, c) with value == <a, x> + c."""
    if not is_affine_in_x(ast):
        raise ExprError("expression is not affine in the decision variables")
    c = float(eval_value(ast, np.zeros(n), index))
    _, a = eval_grad(ast, np.zeros(n), index)
    return a, c
