"""Phase-space symbols a(x, xi) as expression trees with exact derivatives.

Scalar symbols are immutable expression trees over the variables
x1..xd, xi1..xid; matrix symbols are rectangular grids of trees
(`SymbolField`).  Differentiation is exact tree rewriting, which is what
makes pointwise Poisson brackets accurate enough for the normal-form
residual checks.  A compiled-to-numpy evaluator is provided for batched
evaluation along flows and on simulation grids.

Grammar (documented for the CLI):

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' integer)?
    atom   := number | ident | func '(' expr ')' | '(' expr ')'
    ident  := x<k> | xi<k> | 'pi' | 'i'
    func   := sqrt | exp | sin | cos | chi | chi_d1 | chi_d2 | chi_d3

`chi` is the built-in frequency cutoff: a C^2 quintic smoothstep that
vanishes for argument <= 1/4 and equals 1 for argument >= 1/2.  The
chi_d<k> names denote its derivatives (they appear when differentiated
trees are pretty-printed).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SymbolDomainError, SymbolParseError, SymbolError

DIV_GUARD = 1e-10

# cutoff window [1/4, 1/2]
_CHI_LO = 0.25
_CHI_WIDTH = 0.25


# ---------------------------------------------------------------------------
# cutoff shape function and derivatives (shared by tree eval and codegen)
# ---------------------------------------------------------------------------

def _chi_poly(u, order: int):
    if order == 0:
        return ((6.0 * u - 15.0) * u + 10.0) * u**3
    if order == 1:
        return 30.0 * u**2 * (u - 1.0) ** 2
    if order == 2:
        return 60.0 * u * (2.0 * u - 1.0) * (u - 1.0)
    if order == 3:
        return (360.0 * u - 360.0) * u + 60.0
    raise SymbolError(f"cutoff derivative order {order} not supported")


def chi_eval(r, order: int = 0):
    """Quintic smoothstep cutoff (order = number of derivatives applied)."""
    r_arr = np.asarray(r)
    u = np.clip((r_arr - _CHI_LO) / _CHI_WIDTH, 0.0, 1.0)
    inside = _chi_poly(u, order) * (1.0 / _CHI_WIDTH) ** order
    if order == 0:
        out = np.where(r_arr <= _CHI_LO, 0.0, np.where(r_arr >= _CHI_LO + _CHI_WIDTH, 1.0, inside))
    else:
        window = (r_arr > _CHI_LO) & (r_arr < _CHI_LO + _CHI_WIDTH)
        out = np.where(window, inside, 0.0)
    if np.ndim(r) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# expression nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expr:
    def diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def conj(self) -> "Expr":
        raise NotImplementedError

    def variables(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Expr):
    value: complex

    def __post_init__(self):
        v = complex(self.value)
        if v.imag == 0.0:
            object.__setattr__(self, "value", float(v.real))
        else:
            object.__setattr__(self, "value", v)

    def diff(self, var):
        return Const(0.0)

    def conj(self):
        return Const(np.conj(self.value))

    def variables(self):
        return set()


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def diff(self, var):
        return Const(1.0) if var == self.name else Const(0.0)

    def conj(self):
        # phase-space variables are real
        return self

    def variables(self):
        return {self.name}


@dataclass(frozen=True)
class Add(Expr):
    a: Expr
    b: Expr

    def diff(self, var):
        return add(self.a.diff(var), self.b.diff(var))

    def conj(self):
        return add(self.a.conj(), self.b.conj())

    def variables(self):
        return self.a.variables() | self.b.variables()


@dataclass(frozen=True)
class Sub(Expr):
    a: Expr
    b: Expr

    def diff(self, var):
        return sub(self.a.diff(var), self.b.diff(var))

    def conj(self):
        return sub(self.a.conj(), self.b.conj())

    def variables(self):
        return self.a.variables() | self.b.variables()


@dataclass(frozen=True)
class Mul(Expr):
    a: Expr
    b: Expr

    def diff(self, var):
        return add(mul(self.a.diff(var), self.b), mul(self.a, self.b.diff(var)))

    def conj(self):
        return mul(self.a.conj(), self.b.conj())

    def variables(self):
        return self.a.variables() | self.b.variables()


@dataclass(frozen=True)
class Div(Expr):
    a: Expr
    b: Expr

    def diff(self, var):
        num = sub(mul(self.a.diff(var), self.b), mul(self.a, self.b.diff(var)))
        return div(num, mul(self.b, self.b))

    def conj(self):
        return div(self.a.conj(), self.b.conj())

    def variables(self):
        return self.a.variables() | self.b.variables()


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def diff(self, var):
        n = self.exponent
        return mul(mul(Const(float(n)), powi(self.base, n - 1)), self.base.diff(var))

    def conj(self):
        return powi(self.base.conj(), self.exponent)

    def variables(self):
        return self.base.variables()


@dataclass(frozen=True)
class Sqrt(Expr):
    a: Expr

    def diff(self, var):
        return div(self.a.diff(var), mul(Const(2.0), Sqrt(self.a)))

    def conj(self):
        return Sqrt(self.a.conj())

    def variables(self):
        return self.a.variables()


@dataclass(frozen=True)
class Exp(Expr):
    a: Expr

    def diff(self, var):
        return mul(Exp(self.a), self.a.diff(var))

    def conj(self):
        return Exp(self.a.conj())

    def variables(self):
        return self.a.variables()


@dataclass(frozen=True)
class Sin(Expr):
    a: Expr

    def diff(self, var):
        return mul(Cos(self.a), self.a.diff(var))

    def conj(self):
        return Sin(self.a.conj())

    def variables(self):
        return self.a.variables()


@dataclass(frozen=True)
class Cos(Expr):
    a: Expr

    def diff(self, var):
        return neg(mul(Sin(self.a), self.a.diff(var)))

    def conj(self):
        return Cos(self.a.conj())

    def variables(self):
        return self.a.variables()


@dataclass(frozen=True)
class Chi(Expr):
    """Cutoff primitive; `order` counts derivatives of the shape function."""

    a: Expr
    order: int = 0

    def diff(self, var):
        return mul(Chi(self.a, self.order + 1), self.a.diff(var))

    def conj(self):
        # the cutoff is only ever applied to real arguments (|xi|)
        return Chi(self.a.conj(), self.order)

    def variables(self):
        return self.a.variables()


# ---------------------------------------------------------------------------
# smart constructors with deterministic constant folding
# ---------------------------------------------------------------------------

def _is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b):
        if b.value == 0.0:
            raise SymbolError("division by the constant zero")
        if _is_const(a):
            return Const(a.value / b.value)
        if b.value == 1.0:
            return a
    if _is_const(a, 0.0):
        return Const(0.0)
    return Div(a, b)


def powi(a: Expr, n: int) -> Expr:
    if n == 0:
        return Const(1.0)
    if n == 1:
        return a
    if _is_const(a):
        return Const(a.value**n)
    return Pow(a, n)


def neg(a: Expr) -> Expr:
    return mul(Const(-1.0), a)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(expr: Expr, env: dict, div_floor: float | None = None):
    """Evaluate a tree on scalars or numpy arrays.

    `env` maps variable names to values.  Division is guarded: if any
    denominator magnitude is below DIV_GUARD the evaluation raises
    SymbolDomainError, unless `div_floor` is given, in which case small
    denominators are floored (used only by the direct simulator on
    negligible-mass grid nodes).
    """
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise SymbolError(f"unbound variable {expr.name!r}") from None
    if isinstance(expr, Add):
        return evaluate(expr.a, env, div_floor) + evaluate(expr.b, env, div_floor)
    if isinstance(expr, Sub):
        return evaluate(expr.a, env, div_floor) - evaluate(expr.b, env, div_floor)
    if isinstance(expr, Mul):
        return evaluate(expr.a, env, div_floor) * evaluate(expr.b, env, div_floor)
    if isinstance(expr, Div):
        num = evaluate(expr.a, env, div_floor)
        den = evaluate(expr.b, env, div_floor)
        return _guarded_div(num, den, div_floor)
    if isinstance(expr, Pow):
        return evaluate(expr.base, env, div_floor) ** expr.exponent
    if isinstance(expr, Sqrt):
        return np.sqrt(evaluate(expr.a, env, div_floor))
    if isinstance(expr, Exp):
        return np.exp(evaluate(expr.a, env, div_floor))
    if isinstance(expr, Sin):
        return np.sin(evaluate(expr.a, env, div_floor))
    if isinstance(expr, Cos):
        return np.cos(evaluate(expr.a, env, div_floor))
    if isinstance(expr, Chi):
        return chi_eval(evaluate(expr.a, env, div_floor), expr.order)
    raise SymbolError(f"cannot evaluate node {type(expr).__name__}")


def _guarded_div(num, den, div_floor):
    mag = np.abs(den)
    small = mag < DIV_GUARD
    if div_floor is None:
        if np.any(small):
            raise SymbolDomainError(
                f"denominator magnitude {float(np.min(mag)):.3e} below guard {DIV_GUARD:.0e}"
            )
        return num / den
    den_safe = np.where(np.abs(den) < div_floor, div_floor, den)
    return num / den_safe


# ---------------------------------------------------------------------------
# compiled evaluation (lambdify-style) for hot loops
# ---------------------------------------------------------------------------

def _emit(expr: Expr, d: int) -> str:
    if isinstance(expr, Const):
        return repr(expr.value)
    if isinstance(expr, Var):
        kind, idx = _split_var(expr.name)
        arr = "x" if kind == "x" else "xi"
        if idx > d:
            raise SymbolError(f"variable {expr.name} exceeds dimension {d}")
        return f"{arr}[{idx - 1}]"
    if isinstance(expr, Add):
        return f"({_emit(expr.a, d)}+{_emit(expr.b, d)})"
    if isinstance(expr, Sub):
        return f"({_emit(expr.a, d)}-{_emit(expr.b, d)})"
    if isinstance(expr, Mul):
        return f"({_emit(expr.a, d)}*{_emit(expr.b, d)})"
    if isinstance(expr, Div):
        return f"_div({_emit(expr.a, d)},{_emit(expr.b, d)})"
    if isinstance(expr, Pow):
        return f"({_emit(expr.base, d)})**{expr.exponent}"
    if isinstance(expr, Sqrt):
        return f"_sqrt({_emit(expr.a, d)})"
    if isinstance(expr, Exp):
        return f"_exp({_emit(expr.a, d)})"
    if isinstance(expr, Sin):
        return f"_sin({_emit(expr.a, d)})"
    if isinstance(expr, Cos):
        return f"_cos({_emit(expr.a, d)})"
    if isinstance(expr, Chi):
        return f"_chi({_emit(expr.a, d)},{expr.order})"
    raise SymbolError(f"cannot compile node {type(expr).__name__}")


def compile_expr(expr: Expr, d: int, div_floor: float | None = None):
    """Compile a tree into a callable f(x, xi) over scalars or arrays.

    x and xi are indexable of length d (components may be scalars or
    broadcastable arrays).
    """
    src = _emit(expr, d)
    namespace = {
        "_div": lambda a, b: _guarded_div(a, b, div_floor),
        "_sqrt": np.sqrt,
        "_exp": np.exp,
        "_sin": np.sin,
        "_cos": np.cos,
        "_chi": chi_eval,
    }
    fn = eval(f"lambda x, xi: {src}", namespace)  # noqa: S307 - generated from our own AST
    return fn


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)

_FUNCTIONS = {
    "sqrt": lambda a: Sqrt(a),
    "exp": lambda a: Exp(a),
    "sin": lambda a: Sin(a),
    "cos": lambda a: Cos(a),
    "chi": lambda a: Chi(a, 0),
    "chi_d1": lambda a: Chi(a, 1),
    "chi_d2": lambda a: Chi(a, 2),
    "chi_d3": lambda a: Chi(a, 3),
}

_VAR_RE = re.compile(r"^(xi|x)([1-9]\d*)$")


def _split_var(name: str) -> tuple[str, int]:
    m = _VAR_RE.match(name)
    if not m:
        raise SymbolError(f"not a phase-space variable: {name!r}")
    return m.group(1), int(m.group(2))


class _Parser:
    def __init__(self, text: str, d: int):
        self.text = text
        self.d = d
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            if text[pos].isspace():
                pos += 1
                continue
            m = _TOKEN_RE.match(text, pos)
            if not m:
                raise SymbolParseError(f"unexpected character {text[pos]!r}", pos)
            self.tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
            pos = m.end()
        self.i = 0

    def peek(self):
        if self.i < len(self.tokens):
            return self.tokens[self.i]
        return ("eof", "", len(self.text))

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, off = self.next()
        if kind != "op" or val != op:
            raise SymbolParseError(f"expected {op!r}, found {val!r}", off)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "eof":
            raise SymbolParseError(f"unexpected trailing token {val!r}", off)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.term()
                e = add(e, rhs) if val == "+" else sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.unary()
                e = mul(e, rhs) if val == "*" else div(e, rhs)
            else:
                return e

    def unary(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, val, off = self.peek()
        if kind == "op" and val == "^":
            self.next()
            nkind, nval, noff = self.next()
            negative = False
            if nkind == "op" and nval == "-":
                negative = True
                nkind, nval, noff = self.next()
            if nkind != "number" or any(c in nval for c in ".eE"):
                raise SymbolParseError("exponent must be an integer", noff)
            n = int(nval)
            # negative powers go through Div so the domain guard applies
            e = div(Const(1.0), powi(base, n)) if negative else powi(base, n)
            kind2, val2, off2 = self.peek()
            if kind2 == "op" and val2 == "^":
                raise SymbolParseError("chained '^' is not allowed; use parentheses", off2)
            return e
        return base

    def atom(self) -> Expr:
        kind, val, off = self.next()
        if kind == "number":
            return Const(float(val))
        if kind == "ident":
            if val in _FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return _FUNCTIONS[val](arg)
            if val == "pi":
                return Const(np.pi)
            if val == "i":
                return Const(1j)
            m = _VAR_RE.match(val)
            if m:
                idx = int(m.group(2))
                if idx > self.d:
                    raise SymbolParseError(
                        f"variable {val!r} exceeds declared dimension d={self.d}", off
                    )
                return Var(val)
            raise SymbolParseError(f"unknown identifier {val!r}", off)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise SymbolParseError(f"unexpected token {val!r}", off)


def parse_symbol(text: str, d: int) -> Expr:
    """Parse an infix expression over x1..xd, xi1..xid into a tree."""
    return _Parser(text, d).parse()


def differentiate(expr: Expr, var: str) -> Expr:
    """Exact partial derivative with respect to 'x<k>' or 'xi<k>'."""
    _split_var(var)
    return expr.diff(var)


# ---------------------------------------------------------------------------
# pretty printer (round-trips through parse_symbol)
# ---------------------------------------------------------------------------

_LEVEL_ADD, _LEVEL_MUL, _LEVEL_POW, _LEVEL_ATOM = 1, 2, 3, 4


def _fmt_const(value) -> tuple[str, int]:
    if isinstance(value, complex):
        re_s = repr(float(value.real))
        im_s = repr(abs(float(value.imag)))
        sign = "+" if value.imag >= 0 else "-"
        if value.real == 0.0:
            if value.imag == 1.0:
                return "i", _LEVEL_ATOM
            if value.imag == -1.0:
                return "-i", _LEVEL_MUL
            s = f"{im_s}*i"
            return (s, _LEVEL_MUL) if value.imag > 0 else (f"-{s}", _LEVEL_MUL)
        return f"({re_s} {sign} {im_s}*i)", _LEVEL_ATOM
    s = repr(float(value))
    return (s, _LEVEL_ATOM if value >= 0 else _LEVEL_MUL)


def _pp(expr: Expr) -> tuple[str, int]:
    if isinstance(expr, Const):
        return _fmt_const(expr.value)
    if isinstance(expr, Var):
        return expr.name, _LEVEL_ATOM
    if isinstance(expr, (Add, Sub)):
        a_s, _ = _pp_at(expr.a, _LEVEL_ADD)
        b_s, _ = _pp_at(expr.b, _LEVEL_ADD + (1 if isinstance(expr, Sub) else 0))
        op = " + " if isinstance(expr, Add) else " - "
        return f"{a_s}{op}{b_s}", _LEVEL_ADD
    if isinstance(expr, (Mul, Div)):
        a_s, _ = _pp_at(expr.a, _LEVEL_MUL)
        b_s, _ = _pp_at(expr.b, _LEVEL_MUL + (1 if isinstance(expr, Div) else 0))
        op = "*" if isinstance(expr, Mul) else "/"
        return f"{a_s}{op}{b_s}", _LEVEL_MUL
    if isinstance(expr, Pow):
        base_s, lvl = _pp(expr.base)
        if lvl < _LEVEL_ATOM:
            base_s = f"({base_s})"
        return f"{base_s}^{expr.exponent}", _LEVEL_POW
    for cls, name in ((Sqrt, "sqrt"), (Exp, "exp"), (Sin, "sin"), (Cos, "cos")):
        if isinstance(expr, cls):
            return f"{name}({_pp(expr.a)[0]})", _LEVEL_ATOM
    if isinstance(expr, Chi):
        name = "chi" if expr.order == 0 else f"chi_d{expr.order}"
        return f"{name}({_pp(expr.a)[0]})", _LEVEL_ATOM
    raise SymbolError(f"cannot print node {type(expr).__name__}")


def _pp_at(expr: Expr, min_level: int) -> tuple[str, int]:
    s, lvl = _pp(expr)
    if lvl < min_level:
        return f"({s})", _LEVEL_ATOM
    return s, lvl


def pretty(expr: Expr) -> str:
    """Render a tree in the documented grammar; parse(pretty(e)) == e."""
    return _pp(expr)[0]


# ---------------------------------------------------------------------------
# matrix-valued symbols
# ---------------------------------------------------------------------------

def _as_expr(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, complex)):
        return Const(v)
    raise SymbolError(f"cannot coerce {type(v).__name__} to a symbol")


@dataclass(frozen=True)
class SymbolField:
    """Matrix of symbol trees over phase space of spatial dimension d."""

    entries: tuple
    d: int

    def __init__(self, entries, d: int):
        rows = tuple(tuple(_as_expr(e) for e in row) for row in entries)
        if not rows or not rows[0]:
            raise DimensionError("SymbolField needs at least one entry")
        ncols = len(rows[0])
        if any(len(r) != ncols for r in rows):
            raise DimensionError("ragged SymbolField rows")
        object.__setattr__(self, "entries", rows)
        object.__setattr__(self, "d", int(d))

    @property
    def rows(self) -> int:
        return len(self.entries)

    @property
    def cols(self) -> int:
        return len(self.entries[0])

    @staticmethod
    def from_strings(rows, d: int) -> "SymbolField":
        return SymbolField([[parse_symbol(s, d) for s in row] for row in rows], d)

    @staticmethod
    def constant(matrix, d: int) -> "SymbolField":
        m = np.asarray(matrix)
        if m.ndim != 2:
            raise DimensionError("constant SymbolField expects a 2-d array")
        return SymbolField([[Const(m[i, j]) for j in range(m.shape[1])] for i in range(m.shape[0])], d)

    @staticmethod
    def identity(n: int, d: int) -> "SymbolField":
        return SymbolField.constant(np.eye(n), d)

    @staticmethod
    def zeros(rows: int, cols: int, d: int) -> "SymbolField":
        return SymbolField([[Const(0.0)] * cols for _ in range(rows)], d)

    def scalar(self) -> Expr:
        if self.rows != 1 or self.cols != 1:
            raise DimensionError("not a scalar field")
        return self.entries[0][0]

    def diff(self, var: str) -> "SymbolField":
        return SymbolField([[e.diff(var) for e in row] for row in self.entries], self.d)

    def conj_transpose(self) -> "SymbolField":
        return SymbolField(
            [[self.entries[i][j].conj() for i in range(self.rows)] for j in range(self.cols)],
            self.d,
        )

    def matmul(self, other: "SymbolField") -> "SymbolField":
        if self.cols != other.rows:
            raise DimensionError(f"matmul shape mismatch {self.cols} vs {other.rows}")
        out = []
        for i in range(self.rows):
            row = []
            for j in range(other.cols):
                acc: Expr = Const(0.0)
                for k in range(self.cols):
                    acc = add(acc, mul(self.entries[i][k], other.entries[k][j]))
                row.append(acc)
            out.append(row)
        return SymbolField(out, self.d)

    def add_field(self, other: "SymbolField") -> "SymbolField":
        self._check_same_shape(other)
        return SymbolField(
            [[add(a, b) for a, b in zip(ra, rb)] for ra, rb in zip(self.entries, other.entries)],
            self.d,
        )

    def sub_field(self, other: "SymbolField") -> "SymbolField":
        self._check_same_shape(other)
        return SymbolField(
            [[sub(a, b) for a, b in zip(ra, rb)] for ra, rb in zip(self.entries, other.entries)],
            self.d,
        )

    def scale(self, c) -> "SymbolField":
        ce = _as_expr(c)
        return SymbolField([[mul(ce, e) for e in row] for row in self.entries], self.d)

    def _check_same_shape(self, other: "SymbolField"):
        if self.rows != other.rows or self.cols != other.cols:
            raise DimensionError("SymbolField shape mismatch")

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, x, xi, div_floor: float | None = None) -> np.ndarray:
        """Evaluate at a single phase point; returns a complex (rows, cols) array."""
        env = _phase_env(x, xi, self.d)
        out = np.empty((self.rows, self.cols), dtype=complex)
        for i, row in enumerate(self.entries):
            for j, e in enumerate(row):
                out[i, j] = evaluate(e, env, div_floor)
        return out

    def compile(self, div_floor: float | None = None):
        """Compiled evaluator f(x, xi) -> array (rows, cols) or (rows, cols) + batch.

        x and xi are length-d sequences whose components may be arrays; the
        result has shape (rows, cols, *batch_shape).
        """
        fns = [[compile_expr(e, self.d, div_floor) for e in row] for row in self.entries]
        rows, cols = self.rows, self.cols

        def call(x, xi):
            first = None
            vals = []
            for row in fns:
                vrow = []
                for fn in row:
                    v = fn(x, xi)
                    vrow.append(v)
                    if first is None and np.ndim(v) > 0:
                        first = np.shape(v)
                vals.append(vrow)
            if first is None:
                out = np.empty((rows, cols), dtype=complex)
                for i in range(rows):
                    for j in range(cols):
                        out[i, j] = vals[i][j]
                return out
            out = np.empty((rows, cols) + first, dtype=complex)
            for i in range(rows):
                for j in range(cols):
                    out[i, j] = vals[i][j]
            return out

        return call


def _phase_env(x, xi, d: int) -> dict:
    x = np.atleast_1d(np.asarray(x, dtype=float)) if not isinstance(x, (list, tuple)) else x
    env = {}
    for k in range(d):
        env[f"x{k + 1}"] = x[k]
    if xi is not None:
        for k in range(d):
            env[f"xi{k + 1}"] = xi[k]
    return env


def poisson_bracket(a: SymbolField, b: SymbolField) -> SymbolField:
    """Matrix Poisson bracket {a,b} = sum_i (d_xi_i a)(d_x_i b) - (d_x_i a)(d_xi_i b).

    Matrix order is preserved (the factors do not commute).
    """
    if a.d != b.d:
        raise DimensionError("bracket operands live in different dimensions")
    out = SymbolField.zeros(a.rows, b.cols, a.d)
    for k in range(1, a.d + 1):
        term1 = a.diff(f"xi{k}").matmul(b.diff(f"x{k}"))
        term2 = a.diff(f"x{k}").matmul(b.diff(f"xi{k}"))
        out = out.add_field(term1.sub_field(term2))
    return out


def scalar_field(text_or_expr, d: int) -> SymbolField:
    """Wrap a scalar expression (string or tree) as a 1x1 SymbolField."""
    e = parse_symbol(text_or_expr, d) if isinstance(text_or_expr, str) else _as_expr(text_or_expr)
    return SymbolField([[e]], d)
