"""Sparse multivariate polynomials and polynomial control-affine systems.

A polynomial in ``nvars`` variables is stored as a mapping from exponent
tuples to float coefficients. Variables print as ``x1..xn`` followed by
``u1..um`` when a polynomial also depends on the input (for instance the
differential dynamics matrix ``A(x, u)``).

Example
-------
>>> p = parse_poly("-x1 - x1^3 + x2^2", nx=2)
>>> p.evaluate([1.0, 2.0])
2.0
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

Exponent = tuple[int, ...]


class PolyParseError(ValueError):
    pass


def _grlex_key(e: Exponent):
    # descending total degree, then lexicographically descending
    return (-sum(e), tuple(-k for k in e))


class PolyExpr:
    """Immutable sparse polynomial with real coefficients."""

    __slots__ = ("nvars", "_terms", "_dict", "__dict__")

    def __init__(self, terms: Mapping[Exponent, float] | Iterable = (), nvars: int = 1):
        items = terms.items() if isinstance(terms, Mapping) else terms
        acc: dict[Exponent, float] = {}
        for e, c in items:
            e = tuple(int(k) for k in e)
            if len(e) != nvars:
                raise ValueError(f"exponent {e} does not match nvars={nvars}")
            if any(k < 0 for k in e):
                raise ValueError(f"negative exponent in {e}")
            acc[e] = acc.get(e, 0.0) + float(c)
        acc = {e: c for e, c in acc.items() if c != 0.0}
        self.nvars = nvars
        self._terms = tuple(sorted(acc.items(), key=lambda t: _grlex_key(t[0])))
        self._dict = dict(self._terms)

    # construction helpers -------------------------------------------------
    @classmethod
    def const(cls, value: float, nvars: int) -> "PolyExpr":
        return cls({(0,) * nvars: value}, nvars)

    @classmethod
    def var(cls, j: int, nvars: int) -> "PolyExpr":
        e = [0] * nvars
        e[j] = 1
        return cls({tuple(e): 1.0}, nvars)

    @classmethod
    def monomial(cls, exps: Exponent, nvars: int | None = None, coef: float = 1.0) -> "PolyExpr":
        nvars = len(exps) if nvars is None else nvars
        e = tuple(exps) + (0,) * (nvars - len(exps))
        return cls({e: coef}, nvars)

    @property
    def terms(self) -> tuple[tuple[Exponent, float], ...]:
        return self._terms

    def coeff(self, exps: Exponent) -> float:
        return self._dict.get(tuple(exps), 0.0)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(sum(e) == 0 for e, _ in self._terms)

    def constant_value(self) -> float:
        return self._dict.get((0,) * self.nvars, 0.0)

    @property
    def degree(self) -> int:
        return max((sum(e) for e, _ in self._terms), default=0)

    def depends_on(self, j: int) -> bool:
        return any(e[j] > 0 for e, _ in self._terms)

    # arithmetic -----------------------------------------------------------
    def _coerce(self, other) -> "PolyExpr":
        if isinstance(other, PolyExpr):
            if other.nvars != self.nvars:
                raise ValueError(f"nvars mismatch: {self.nvars} vs {other.nvars}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return PolyExpr.const(float(other), self.nvars)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return PolyExpr(list(self._terms) + list(other._terms), self.nvars)

    __radd__ = __add__

    def __neg__(self):
        return PolyExpr([(e, -c) for e, c in self._terms], self.nvars)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict[Exponent, float] = {}
        for e1, c1 in self._terms:
            for e2, c2 in other._terms:
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return PolyExpr(out, self.nvars)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if int(k) != k or k < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = PolyExpr.const(1.0, self.nvars)
        base = self
        k = int(k)
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = PolyExpr.const(float(other), self.nvars)
        if not isinstance(other, PolyExpr):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        return hash((self.nvars, self._terms))

    def allclose(self, other: "PolyExpr", atol: float = 1e-12) -> bool:
        diff = self - other
        return all(abs(c) <= atol for _, c in diff._terms)

    # calculus / substitution ---------------------------------------------
    def diff(self, j: int) -> "PolyExpr":
        out = []
        for e, c in self._terms:
            if e[j] > 0:
                e2 = list(e)
                e2[j] -= 1
                out.append((tuple(e2), c * e[j]))
        return PolyExpr(out, self.nvars)

    def extend(self, nvars: int) -> "PolyExpr":
        """Same polynomial viewed in ``nvars >= self.nvars`` variables."""
        pad = (0,) * (nvars - self.nvars)
        return PolyExpr([(e + pad, c) for e, c in self._terms], nvars)

    def restrict(self, nvars: int) -> "PolyExpr":
        """Drop trailing variables; they must not appear."""
        for e, _ in self._terms:
            if any(e[nvars:]):
                raise ValueError("polynomial depends on dropped variables")
        return PolyExpr([(e[:nvars], c) for e, c in self._terms], nvars)

    def substitute(self, values: Sequence["PolyExpr"]) -> "PolyExpr":
        """Compose: replace variable ``j`` by ``values[j]``."""
        if len(values) != self.nvars:
            raise ValueError("need one substitute per variable")
        nv = values[0].nvars
        out = PolyExpr((), nv)
        cache: dict[tuple[int, int], PolyExpr] = {}
        for e, c in self._terms:
            term = PolyExpr.const(c, nv)
            for j, k in enumerate(e):
                if k:
                    if (j, k) not in cache:
                        cache[(j, k)] = values[j] ** k
                    term = term * cache[(j, k)]
            out = out + term
        return out

    # evaluation -------------------------------------------------------------
    @cached_property
    def _compiled(self):
        if not self._terms:
            return np.zeros((0, self.nvars), dtype=np.int64), np.zeros(0)
        E = np.array([e for e, _ in self._terms], dtype=np.int64)
        c = np.array([c for _, c in self._terms])
        return E, c

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.nvars,):
            raise ValueError(f"expected a point of length {self.nvars}, got shape {x.shape}")
        return float(self.evaluate_batch(x[None, :])[0])

    def evaluate_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.nvars:
            raise ValueError(f"expected points with {self.nvars} coordinates")
        E, c = self._compiled
        if E.shape[0] == 0:
            return np.zeros(X.shape[0])
        return _monomials(X, E) @ c

    __call__ = evaluate

    # text -----------------------------------------------------------------
    def to_string(self, nx: int | None = None) -> str:
        nx = self.nvars if nx is None else nx
        if not self._terms:
            return "0"
        parts = []
        for i, (e, c) in enumerate(self._terms):
            factors = []
            for j, k in enumerate(e):
                if k:
                    name = f"x{j + 1}" if j < nx else f"u{j - nx + 1}"
                    factors.append(name if k == 1 else f"{name}^{k}")
            mag = abs(c)
            sign = "-" if c < 0 else "+"
            if factors and mag == 1.0:
                body = "*".join(factors)
            else:
                body = "*".join([repr(mag)] + factors)
            if i == 0:
                parts.append(body if sign == "+" else f"-{body}")
            else:
                parts.append(f"{sign} {body}")
        return " ".join(parts)

    def __str__(self):
        return self.to_string()

    def __repr__(self):
        return f"PolyExpr({self.to_string()!r}, nvars={self.nvars})"


def _monomials(X: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Evaluate every monomial row of ``E`` at every point row of ``X``."""
    out = np.ones((X.shape[0], E.shape[0]))
    for j in range(E.shape[1]):
        col = E[:, j]
        kmax = int(col.max()) if col.size else 0
        if kmax == 0:
            continue
        powers = X[:, j : j + 1] ** np.arange(kmax + 1)
        out *= powers[:, col]
    return out


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf|nan)"
    r"|(?P<var>[xu]\d+)|(?P<op>[-+*^()]))"
)


def _tokenize(text: str):
    pos = 0
    toks = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolyParseError(f"unexpected character at {pos} in {text!r}")
        pos = m.end()
        kind = m.lastgroup
        toks.append((kind, m.group(kind)))
    return toks


class _Parser:
    def __init__(self, text: str, nx: int, nu: int):
        self.toks = _tokenize(text)
        self.i = 0
        self.nx, self.nu = nx, nu
        self.nvars = nx + nu
        self.text = text

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self):
        t = self.peek()
        self.i += 1
        return t

    def parse(self) -> PolyExpr:
        if not self.toks:
            raise PolyParseError("empty polynomial string")
        p = self.expr()
        if self.i != len(self.toks):
            raise PolyParseError(f"trailing input in {self.text!r}")
        return p

    def expr(self):
        p = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            q = self.term()
            p = p + q if op == "+" else p - q
        return p

    def term(self):
        p = self.factor()
        while self.peek() == ("op", "*"):
            self.take()
            p = p * self.factor()
        return p

    def factor(self):
        if self.peek() in (("op", "-"), ("op", "+")):
            op = self.take()[1]
            p = self.factor()
            return -p if op == "-" else p
        p = self.base()
        if self.peek() == ("op", "^"):
            self.take()
            kind, val = self.take()
            if kind != "num" or not re.fullmatch(r"\d+", val):
                raise PolyParseError(f"exponent must be a non-negative integer in {self.text!r}")
            p = p ** int(val)
        return p

    def base(self):
        kind, val = self.take()
        if kind == "num":
            return PolyExpr.const(float(val), self.nvars)
        if kind == "var":
            idx = int(val[1:])
            if val[0] == "x":
                if not 1 <= idx <= self.nx:
                    raise PolyParseError(f"{val} out of range (n={self.nx})")
                return PolyExpr.var(idx - 1, self.nvars)
            if not 1 <= idx <= self.nu:
                raise PolyParseError(f"{val} out of range (m={self.nu})")
            return PolyExpr.var(self.nx + idx - 1, self.nvars)
        if (kind, val) == ("op", "("):
            p = self.expr()
            if self.take() != ("op", ")"):
                raise PolyParseError(f"unbalanced parentheses in {self.text!r}")
            return p
        raise PolyParseError(f"unexpected token {val!r} in {self.text!r}")


def parse_poly(text: str, nx: int, nu: int = 0) -> PolyExpr:
    """Parse ``text`` over variables ``x1..x{nx}`` and ``u1..u{nu}``."""
    return _Parser(str(text), nx, nu).parse()


# ---------------------------------------------------------------------------
# matrices


class PolyMatrix:
    """Immutable matrix of :class:`PolyExpr` entries sharing one variable set."""

    __array_ufunc__ = None  # let ndarray @ PolyMatrix reach __rmatmul__

    def __init__(self, entries: Sequence[Sequence[PolyExpr]], nvars: int | None = None,
                 rows: int | None = None, cols: int | None = None,
                 symmetric: bool = False):
        entries = tuple(tuple(r) for r in entries)
        self.rows = len(entries) if rows is None else rows
        self.cols = (len(entries[0]) if entries else 0) if cols is None else cols
        if nvars is None:
            nvars = entries[0][0].nvars if self.rows and self.cols else 1
        self.nvars = nvars
        if len(entries) != self.rows or any(len(r) != self.cols for r in entries):
            raise ValueError("ragged entries")
        for r in entries:
            for p in r:
                if p.nvars != nvars:
                    raise ValueError("entries must share nvars")
        if symmetric:
            if self.rows != self.cols:
                raise ValueError("symmetric matrix must be square")
            for i in range(self.rows):
                for j in range(i):
                    if entries[i][j] != entries[j][i]:
                        raise ValueError(f"entry ({i},{j}) differs from ({j},{i})")
        self.entries = entries
        self.symmetric = symmetric

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __getitem__(self, ij) -> PolyExpr:
        i, j = ij
        return self.entries[i][j]

    # constructors -----------------------------------------------------------
    @classmethod
    def from_array(cls, a, nvars: int, symmetric: bool | None = None) -> "PolyMatrix":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        ent = [[PolyExpr.const(v, nvars) for v in row] for row in a]
        if symmetric is None:
            symmetric = a.shape[0] == a.shape[1] and np.array_equal(a, a.T)
        return cls(ent, nvars, rows=a.shape[0], cols=a.shape[1], symmetric=symmetric)

    @classmethod
    def zeros(cls, rows: int, cols: int, nvars: int) -> "PolyMatrix":
        z = PolyExpr((), nvars)
        return cls([[z] * cols for _ in range(rows)], nvars, rows, cols,
                   symmetric=rows == cols)

    @classmethod
    def identity(cls, n: int, nvars: int) -> "PolyMatrix":
        return cls.from_array(np.eye(n), nvars, symmetric=True)

    @classmethod
    def column(cls, polys: Sequence[PolyExpr]) -> "PolyMatrix":
        return cls([[p] for p in polys], polys[0].nvars)

    @classmethod
    def parse(cls, rows: Sequence[Sequence[str]], nx: int, nu: int = 0,
              symmetric: bool = False) -> "PolyMatrix":
        ent = [[parse_poly(s, nx, nu) for s in r] for r in rows]
        ncols = len(rows[0]) if rows else 0
        return cls(ent, nx + nu, rows=len(rows), cols=ncols, symmetric=symmetric)

    # structure ------------------------------------------------------------
    def map(self, fn, symmetric: bool | None = None) -> "PolyMatrix":
        ent = [[fn(p) for p in r] for r in self.entries]
        sym = self.symmetric if symmetric is None else symmetric
        nv = ent[0][0].nvars if self.rows and self.cols else self.nvars
        return PolyMatrix(ent, nv, self.rows, self.cols, symmetric=sym)

    @property
    def T(self) -> "PolyMatrix":
        ent = [[self.entries[i][j] for i in range(self.rows)] for j in range(self.cols)]
        return PolyMatrix(ent, self.nvars, self.cols, self.rows, symmetric=self.symmetric)

    def col(self, j: int) -> list[PolyExpr]:
        return [self.entries[i][j] for i in range(self.rows)]

    def is_zero(self) -> bool:
        return all(p.is_zero() for r in self.entries for p in r)

    def is_constant(self) -> bool:
        return all(p.is_constant() for r in self.entries for p in r)

    def constant_value(self) -> np.ndarray:
        return np.array([[p.constant_value() for p in r] for r in self.entries],
                        dtype=float).reshape(self.rows, self.cols)

    def depends_on(self, j: int) -> bool:
        return any(p.depends_on(j) for r in self.entries for p in r)

    def diff(self, j: int) -> "PolyMatrix":
        return self.map(lambda p: p.diff(j))

    def extend(self, nvars: int) -> "PolyMatrix":
        return self.map(lambda p: p.extend(nvars))

    def substitute(self, values: Sequence[PolyExpr]) -> "PolyMatrix":
        return self.map(lambda p: p.substitute(values))

    def symmetrized(self) -> "PolyMatrix":
        """``(M + M')/2`` with the symmetric flag set."""
        n = self.rows
        ent = [[(self.entries[i][j] + self.entries[j][i]) * 0.5 for j in range(n)]
               for i in range(n)]
        for i in range(n):
            for j in range(i):
                ent[i][j] = ent[j][i]
        return PolyMatrix(ent, self.nvars, n, n, symmetric=True)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.shape != other.shape:
            raise ValueError("shape mismatch")
        ent = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(self.entries, other.entries)]
        return PolyMatrix(ent, self.nvars, self.rows, self.cols,
                          symmetric=self.symmetric and other.symmetric)

    def __neg__(self):
        return self.map(lambda p: -p)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, s) -> "PolyMatrix":
        """Multiply every entry by a scalar or a :class:`PolyExpr`."""
        return self.map(lambda p: p * s)

    def __matmul__(self, other) -> "PolyMatrix":
        if not isinstance(other, PolyMatrix):
            other = PolyMatrix.from_array(other, self.nvars, symmetric=False)
        if self.cols != other.rows:
            raise ValueError(f"cannot multiply {self.shape} by {other.shape}")
        zero = PolyExpr((), self.nvars)
        ent = []
        for i in range(self.rows):
            row = []
            for j in range(other.cols):
                acc = zero
                for k in range(self.cols):
                    a, b = self.entries[i][k], other.entries[k][j]
                    if not a.is_zero() and not b.is_zero():
                        acc = acc + a * b
                row.append(acc)
            ent.append(row)
        return PolyMatrix(ent, self.nvars, self.rows, other.cols)

    def __rmatmul__(self, other) -> "PolyMatrix":
        return PolyMatrix.from_array(other, self.nvars, symmetric=False) @ self

    def __eq__(self, other):
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        return self.shape == other.shape and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    # evaluation -------------------------------------------------------------
    @cached_property
    def _compiled(self):
        index: dict[Exponent, int] = {}
        for r in self.entries:
            for p in r:
                for e, _ in p.terms:
                    index.setdefault(e, len(index))
        E = np.array(list(index), dtype=np.int64).reshape(len(index), self.nvars)
        C = np.zeros((len(index), self.rows, self.cols))
        for i, r in enumerate(self.entries):
            for j, p in enumerate(r):
                for e, c in p.terms:
                    C[index[e], i, j] = c
        return E, C

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.nvars,):
            raise ValueError(f"expected a point of length {self.nvars}, got shape {x.shape}")
        return self.evaluate_batch(x[None, :])[0]

    def evaluate_batch(self, X) -> np.ndarray:
        """Evaluate at each row of ``X``; returns shape ``(K, rows, cols)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.nvars:
            raise ValueError(f"expected points with {self.nvars} coordinates")
        E, C = self._compiled
        if E.shape[0] == 0:
            return np.zeros((X.shape[0], self.rows, self.cols))
        return np.tensordot(_monomials(X, E), C, axes=(1, 0))

    __call__ = evaluate

    def to_strings(self, nx: int | None = None) -> list[list[str]]:
        return [[p.to_string(nx) for p in r] for r in self.entries]

    def __repr__(self):
        return f"PolyMatrix({self.to_strings()!r})"


def poly_vector(polys: Sequence[PolyExpr]) -> tuple[PolyExpr, ...]:
    return tuple(polys)


def evaluate_vector(v: Sequence[PolyExpr], X) -> np.ndarray:
    """Evaluate a polynomial vector at points ``X``; shape ``(K, len(v))``."""
    return np.stack([p.evaluate_batch(X) for p in v], axis=-1)


# ---------------------------------------------------------------------------
# calculus on vectors / matrices


def jacobian(v: Sequence[PolyExpr], nx: int | None = None) -> PolyMatrix:
    """Entry ``(i, j)`` is ``d v_i / d x_j`` for ``j < nx``."""
    v = list(v)
    nvars = v[0].nvars
    nx = nvars if nx is None else nx
    return PolyMatrix([[p.diff(j) for j in range(nx)] for p in v], nvars, len(v), nx)


def directional_derivative(M: PolyMatrix, v: Sequence[PolyExpr]) -> PolyMatrix:
    """``sum_j dM/dx_j * v_j``."""
    v = list(v)
    out = PolyMatrix.zeros(M.rows, M.cols, M.nvars)
    for j, vj in enumerate(v):
        if vj.is_zero() or not M.depends_on(j):
            continue
        out = out + M.diff(j).scale(vj)
    if M.symmetric:
        out = PolyMatrix(out.entries, out.nvars, out.rows, out.cols, symmetric=True)
    return out


# ---------------------------------------------------------------------------
# systems


@dataclass(frozen=True)
class ControlAffineSystem:
    """``xdot = f(x) + B(x) u`` with polynomial ``f`` and ``B``."""

    f: tuple[PolyExpr, ...]
    B: PolyMatrix
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "f", tuple(self.f))
        n = len(self.f)
        if self.B.rows != n:
            raise ValueError(f"B has {self.B.rows} rows, expected {n}")
        for p in self.f:
            if p.nvars != n:
                raise ValueError("f entries must be polynomials in n variables")
        if self.B.cols and self.B.nvars != n:
            raise ValueError("B entries must be polynomials in n variables")

    @classmethod
    def from_strings(cls, f: Sequence[str], B: Sequence[Sequence[str]] | None,
                     name: str = "") -> "ControlAffineSystem":
        n = len(f)
        fp = tuple(parse_poly(s, n) for s in f)
        if not B or not len(B[0]):
            Bp = PolyMatrix([[] for _ in range(n)], n, n, 0)
        else:
            Bp = PolyMatrix.parse(B, n)
        return cls(fp, Bp, name)

    @property
    def n(self) -> int:
        return len(self.f)

    @property
    def m(self) -> int:
        return self.B.cols

    def b(self, i: int) -> list[PolyExpr]:
        return self.B.col(i)

    @cached_property
    def f_jacobian(self) -> PolyMatrix:
        return jacobian(self.f)

    @cached_property
    def b_jacobians(self) -> tuple[PolyMatrix, ...]:
        return tuple(jacobian(self.b(i)) for i in range(self.m))

    @cached_property
    def f_matrix(self) -> PolyMatrix:
        return PolyMatrix.column(list(self.f))

    def has_constant_B(self) -> bool:
        return self.B.is_constant()

    def f_at(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = self.f_matrix.evaluate_batch(np.atleast_2d(X))[..., 0]
        return out[0] if X.ndim == 1 else out

    def B_at(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        Xb = np.atleast_2d(X)
        if self.m == 0:
            out = np.zeros((Xb.shape[0], self.n, 0))
        else:
            out = self.B.evaluate_batch(Xb)
        return out[0] if X.ndim == 1 else out

    def rhs(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(-1)
        out = self.f_at(x)
        if self.m:
            out = out + self.B_at(x) @ u
        return out

    def feedback_transform(self, alpha: Sequence[PolyExpr], beta) -> "ControlAffineSystem":
        """System under ``u = alpha(x) + beta v`` (constant invertible ``beta``)."""
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        if abs(np.linalg.det(beta)) < 1e-12:
            raise ValueError("beta must be invertible")
        a = PolyMatrix.column(list(alpha))
        f_new = (self.f_matrix + self.B @ a).col(0)
        return ControlAffineSystem(tuple(f_new), self.B @ beta, self.name)

    def linear_coordinate_change(self, T) -> "ControlAffineSystem":
        """System in coordinates ``xi = T x`` for constant invertible ``T``."""
        T = np.asarray(T, dtype=float)
        Tinv = np.linalg.inv(T)
        xs = [sum((PolyExpr.var(k, self.n) * Tinv[j, k] for k in range(self.n)),
                  PolyExpr((), self.n)) for j in range(self.n)]
        f_sub = self.f_matrix.substitute(xs)
        f_new = (T @ f_sub).col(0) if self.n else []
        B_new = T @ self.B.substitute(xs) if self.m else self.B
        return ControlAffineSystem(tuple(f_new), B_new, self.name)

    def linearize(self, x0) -> tuple[np.ndarray, np.ndarray]:
        x0 = np.asarray(x0, dtype=float)
        return self.f_jacobian.evaluate(x0), self.B_at(x0)


@dataclass(frozen=True)
class DifferentialDynamics:
    """``delta_x_dot = A(x, u) delta_x + B(x) delta_u`` with ``A`` over ``(x, u)``."""

    A: PolyMatrix
    B: PolyMatrix
    n: int
    m: int

    def A_at(self, x, u=None) -> np.ndarray:
        u = np.zeros(self.m) if u is None else np.asarray(u, dtype=float).reshape(-1)
        return self.A.evaluate(np.concatenate([np.asarray(x, dtype=float), u]))


def differential_dynamics(sys: ControlAffineSystem) -> DifferentialDynamics:
    n, m = sys.n, sys.m
    nv = n + m
    A = sys.f_jacobian.extend(nv)
    for i in range(m):
        ui = PolyExpr.var(n + i, nv)
        A = A + sys.b_jacobians[i].extend(nv).scale(ui)
    return DifferentialDynamics(A, sys.B, n, m)


def annihilator(B: PolyMatrix | np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of ``null(B')`` for a constant full-column-rank ``B``.

    Returns an ``n x (n - m)`` array ``Bp`` with ``Bp' B = 0``.
    """
    if isinstance(B, PolyMatrix):
        if not B.is_constant():
            raise ValueError("annihilator requires a constant input matrix")
        Bc = B.constant_value()
        n, m = B.rows, B.cols
    else:
        Bc = np.atleast_2d(np.asarray(B, dtype=float))
        n, m = Bc.shape
    if m == 0:
        return np.eye(n)
    if np.linalg.matrix_rank(Bc, tol=tol) < m:
        raise ValueError("input matrix is rank deficient")
    return _complement_basis(Bc, n - m)


def _complement_basis(Bc: np.ndarray, k: int) -> np.ndarray:
    # pivoted Gram-Schmidt of the projected unit vectors: coordinate-aligned
    # inputs give coordinate bases, ties resolve to the lowest index
    n = Bc.shape[0]
    Q, _ = np.linalg.qr(Bc)
    P = np.eye(n) - Q @ Q.T
    cols: list[np.ndarray] = []
    R = P.copy()
    for _ in range(k):
        norms = np.linalg.norm(R, axis=0)
        j = int(np.argmax(norms))
        v = R[:, j] / norms[j]
        v[np.abs(v) < 1e-15] = 0.0
        v /= np.linalg.norm(v)
        cols.append(v)
        R = R - np.outer(v, v @ R)
    return np.array(cols).T.reshape(n, k)
