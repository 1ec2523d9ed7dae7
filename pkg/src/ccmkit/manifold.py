"""Convergence to submanifolds ``{x : z(x) = c}``.

Two tools: the virtual control system, which adds the tangent directions of
the level sets of ``z`` as extra inputs, and a gridded check of the convex
condition that makes an uncontrolled system converge to a level set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metric import CheckReport, GridSpec, _Wdot_f, _as_W, _report, grid_points
from .polydyn import (ControlAffineSystem, PolyExpr, PolyMatrix, _complement_basis,
                      directional_derivative, evaluate_vector, jacobian, parse_poly)


class ManifoldError(ValueError):
    """Rank or invariance precondition failed."""


class ConvergenceError(RuntimeError):
    """The residual ``|z(x(t)) - c|`` does not decay."""


@dataclass(frozen=True)
class ManifoldSpec:
    z: tuple[PolyExpr, ...]
    c: np.ndarray

    def __post_init__(self):
        z = tuple(self.z)
        if not z:
            raise ValueError("z must have at least one component")
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if c.size == 1 and len(z) > 1:
            c = np.full(len(z), float(c[0]))
        if c.size != len(z):
            raise ValueError("level c must match the length of z")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "c", c)

    @classmethod
    def from_strings(cls, z: Sequence[str], n: int, c=0.0) -> "ManifoldSpec":
        return cls(tuple(parse_poly(s, n) for s in z), c)

    @property
    def q(self) -> int:
        return len(self.z)

    @property
    def n(self) -> int:
        return self.z[0].nvars

    @property
    def jacobian(self) -> PolyMatrix:
        return jacobian(self.z)

    def residual(self, X) -> np.ndarray:
        """``z(x) - c`` for a batch of states, shape ``(K, q)``."""
        return evaluate_vector(self.z, np.atleast_2d(np.asarray(X, dtype=float))) - self.c

    def check_rank(self, grid) -> None:
        X = grid_points(grid)
        D = self.jacobian.evaluate_batch(X)
        sv = np.linalg.svd(D, compute_uv=False)[:, -1]
        k = int(np.argmin(sv))
        if sv[k] <= 1e-10:
            raise ManifoldError(f"dz/dx loses rank at {tuple(X[k])}")


@dataclass(frozen=True)
class VirtualSystem:
    """``xdot = f + B u + G v`` where the columns of ``G`` span ``null(dz/dx)``."""

    base: ControlAffineSystem
    B_bar: PolyMatrix
    G: PolyMatrix

    @property
    def system(self) -> ControlAffineSystem:
        return ControlAffineSystem(self.base.f, self.B_bar, name=f"{self.base.name}-virtual")


def _null_vector_cofactors(D: PolyMatrix) -> PolyMatrix:
    """Polynomial null vector of a ``(n-1) x n`` matrix by signed maximal minors."""
    n = D.cols
    col = []
    for i in range(n):
        keep = [j for j in range(n) if j != i]
        sub = [[D[r, j] for j in keep] for r in range(D.rows)]
        col.append(_det(sub) * ((-1) ** i))
    return PolyMatrix([[p] for p in col], D.nvars, n, 1)


def _det(A: list[list[PolyExpr]]) -> PolyExpr:
    k = len(A)
    if k == 1:
        return A[0][0]
    out = PolyExpr.const(0.0, A[0][0].nvars)
    for j in range(k):
        minor = [row[:j] + row[j + 1:] for row in A[1:]]
        term = A[0][j] * _det(minor)
        out = out + term if j % 2 == 0 else out - term
    return out


def build_virtual(sys: ControlAffineSystem, spec: ManifoldSpec, grid) -> VirtualSystem:
    """Augment ``B`` with a basis ``G`` of the null space of ``dz/dx``.

    A constant Jacobian gives an orthonormal constant ``G``. A non-constant
    Jacobian with ``q = n - 1`` gives a single polynomial column from signed
    minors. Other non-constant cases have no generic polynomial basis and
    raise.
    """
    if spec.n != sys.n:
        raise ValueError("manifold and system dimensions differ")
    spec.check_rank(grid)
    D = spec.jacobian
    n, q = sys.n, spec.q
    if D.is_constant():
        Dc = D.constant_value()
        G = PolyMatrix.from_array(_complement_basis(Dc.T, n - q), n, symmetric=False)
    elif q == n - 1:
        G = _null_vector_cofactors(D)
    else:
        raise ManifoldError("no polynomial null-space basis for a non-constant dz/dx "
                            f"with q={q}, n={n}")
    X = grid_points(grid)
    res = np.abs(D.evaluate_batch(X) @ G.evaluate_batch(X)).max()
    if res > 1e-10:
        raise ManifoldError(f"null-space basis check failed (residual {res:.3g})")
    cols = [sys.B.col(j) for j in range(sys.m)] + [G.col(j) for j in range(G.cols)]
    B_bar = PolyMatrix([[c[i] for c in cols] for i in range(n)], n, n, len(cols))
    return VirtualSystem(sys, B_bar, G)


def level_set_invariance(W, G: PolyMatrix, grid, tol: float = 1e-9) -> float:
    """Largest ``|d_v W|`` over the grid for ``v`` in the columns of ``G``.

    Zero when the derivatives vanish symbolically.
    """
    Wp = _as_W(W)
    worst = 0.0
    X = None
    for j in range(G.cols):
        dv = directional_derivative(Wp, G.col(j))
        if dv.is_zero():
            continue
        X = grid_points(grid) if X is None else X
        worst = max(worst, float(np.abs(dv.evaluate_batch(X)).max()))
    return worst


def check_corollary2(sys: ControlAffineSystem, spec: ManifoldSpec, W, lam: float, grid,
                     tol: float = 1e-9) -> CheckReport:
    """Gridded check of ``Dz (-d_f W + J W + W J' + 2 lam W) Dz' < 0``.

    The system must be uncontrolled, and ``W`` must not vary along the level
    sets of ``z``: ``d_v W = 0`` for every ``v`` in ``null(dz/dx)``.
    """
    if sys.m and not sys.B.is_zero():
        raise ManifoldError("the convergence condition applies to uncontrolled systems")
    Wp = _as_W(W)
    vs = build_virtual(ControlAffineSystem(sys.f, PolyMatrix.zeros(sys.n, 0, sys.n)), spec, grid)
    inv = level_set_invariance(Wp, vs.G, grid, tol)
    if inv > tol:
        raise ManifoldError(f"W varies along the level sets of z (|d_v W| up to {inv:.3g})")
    X = grid_points(grid)
    Wx = Wp.evaluate_batch(X)
    J = sys.f_jacobian.evaluate_batch(X)
    JW = J @ Wx
    inner = -_Wdot_f(Wp, sys, X) + JW + np.swapaxes(JW, 1, 2) + 2 * lam * Wx
    D = spec.jacobian.evaluate_batch(X)
    S = D @ inner @ np.swapaxes(D, 1, 2)
    vals = np.linalg.eigvalsh(S)[:, -1]
    return _report("corollary2", vals, X, grid, invariance=inv)


@dataclass(frozen=True)
class ConvergenceReport:
    rate_estimate: float
    max_residual: float
    initial_residual: float


def verify_convergence(spec: ManifoldSpec, trace, floor: float = 1e-12) -> ConvergenceReport:
    """Fit ``|z(x(t)) - c| ~ exp(-rate t)`` by least squares on the log residual.

    Samples below ``floor`` (relative to the initial residual) are dropped.
    A trace that starts on the manifold reports an infinite rate.
    """
    r = np.linalg.norm(spec.residual(trace.states), axis=1)
    t = np.asarray(trace.times, dtype=float)
    if r[0] <= floor:
        return ConvergenceReport(float("inf"), float(r.max()), float(r[0]))
    ok = r > floor * r[0]
    if ok.sum() < 2:
        raise ConvergenceError("not enough samples above the floor to fit a rate")
    slope = np.polyfit(t[ok], np.log(r[ok]), 1)[0]
    if slope >= 0:
        raise ConvergenceError(f"residual does not decay (fitted growth rate {slope:.3g})")
    return ConvergenceReport(float(-slope), float(r.max()), float(r[0]))
