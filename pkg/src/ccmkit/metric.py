"""Riemannian metric machinery built from a polynomial dual metric ``W(x)``.

Conditions are certified pointwise on finite grids inside a box. Reports
therefore describe a box-grid certificate, not a global one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .polydyn import (ControlAffineSystem, PolyExpr, PolyMatrix, _complement_basis,
                      evaluate_vector)

CERTIFICATE_SCOPE = "box-grid certificate (finite grid inside the stated box; not global)"


class CertificationError(RuntimeError):
    """A pointwise metric or contraction certificate failed to hold."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points_per_dim: tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        ppd = np.atleast_1d(self.points_per_dim)
        if ppd.size == 1 and len(lo) > 1:
            ppd = np.repeat(ppd, len(lo))
        ppd = tuple(int(k) for k in ppd)
        if not (len(lo) == len(hi) == len(ppd)):
            raise ValueError("lower, upper and points_per_dim must have equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("lower must be < upper componentwise")
        if any(k < 1 for k in ppd):
            raise ValueError("points_per_dim must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "points_per_dim", ppd)

    @classmethod
    def box(cls, half_width: float, n: int, points: int) -> "GridSpec":
        return cls((-half_width,) * n, (half_width,) * n, (points,) * n)

    @property
    def n(self) -> int:
        return len(self.lower)

    @property
    def size(self) -> int:
        return int(np.prod(self.points_per_dim))

    @property
    def degenerate(self) -> bool:
        return any(k == 1 for k in self.points_per_dim)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, k) if k > 1 else np.array([0.5 * (a + b)])
                for a, b, k in zip(self.lower, self.upper, self.points_per_dim)]

    def points(self) -> np.ndarray:
        ax = self.axes()
        mesh = np.meshgrid(*ax, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.lower, self.upper, tuple(k * factor for k in self.points_per_dim))

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.array(self.lower) - tol) and np.all(x <= np.array(self.upper) + tol))

    def to_lines(self) -> list[str]:
        return [
            "grid_lower: " + " ".join(repr(v) for v in self.lower),
            "grid_upper: " + " ".join(repr(v) for v in self.upper),
            "grid_points: " + " ".join(str(k) for k in self.points_per_dim),
        ]


def grid_points(grid) -> np.ndarray:
    """Accept a :class:`GridSpec` or an explicit ``(K, n)`` point array."""
    if isinstance(grid, GridSpec):
        return grid.points()
    return np.atleast_2d(np.asarray(grid, dtype=float))


# ---------------------------------------------------------------------------
# metric objects


def verify_bounds(W: PolyMatrix, grid, strict: bool = True) -> tuple[float, float]:
    """Smallest and largest eigenvalue of ``W(x)`` over the grid points.

    With ``strict`` a non-positive smallest eigenvalue raises
    :class:`CertificationError`; otherwise the bounds are returned as found.
    """
    X = grid_points(grid)
    eig = np.linalg.eigvalsh(W.evaluate_batch(X))
    lo, hi = float(eig[:, 0].min()), float(eig[:, -1].max())
    if strict and lo <= 0:
        k = int(np.argmin(eig[:, 0]))
        raise CertificationError(f"W is not positive definite on the grid "
                                 f"(min eig {lo:.3g} at {tuple(X[k])})")
    return lo, hi


@dataclass(frozen=True)
class DualMetric:
    """Dual metric ``W(x)`` with eigenvalue bounds certified on ``box``.

    ``alpha1 <= eig(W(x)) <= alpha2`` on the grid, so the primal metric
    ``M = W^-1`` satisfies ``1/alpha2 <= eig(M) <= 1/alpha1``.
    """

    W: PolyMatrix
    alpha1: float
    alpha2: float
    box: GridSpec | None = None

    def __post_init__(self):
        if not self.W.symmetric:
            raise ValueError("dual metric must be a symmetric PolyMatrix")
        if not self.alpha1 > 0:
            raise CertificationError(f"alpha1 must be positive, got {self.alpha1}")
        if self.alpha2 < self.alpha1:
            raise ValueError("alpha2 must be >= alpha1")

    @classmethod
    def certify(cls, W: PolyMatrix, grid: GridSpec) -> "DualMetric":
        lo, hi = verify_bounds(W, grid)
        return cls(W, lo, hi, grid)

    @classmethod
    def constant(cls, W0, box: GridSpec | None = None) -> "DualMetric":
        W0 = np.atleast_2d(np.asarray(W0, dtype=float))
        W0 = 0.5 * (W0 + W0.T)
        eig = np.linalg.eigvalsh(W0)
        return cls(PolyMatrix.from_array(W0, W0.shape[0], symmetric=True),
                   float(eig[0]), float(eig[-1]), box)

    @property
    def n(self) -> int:
        return self.W.rows

    @property
    def overshoot(self) -> float:
        """Euclidean overshoot ``sqrt(alpha2/alpha1)`` implied by the bounds."""
        return float(np.sqrt(self.alpha2 / self.alpha1))


class MetricEvaluator:
    """Pointwise evaluation of ``W``, ``M = W^-1`` and their derivatives."""

    def __init__(self, source: DualMetric | PolyMatrix):
        if isinstance(source, PolyMatrix):
            source = DualMetric.certify(source, GridSpec.box(1.0, source.rows, 1))
        self.source = source
        self.n = source.n

    @cached_property
    def dW(self) -> tuple[PolyMatrix, ...]:
        return tuple(self.source.W.diff(j) for j in range(self.n))

    @cached_property
    def _dW_stack(self) -> PolyMatrix | None:
        # all partials stacked vertically, evaluated in one pass
        rows = [r for d in self.dW for r in d.entries]
        if all(p.is_zero() for r in rows for p in r):
            return None
        return PolyMatrix(rows, self.n, len(rows), self.n)

    @cached_property
    def is_constant(self) -> bool:
        return self.source.W.is_constant()

    @cached_property
    def _constant_W(self) -> np.ndarray:
        return self.source.W.constant_value()

    @cached_property
    def _constant_M(self) -> np.ndarray:
        return np.linalg.inv(self._constant_W)

    def W(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.is_constant:
            return np.broadcast_to(self._constant_W, (X.shape[0], self.n, self.n)).copy()
        return self.source.W.evaluate_batch(X)

    def M(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.is_constant:
            return np.broadcast_to(self._constant_M, (X.shape[0], self.n, self.n)).copy()
        return np.linalg.inv(self.W(X))

    def dW_at(self, X) -> np.ndarray:
        """Partials ``dW/dx_j`` at each point; shape ``(K, n, n, n)`` indexed ``[k, j]``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        st = self._dW_stack
        if st is None:
            return np.zeros((X.shape[0], self.n, self.n, self.n))
        return st.evaluate_batch(X).reshape(X.shape[0], self.n, self.n, self.n)

    @cached_property
    def _d2W_stack(self) -> PolyMatrix | None:
        rows = [r for di in self.dW for j in range(self.n) for r in di.diff(j).entries]
        if all(p.is_zero() for r in rows for p in r):
            return None
        return PolyMatrix(rows, self.n, len(rows), self.n)

    def d2W_at(self, X) -> np.ndarray:
        """Second partials, shape ``(K, n, n, n, n)`` indexed ``[k, i, j]``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = self.n
        st = self._d2W_stack
        if st is None:
            return np.zeros((X.shape[0], n, n, n, n))
        return st.evaluate_batch(X).reshape(X.shape[0], n, n, n, n)

    def M_derivatives(self, X, order: int = 1):
        """``M`` with its first (and optionally second) partials.

        Uses ``dM_j = -M W_j M`` and
        ``dM_ij = M W_i M W_j M + M W_j M W_i M - M W_ij M``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Mx = self.M(X)
        dW = self.dW_at(X)
        MdW = np.matmul(Mx[:, None], dW)                       # M W_j
        dM = -np.matmul(MdW, Mx[:, None])                       # -M W_j M
        if order == 1:
            return Mx, dM
        d2W = self.d2W_at(X)
        T = np.matmul(MdW[:, :, None], -dM[:, None, :])         # M W_i (M W_j M)
        d2M = T + np.swapaxes(T, 1, 2) - np.matmul(np.matmul(Mx[:, None, None], d2W),
                                                   Mx[:, None, None])
        return Mx, dM, d2M

    def inner(self, x, a, b) -> float:
        return float(np.asarray(a) @ metric_at(self.source, x) @ np.asarray(b))

    def norm(self, x, v) -> float:
        return float(np.sqrt(max(self.inner(x, v, v), 0.0)))


@dataclass(frozen=True)
class Multiplier:
    rho: PolyExpr

    @classmethod
    def constant(cls, value: float, n: int) -> "Multiplier":
        return cls(PolyExpr.const(value, n))

    def __call__(self, X) -> np.ndarray | float:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.rho.evaluate(X)
        return self.rho.evaluate_batch(X)

    def scaled(self, s: float) -> "Multiplier":
        return Multiplier(self.rho * s)

    def shifted(self, c: float) -> "Multiplier":
        return Multiplier(self.rho + c)


def metric_at(W: DualMetric | PolyMatrix, x) -> np.ndarray:
    """Primal metric ``M(x) = W(x)^-1``."""
    Wp = W.W if isinstance(W, DualMetric) else W
    Wx = Wp.evaluate(np.asarray(x, dtype=float))
    eig = np.linalg.eigvalsh(0.5 * (Wx + Wx.T))
    if eig[0] <= 0 or eig[0] < 1e-14 * max(abs(eig[-1]), 1.0):
        raise CertificationError(f"W(x) is singular or indefinite at x={x}")
    M = np.linalg.inv(Wx)
    return 0.5 * (M + M.T)


# ---------------------------------------------------------------------------
# length / energy of discretized curves


def _nodes(c) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(c, "nodes", c), dtype=float))


def segment_speeds(c, M: MetricEvaluator) -> np.ndarray:
    """Squared Riemannian speed ``|c_s|^2`` on each segment (midpoint metric)."""
    nodes = _nodes(c)
    N = nodes.shape[0] - 1
    if N < 1:
        raise ValueError("curve needs at least two nodes")
    d = np.diff(nodes, axis=0) * N
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    Mm = M.M(mid)
    return np.einsum("ki,kij,kj->k", d, Mm, d)


def riemannian_energy(c, M: MetricEvaluator) -> float:
    return float(np.mean(segment_speeds(c, M)))


def riemannian_length(c, M: MetricEvaluator) -> float:
    return float(np.mean(np.sqrt(np.maximum(segment_speeds(c, M), 0.0))))


# ---------------------------------------------------------------------------
# condition checks


@dataclass(frozen=True)
class CheckReport:
    """Outcome of a pointwise matrix-inequality check over grid points."""

    condition: str
    max_eig: float
    worst_point: tuple[float, ...]
    npoints: int
    grid: GridSpec | None = None
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if self.condition == "killing":
            return self.max_eig <= self.extra.get("tol", 1e-9)
        return self.max_eig < 0

    @property
    def max_residual(self) -> float:
        return self.max_eig

    def to_text(self) -> str:
        lines = [
            f"condition: {self.condition}",
            f"value: {self.max_eig!r}",
            "worst_point: " + " ".join(repr(float(v)) for v in self.worst_point),
            f"npoints: {self.npoints}",
            f"passed: {self.passed}",
            f"scope: {CERTIFICATE_SCOPE}",
        ]
        if self.grid is not None:
            lines += self.grid.to_lines()
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k}: {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CheckReport":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, _, v = line.partition(":")
            kv[k.strip()] = v.strip()
        grid = None
        if "grid_lower" in kv:
            grid = GridSpec(tuple(float(v) for v in kv["grid_lower"].split()),
                            tuple(float(v) for v in kv["grid_upper"].split()),
                            tuple(int(v) for v in kv["grid_points"].split()))
        known = {"condition", "value", "worst_point", "npoints", "passed", "scope",
                 "grid_lower", "grid_upper", "grid_points"}
        extra = {}
        for k, v in kv.items():
            if k not in known:
                try:
                    extra[k] = float(v)
                except ValueError:
                    extra[k] = v.strip("'\"")
        wp = tuple(float(v) for v in kv.get("worst_point", "").split())
        return cls(kv["condition"], float(kv["value"]), wp, int(kv["npoints"]), grid, extra)


def _report(name: str, values: np.ndarray, X: np.ndarray, grid, **extra) -> CheckReport:
    k = int(np.argmax(values))
    return CheckReport(name, float(values[k]), tuple(float(v) for v in X[k]), X.shape[0],
                       grid if isinstance(grid, GridSpec) else None, extra)


def _Wdot_f(W: PolyMatrix, sys: ControlAffineSystem, X: np.ndarray) -> np.ndarray:
    """``d_f W`` at each point."""
    F = evaluate_vector(sys.f, X)
    out = np.zeros((X.shape[0], W.rows, W.cols))
    for j in range(sys.n):
        if W.depends_on(j):
            out += W.diff(j).evaluate_batch(X) * F[:, j, None, None]
    return out


def _Wdot_b(W: PolyMatrix, sys: ControlAffineSystem, X: np.ndarray, i: int) -> np.ndarray:
    bi = sys.b(i)
    out = np.zeros((X.shape[0], W.rows, W.cols))
    for j in range(sys.n):
        if W.depends_on(j) and not bi[j].is_zero():
            out += W.diff(j).evaluate_batch(X) * bi[j].evaluate_batch(X)[:, None, None]
    return out


def _as_W(W) -> PolyMatrix:
    return W.W if isinstance(W, DualMetric) else W


def ccm_rho_matrices(sys: ControlAffineSystem, W, rho, lam: float, X) -> np.ndarray:
    """``-d_f W + J W + W J' - rho B B' + 2 lam W`` at each point of ``X``."""
    Wp = _as_W(W)
    rho_p = rho.rho if isinstance(rho, Multiplier) else rho
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Wx = Wp.evaluate_batch(X)
    J = sys.f_jacobian.evaluate_batch(X)
    JW = J @ Wx
    F = -_Wdot_f(Wp, sys, X) + JW + np.swapaxes(JW, 1, 2) + 2 * lam * Wx
    if sys.m:
        Bx = sys.B_at(X)
        F -= rho_p.evaluate_batch(X)[:, None, None] * (Bx @ np.swapaxes(Bx, 1, 2))
    return 0.5 * (F + np.swapaxes(F, 1, 2))


def check_ccm_rho(sys: ControlAffineSystem, W, rho, lam: float, grid) -> CheckReport:
    """Multiplier-form condition: holds iff the reported ``max_eig < 0``."""
    X = grid_points(grid)
    F = ccm_rho_matrices(sys, W, rho, lam, X)
    top = np.linalg.eigvalsh(F)[:, -1]
    return _report("ccm_rho", top, X, grid, **{"lambda": lam})


def ccm_weak_matrices(sys: ControlAffineSystem, W, lam: float, X, u=None) -> np.ndarray:
    """``Bp' (-Wdot + A W + W A' + 2 lam W) Bp`` at each point, fixed input ``u``."""
    Wp = _as_W(W)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    u = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float).reshape(-1)
    Wx = Wp.evaluate_batch(X)
    A = sys.f_jacobian.evaluate_batch(X)
    Wdot = _Wdot_f(Wp, sys, X)
    for i in range(sys.m):
        if u[i] != 0.0:
            A = A + sys.b_jacobians[i].evaluate_batch(X) * u[i]
            Wdot = Wdot + _Wdot_b(Wp, sys, X, i) * u[i]
    AW = A @ Wx
    F = -Wdot + AW + np.swapaxes(AW, 1, 2) + 2 * lam * Wx
    if sys.has_constant_B():
        Bp = _complement_basis(sys.B.constant_value(), sys.n - sys.m) if sys.m else np.eye(sys.n)
        G = Bp.T @ F @ Bp
    else:
        Bx = sys.B_at(X)
        G = np.stack([_complement_basis(Bx[k], sys.n - sys.m).T @ F[k]
                      @ _complement_basis(Bx[k], sys.n - sys.m) for k in range(X.shape[0])])
    return 0.5 * (G + np.swapaxes(G, 1, 2))


def check_ccm_weak(sys: ControlAffineSystem, W, lam: float, grid, u_grid=None) -> CheckReport:
    """Annihilator-form condition, maximized over states and (if given) inputs.

    For constant ``B`` the condition is evaluated at ``u = 0`` only unless an
    explicit ``u_grid`` is passed.
    """
    X = grid_points(grid)
    if sys.m == sys.n:
        return CheckReport("ccm_weak", float("-inf"), tuple(X[0]), X.shape[0],
                           grid if isinstance(grid, GridSpec) else None,
                           {"lambda": lam, "note": "fully actuated"})
    us = [np.zeros(sys.m)] if u_grid is None else [np.asarray(u, dtype=float) for u in grid_points(u_grid)]
    best = np.full(X.shape[0], -np.inf)
    for u in us:
        G = ccm_weak_matrices(sys, W, lam, X, u)
        best = np.maximum(best, np.linalg.eigvalsh(G)[:, -1])
    return _report("ccm_weak", best, X, grid, **{"lambda": lam})


def killing_residuals(sys: ControlAffineSystem, W) -> list[PolyMatrix]:
    """Symbolic ``d_{b_i} W - (db_i/dx) W - W (db_i/dx)'`` for each input column."""
    Wp = _as_W(W)
    out = []
    for i in range(sys.m):
        bi = sys.b(i)
        Jb = sys.b_jacobians[i]
        d = PolyMatrix.zeros(Wp.rows, Wp.cols, Wp.nvars)
        for j in range(sys.n):
            if Wp.depends_on(j) and not bi[j].is_zero():
                d = d + Wp.diff(j).scale(bi[j])
        JW = Jb @ Wp
        out.append(d - JW - JW.T)
    return out


def check_killing(sys: ControlAffineSystem, W, grid) -> CheckReport:
    """Killing-field condition; ``max_eig`` holds the max Frobenius residual."""
    X = grid_points(grid)
    res = killing_residuals(sys, W)
    if all(r.is_zero() for r in res):
        return CheckReport("killing", 0.0, tuple(X[0]), X.shape[0],
                           grid if isinstance(grid, GridSpec) else None,
                           {"identity": True, "tol": 1e-9})
    vals = np.zeros(X.shape[0])
    for r in res:
        vals = np.maximum(vals, np.linalg.norm(r.evaluate_batch(X), axis=(1, 2)))
    return _report("killing", vals, X, grid, identity=False, tol=1e-9)


def check_completeness(W, A_mat, B_vec, grid) -> bool:
    """``lambda_max(W(x)) <= |A x + B|^2`` at every grid point."""
    Wp = _as_W(W)
    X = grid_points(grid)
    A_mat = np.atleast_2d(np.asarray(A_mat, dtype=float))
    B_vec = np.asarray(B_vec, dtype=float).reshape(-1)
    top = np.linalg.eigvalsh(Wp.evaluate_batch(X))[:, -1]
    bound = np.sum((X @ A_mat.T + B_vec) ** 2, axis=1)
    return bool(np.all(top <= bound))


def fit_completeness_bound(W, grid, safety: float = 1.05) -> tuple[np.ndarray, np.ndarray]:
    """Fit ``lambda_max(W) <= c0 + c2 |x|^2`` by least squares, then inflate.

    Returns ``(A, B)`` with ``|A x + B|^2 = c0 + c2 |x|^2``.
    """
    Wp = _as_W(W)
    X = grid_points(grid)
    n = X.shape[1]
    top = np.linalg.eigvalsh(Wp.evaluate_batch(X))[:, -1]
    r2 = np.sum(X**2, axis=1)
    basis = np.stack([np.ones_like(r2), r2], axis=1)
    coef, *_ = np.linalg.lstsq(basis, top, rcond=None)
    c0, c2 = max(coef[0], 1e-12), max(coef[1], 1e-12)
    ratio = np.max(top / (c0 + c2 * r2))
    scale = max(ratio, 1.0) * safety
    c0, c2 = c0 * scale, c2 * scale
    A = np.vstack([np.sqrt(c2) * np.eye(n), np.zeros((1, n))])
    B = np.concatenate([np.zeros(n), [np.sqrt(c0)]])
    return A, B


# ---------------------------------------------------------------------------
# transforms


def transform_metric(W: DualMetric, Phi, grid: GridSpec | None = None) -> DualMetric:
    """``Phi W Phi'`` with ``Phi`` a constant matrix or a ``PolyMatrix``."""
    grid = grid if grid is not None else W.box
    if not isinstance(Phi, PolyMatrix):
        Phi = PolyMatrix.from_array(Phi, W.W.nvars, symmetric=False)
    if grid is not None:
        dets = np.linalg.det(Phi.evaluate_batch(grid.points()))
        if np.any(np.abs(dets) < 1e-12):
            raise ValueError("Phi is singular at a grid point")
    elif Phi.is_constant() and abs(np.linalg.det(Phi.constant_value())) < 1e-12:
        raise ValueError("Phi is singular")
    Wn = (Phi @ W.W @ Phi.T).symmetrized()
    if grid is not None:
        return DualMetric.certify(Wn, grid)
    return _uncertified(Wn)


def linear_change_of_metric(W: DualMetric, T, grid: GridSpec | None = None) -> DualMetric:
    """Dual metric in coordinates ``xi = T x``: ``T W(T^-1 xi) T'``."""
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    Tinv = np.linalg.inv(T)
    xs = [sum((PolyExpr.var(k, n) * Tinv[j, k] for k in range(n)), PolyExpr((), n))
          for j in range(n)]
    Wsub = W.W.substitute(xs)
    Wn = PolyMatrix((T @ Wsub @ T.T).entries, n, n, n).symmetrized()
    if grid is not None:
        return DualMetric.certify(Wn, grid)
    return _uncertified(Wn)


def _uncertified(Wn: PolyMatrix) -> DualMetric:
    # bounds at the origin only; callers that need a certificate pass a grid
    eig = np.linalg.eigvalsh(Wn.evaluate(np.zeros(Wn.nvars)))
    return DualMetric(Wn, float(eig[0]), float(eig[-1]), None)


def grid_product(*axes: Sequence[float]) -> np.ndarray:
    return np.array(list(itertools.product(*axes)), dtype=float)
