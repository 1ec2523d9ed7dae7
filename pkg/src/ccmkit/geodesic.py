"""Minimal geodesics by direct minimization of a discretized energy.

A curve is stored as ``N + 1`` nodes on the uniform grid ``s_k = k / N``.
Tangents are forward differences per segment and the metric is evaluated at
segment midpoints, so the quadrature energy is

    E = N * sum_k  d_k' M(mid_k) d_k,      d_k = c_{k+1} - c_k.

The interior nodes are optimized with L-BFGS using the analytic gradient.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import minimize

from .metric import MetricEvaluator
from .polydyn import PolyMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscretizedCurve:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if nodes.shape[0] < 3:
            raise ValueError("a discretized curve needs at least two segments")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def straight(cls, x0, x1, N: int = 32) -> "DiscretizedCurve":
        x0, x1 = np.asarray(x0, dtype=float), np.asarray(x1, dtype=float)
        s = np.linspace(0.0, 1.0, N + 1)[:, None]
        nodes = (1 - s) * x0 + s * x1
        nodes[0], nodes[-1] = x0, x1
        return cls(nodes)

    @property
    def N(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def s_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N + 1)

    @property
    def start(self) -> np.ndarray:
        return self.nodes[0]

    @property
    def end(self) -> np.ndarray:
        return self.nodes[-1]

    def tangents(self) -> np.ndarray:
        """Per-segment tangent ``c_s`` (forward differences)."""
        return np.diff(self.nodes, axis=0) * self.N

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    def is_degenerate(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.nodes - self.nodes[0]) <= tol))

    def refined(self) -> "DiscretizedCurve":
        """Same piecewise-linear curve with every segment halved."""
        mids = self.midpoints()
        nodes = np.empty((2 * self.N + 1, self.nodes.shape[1]))
        nodes[0::2] = self.nodes
        nodes[1::2] = mids
        return DiscretizedCurve(nodes)

    def shifted(self, x0_new, x1_new) -> "DiscretizedCurve":
        """Warm start: move the endpoints, blending the displacement along ``s``."""
        s = self.s_grid[:, None]
        d0 = np.asarray(x0_new, dtype=float) - self.start
        d1 = np.asarray(x1_new, dtype=float) - self.end
        nodes = self.nodes + (1 - s) * d0 + s * d1
        nodes[0], nodes[-1] = x0_new, x1_new
        return DiscretizedCurve(nodes)


class PrimalMetricEvaluator(MetricEvaluator):
    """Metric given directly by a polynomial ``M(x)`` (its inverse need not be polynomial)."""

    def __init__(self, M: PolyMatrix):
        self.Mpoly = M
        self.n = M.rows
        self.source = None

    @cached_property
    def dM(self) -> tuple[PolyMatrix, ...]:
        return tuple(self.Mpoly.diff(j) for j in range(self.n))

    @cached_property
    def is_constant(self) -> bool:
        return self.Mpoly.is_constant()

    def M(self, X) -> np.ndarray:
        return self.Mpoly.evaluate_batch(np.atleast_2d(np.asarray(X, dtype=float)))

    def W(self, X) -> np.ndarray:
        return np.linalg.inv(self.M(X))

    def M_derivatives(self, X, order: int = 1):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Mx = self.M(X)
        dM = np.stack([d.evaluate_batch(X) for d in self.dM], axis=1)
        if order == 1:
            return Mx, dM
        d2M = np.stack([np.stack([d.diff(j).evaluate_batch(X) for j in range(self.n)], axis=1)
                        for d in self.dM], axis=1)
        return Mx, dM, d2M

    def dW_at(self, X) -> np.ndarray:
        Mx, dM = self.M_derivatives(X)
        Wx = np.linalg.inv(Mx)
        return -np.einsum("kab,kjbc,kcd->kjad", Wx, dM, Wx)

    def inner(self, x, a, b) -> float:
        return float(np.asarray(a) @ self.M(x)[0] @ np.asarray(b))


def _metric_and_derivs(M: MetricEvaluator, X: np.ndarray):
    """``M(x)`` and ``dM/dx_j`` at each point; ``dM`` has shape ``(K, n, n, n)``."""
    if M.is_constant:
        return M.M(X), None
    return M.M_derivatives(X)


def energy_and_gradient(nodes: np.ndarray, M: MetricEvaluator):
    """Discrete energy, its gradient w.r.t. every node, and per-segment ``|c_s|^2``."""
    N = nodes.shape[0] - 1
    d = np.diff(nodes, axis=0)
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    Mx, dM = _metric_and_derivs(M, mid)
    eta = np.matmul(Mx, d[:, :, None])[:, :, 0]
    q = np.sum(d * eta, axis=1)
    E = N * q.sum()
    # d/dmid of d' M(mid) d
    if dM is None:
        gm = np.zeros_like(d)
    else:
        gm = np.matmul(np.matmul(d[:, None, None, :], dM), d[:, None, :, None])[:, :, 0, 0]
    grad = np.zeros_like(nodes)
    # segment k contributes to node k (start) and node k+1 (end)
    grad[:-1] += N * (-2 * eta + 0.5 * gm)
    grad[1:] += N * (2 * eta + 0.5 * gm)
    return E, grad, q * N * N


def energy_hessian(nodes: np.ndarray, M: MetricEvaluator):
    """Energy, gradient and the block-tridiagonal Hessian over all nodes.

    Returns ``(E, grad, diag, off)`` with ``diag`` of shape ``(N+1, n, n)``
    and ``off[k]`` the block coupling node ``k`` (rows) to node ``k+1``.
    """
    N = nodes.shape[0] - 1
    n = nodes.shape[1]
    d = np.diff(nodes, axis=0)
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    if M.is_constant:
        Mx = M.M(mid)
        dM = np.zeros((N, n, n, n))
        d2M = np.zeros((N, n, n, n, n))
    else:
        Mx, dM, d2M = M.M_derivatives(mid, order=2)
    eta = np.matmul(Mx, d[:, :, None])[:, :, 0]
    E = N * float(np.sum(d * eta))
    Mjd = np.matmul(dM, d[:, None, :, None])[..., 0]          # (N, j, i): (M_j d)_i
    gm = np.sum(Mjd * d[:, None, :], axis=2)
    grad = np.zeros_like(nodes)
    grad[:-1] += N * (-2 * eta + 0.5 * gm)
    grad[1:] += N * (2 * eta + 0.5 * gm)
    Hdd = 2 * N * Mx
    Hdm = 2 * N * np.swapaxes(Mjd, 1, 2)                        # [i, j] = 2N (M_j d)_i
    Hmm = N * np.matmul(np.matmul(d[:, None, None, None, :], d2M),
                        d[:, None, None, :, None])[..., 0, 0]
    sym = 0.5 * (Hdm + np.swapaxes(Hdm, 1, 2))
    Haa = Hdd - sym + 0.25 * Hmm
    Hbb = Hdd + sym + 0.25 * Hmm
    Hab = -Hdd - 0.5 * Hdm + 0.5 * np.swapaxes(Hdm, 1, 2) + 0.25 * Hmm
    diag = np.zeros((N + 1, n, n))
    diag[:-1] += Haa
    diag[1:] += Hbb
    return E, grad, diag, Hab


def _newton(nodes0: np.ndarray, M: MetricEvaluator, tol: float, max_iter: int, bounds=None):
    """Damped Newton iteration on the interior nodes.

    The step solves ``(H + mu I) p = -g`` with ``mu`` raised until the
    Cholesky factorization succeeds, followed by Armijo backtracking. Bounds
    are handled by projecting trial points onto the box.
    """
    from scipy.linalg import cho_factor, cho_solve

    nodes = nodes0.copy()
    if bounds is not None:
        nodes[1:-1] = np.clip(nodes[1:-1], bounds[0], bounds[1])
    N, n = nodes.shape[0] - 1, nodes.shape[1]
    p = (N - 1) * n
    E, g, D, O = energy_hessian(nodes, M)
    mu = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        gfull = g[1:-1].ravel()
        active = np.zeros(p, dtype=bool)
        if bounds is not None:
            inner = nodes[1:-1].ravel()
            lo, hi = np.tile(bounds[0], N - 1), np.tile(bounds[1], N - 1)
            active = (inner <= lo) & (gfull > 0) | (inner >= hi) & (gfull < 0)
        gi = np.where(active, 0.0, gfull)
        if np.linalg.norm(gi) <= tol * (1 + E):
            return nodes, it - 1, True
        H = np.zeros((p, p))
        for k in range(1, N):
            r = slice((k - 1) * n, k * n)
            H[r, r] = D[k]
            if k < N - 1:
                r2 = slice(k * n, (k + 1) * n)
                H[r, r2] = O[k]
                H[r2, r] = O[k].T
        # projected Newton: variables held at an active bound do not move
        free = ~active
        Hf = H[np.ix_(free, free)]
        scale = np.abs(np.diag(Hf)).max()
        mu = max(mu * 0.1, 0.0)
        while True:
            try:
                cf = cho_factor(Hf + mu * scale * np.eye(Hf.shape[0]))
                break
            except np.linalg.LinAlgError:
                mu = max(1e-8, mu * 10)
        sv = np.zeros(p)
        sv[free] = -cho_solve(cf, gfull[free])
        step = sv.reshape(N - 1, n)
        t = 1.0
        slope = float(gfull @ sv)
        accepted = False
        while t > 1e-10:
            trial = nodes.copy()
            trial[1:-1] += t * step
            if bounds is not None:
                trial[1:-1] = np.clip(trial[1:-1], bounds[0], bounds[1])
            try:
                Et = energy_and_gradient(trial, M)[0]
            except np.linalg.LinAlgError:
                Et = np.inf
            if np.isfinite(Et) and Et <= E + 1e-4 * t * min(slope, 0.0):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if mu >= 1e6:
                break
            mu = max(1e-6, mu * 100)
            continue
        nodes = trial
        E, g, D, O = energy_hessian(nodes, M)
    return nodes, it, False


@dataclass
class GeodesicResult:
    curve: DiscretizedCurve
    energy: float
    length: float
    converged: bool
    speed_variation: float
    grad_norm: float = 0.0
    iterations: int = 0
    near_cut_locus: bool = False
    endpoint_gradients: tuple[np.ndarray, np.ndarray] = field(default=None, repr=False)

    @property
    def distance(self) -> float:
        return self.length

    def to_csv(self, M: MetricEvaluator | None = None) -> str:
        """Rows ``s, x_1..x_n, speed`` where ``speed`` is the segment's ``|c_s|^2``."""
        nodes = self.curve.nodes
        n = nodes.shape[1]
        speeds = np.full(nodes.shape[0], np.nan)
        if M is not None and not self.curve.is_degenerate():
            _, _, q = energy_and_gradient(nodes, M)
            speeds[:-1] = q
            speeds[-1] = q[-1]
        buf = io.StringIO()
        buf.write(f"# energy={self.energy!r} length={self.length!r} converged={self.converged}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s"] + [f"x_{i + 1}" for i in range(n)] + ["speed"])
        for s, row, sp in zip(self.curve.s_grid, nodes, speeds):
            w.writerow([repr(float(s))] + [repr(float(v)) for v in row] + [repr(float(sp))])
        return buf.getvalue()


def _speed_variation(q: np.ndarray) -> float:
    mean = q.mean()
    if mean <= 0:
        return 0.0
    return float((q.max() - q.min()) / mean)


def _minimize(nodes0: np.ndarray, M: MetricEvaluator, gtol: float, max_iter: int,
              bounds=None):
    x0, x1 = nodes0[0], nodes0[-1]
    shape = nodes0[1:-1].shape
    lb = None
    if bounds is not None:
        lo, hi = bounds
        nodes0 = np.clip(nodes0, lo, hi)
        lb = list(zip(np.tile(lo, shape[0]), np.tile(hi, shape[0])))

    def fun(z):
        nodes = np.vstack([x0, z.reshape(shape), x1])
        E, g, _ = energy_and_gradient(nodes, M)
        return E, g[1:-1].ravel()

    res = minimize(fun, nodes0[1:-1].ravel(), jac=True, method="L-BFGS-B", bounds=lb,
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 20})
    nodes = np.vstack([x0, res.x.reshape(shape), x1])
    return nodes, int(res.nit)


def _box_of(M: MetricEvaluator):
    box = getattr(getattr(M, "source", None), "box", None)
    if box is None or box.degenerate:
        return None
    return np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)


def geodesic(x_star, x, M: MetricEvaluator, N: int = 32, *, init: DiscretizedCurve | None = None,
             tol: float = 1e-6, max_iter: int = 5000, check_cut_locus: bool = False,
             seed: int = 0, bounds="auto") -> GeodesicResult:
    """Minimal geodesic from ``x_star`` (``s = 0``) to ``x`` (``s = 1``).

    The returned energy never exceeds that of the straight segment. With
    ``check_cut_locus`` a bent initialization is also optimized; energies
    that differ by more than 1% flag the pair as near the cut locus.

    ``bounds`` confines the interior nodes to a box. The default uses the
    box on which the metric was certified (if any), since outside it the
    metric may be indefinite and the energy unbounded below. The box is
    widened when needed to contain both endpoints. Pass ``None`` to search
    without bounds.
    """
    x_star = np.asarray(x_star, dtype=float)
    x = np.asarray(x, dtype=float)
    if isinstance(bounds, str):
        bounds = _box_of(M)
    if bounds is not None:
        lo = np.minimum(np.minimum(bounds[0], x_star), x)
        hi = np.maximum(np.maximum(bounds[1], x_star), x)
        bounds = (lo, hi)
    straight = DiscretizedCurve.straight(x_star, x, N)
    if np.array_equal(x_star, x):
        zero = np.zeros_like(x)
        return GeodesicResult(straight, 0.0, 0.0, True, 0.0, endpoint_gradients=(zero, zero))
    E_line, _, _ = energy_and_gradient(straight.nodes, M)

    def solve(start: DiscretizedCurve):
        if M.is_constant:
            return start.nodes if start is straight else straight.nodes, 0
        nodes, nit, ok = _newton(start.nodes, M, tol, 50, bounds)
        if ok:
            return nodes, nit
        logger.debug("Newton stalled after %d steps; switching to L-BFGS-B", nit)
        gtol = tol * (1 + E_line) / np.sqrt(max(1, (N - 1) * x.size))
        nodes2, nit2 = _minimize(nodes, M, gtol, max_iter, bounds)
        return nodes2, nit + nit2

    candidates = []
    if init is not None and init.N == N:
        candidates.append(solve(init.shifted(x_star, x)))
    if not candidates or check_cut_locus:
        candidates.append(solve(straight))
    near_cut = False
    if check_cut_locus and not M.is_constant:
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(x.size)
        dx = x - x_star
        v -= dx * (v @ dx) / max(dx @ dx, 1e-300)
        nv = np.linalg.norm(v)
        if nv > 0:
            bump = 0.5 * np.linalg.norm(dx) * v / nv
            s = straight.s_grid[:, None]
            bent = DiscretizedCurve(straight.nodes + np.sin(np.pi * s) * bump)
            candidates.append(solve(bent))
    scored = []
    for nodes, nit in candidates:
        E, g, q = energy_and_gradient(nodes, M)
        scored.append((E, nodes, g, q, nit))
    scored.sort(key=lambda t: t[0])
    if check_cut_locus and len(scored) > 1 and scored[-1][0] > 1.01 * scored[0][0]:
        near_cut = True
    E, nodes, g, q, nit = scored[0]
    if E > E_line:
        nodes = straight.nodes
        E, g, q = energy_and_gradient(nodes, M)
    gi = g[1:-1]
    if bounds is not None:
        # projected gradient: components pushing against an active bound do not count
        inner = nodes[1:-1]
        gi = np.where((inner <= bounds[0]) & (gi > 0) | (inner >= bounds[1]) & (gi < 0), 0.0, gi)
    gnorm = float(np.linalg.norm(gi))
    sv = _speed_variation(q)
    converged = gnorm <= tol * (1 + E) and sv <= 0.05
    L = float(np.mean(np.sqrt(np.maximum(q, 0.0))))
    return GeodesicResult(DiscretizedCurve(nodes), float(E), L, converged, sv, gnorm, nit,
                          near_cut, (g[0].copy(), g[-1].copy()))


def energy_first_variation(g: GeodesicResult, xdot_star, xdot) -> float:
    """Half the time derivative of the geodesic energy for moving endpoints.

    Uses the endpoint gradients of the discrete energy; at a stationary curve
    these are ``-2 <c_s(0), .>`` at ``x_star`` and ``+2 <c_s(1), .>`` at ``x``.
    """
    if g.curve.is_degenerate():
        raise ValueError("first variation is undefined for a degenerate curve")
    g0, g1 = g.endpoint_gradients
    return 0.5 * float(g1 @ np.asarray(xdot, dtype=float) + g0 @ np.asarray(xdot_star, dtype=float))


def energy_rate_affine(g: GeodesicResult, sys, x, xdot_star) -> tuple[float, np.ndarray]:
    """``(c0, a)`` with ``0.5 dE/dt = c0 + a' u`` for ``xdot = f(x) + B(x) u``."""
    g0, g1 = g.endpoint_gradients
    x = np.asarray(x, dtype=float)
    c0 = 0.5 * float(g1 @ sys.f_at(x) + g0 @ np.asarray(xdot_star, dtype=float))
    a = 0.5 * sys.B_at(x).T @ g1
    return c0, a
