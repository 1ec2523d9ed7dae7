"""Grid-based convex search for a dual metric ``W`` and multiplier ``rho``.

The decision vector ``theta`` stacks the coefficients of the upper-triangular
entries of ``W`` (one block per entry, one coefficient per basis monomial)
followed by the coefficients of ``rho``. At each grid point the multiplier
form of the contraction condition is a symmetric matrix that is linear in
``theta``, so the worst-case eigenvalue over the grid is a convex function
of ``theta``. It is minimized by a cutting-plane (outer approximation)
method or by projected subgradient descent.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import null_space, solve_continuous_are
from scipy.optimize import linprog, minimize_scalar

from .metric import (CheckReport, DualMetric, GridSpec, Multiplier, check_ccm_rho,
                     check_killing, grid_points, verify_bounds)
from .polydyn import (ControlAffineSystem, Exponent, PolyExpr, PolyMatrix, _monomials,
                      evaluate_vector, parse_poly)

logger = logging.getLogger(__name__)


class AREError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Riccati


@dataclass(frozen=True)
class LQRProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "Q", "R"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.B.shape[0] != self.A.shape[0]:
            object.__setattr__(self, "B", self.B.reshape(self.A.shape[0], -1))


def solve_lyapunov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A' X + X A + Q = 0`` through the Kronecker-product linear system."""
    n = A.shape[0]
    I = np.eye(n)
    K = np.kron(I, A.T) + np.kron(A.T, I)
    x = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    X = x.reshape(n, n, order="F")
    return 0.5 * (X + X.T)


def _stabilizing_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    # Bass's eigenvalue-shift construction: with beta above the spectral radius,
    # (A + beta I) Z + Z (A + beta I)' = 2 B B' gives K = B' Z^-1 stabilizing.
    # It needs controllability; a pair that is only stabilizable is seeded
    # from scipy's Schur-based Riccati solver instead.
    n = A.shape[0]
    if np.max(np.linalg.eigvals(A).real) < 0:
        return np.zeros((B.shape[1], n))
    beta = np.max(np.abs(np.linalg.eigvals(A))) + 1.0
    As = A + beta * np.eye(n)
    Z = solve_lyapunov(As.T, -2 * B @ B.T)
    if np.min(np.linalg.eigvalsh(Z)) > 1e-10 * max(1.0, np.max(np.abs(Z))):
        return B.T @ np.linalg.inv(Z)
    try:
        P0 = solve_continuous_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise AREError("no stabilizing gain found: (A, B) is not stabilizable") from exc
    K = np.linalg.solve(R, B.T @ P0)
    if not np.all(np.isfinite(K)) or np.max(np.linalg.eigvals(A - B @ K).real) >= 0:
        raise AREError("no stabilizing gain found: (A, B) is not stabilizable")
    return K


def solve_are(prob: LQRProblem, tol: float = 1e-12, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Newton-Kleinman iteration for ``A'P + PA - P B R^-1 B' P + Q = 0``.

    Returns ``(P, K)`` with ``K = R^-1 B' P`` so that ``A - B K`` is Hurwitz.
    """
    A, B, Q, R = prob.A, prob.B, prob.Q, prob.R
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    Rinv = np.linalg.inv(R)
    K = _stabilizing_gain(A, B, Q, R)
    P = None
    for _ in range(max_iter):
        Acl = A - B @ K
        if np.max(np.linalg.eigvals(Acl).real) >= 0:
            raise AREError("Newton-Kleinman iterate lost stability")
        P_new = solve_lyapunov(Acl, Q + K.T @ R @ K)
        K = Rinv @ B.T @ P_new
        if P is not None and np.linalg.norm(P_new - P) <= tol * max(1.0, np.linalg.norm(P_new)):
            P = P_new
            break
        P = P_new
    else:
        raise AREError("Newton-Kleinman iteration did not converge")
    if are_residual(prob, P) > 1e-8 * max(1.0, np.linalg.norm(P)):
        raise AREError("Riccati residual too large")
    return P, K


def are_residual(prob: LQRProblem, P: np.ndarray) -> float:
    A, B, Q, R = prob.A, prob.B, prob.Q, prob.R
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.linalg.norm(res))


# ---------------------------------------------------------------------------
# problem definition


def monomial_basis(n: int, degree: int, variables: Sequence[int] | None = None) -> list[Exponent]:
    """All monomials up to ``degree`` in the listed variable indices (graded order)."""
    variables = list(range(n)) if variables is None else list(variables)
    out: list[Exponent] = []
    for d in range(degree + 1):
        def rec(start, remaining, cur):
            if remaining == 0:
                e = [0] * n
                for v in cur:
                    e[v] += 1
                out.append(tuple(e))
                return
            for i in range(start, len(variables)):
                rec(i, remaining - 1, cur + [variables[i]])
        rec(0, d, [])
    return out


def killing_safe_variables(sys: ControlAffineSystem) -> list[int]:
    """State indices a dual metric may depend on without breaking the Killing condition.

    For constant input columns the condition reads ``d_{b_i} W = 0``, which is
    guaranteed when ``W`` ignores every coordinate that some ``b_i`` moves.
    """
    if not sys.has_constant_B():
        return list(range(sys.n))
    Bc = sys.B.constant_value()
    return [j for j in range(sys.n) if not np.any(Bc[j] != 0)]


@dataclass
class SynthesisProblem:
    sys: ControlAffineSystem
    lam: float
    grid: GridSpec
    W_basis: list[Exponent]
    rho_basis: list[Exponent]
    margin: float = 1e-3
    alpha1: float = 1e-3
    W_anchor: tuple[np.ndarray, np.ndarray] | None = None
    rho_anchor: tuple[np.ndarray, float] | None = None
    rho_weight: float = 0.1

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not self.W_basis or not self.rho_basis and self.sys.m:
            raise ValueError("bases must be non-empty")
        self.W_basis = [tuple(int(k) for k in e) for e in self.W_basis]
        self.rho_basis = [tuple(int(k) for k in e) for e in self.rho_basis]
        if self.sys.has_constant_B():
            allowed = set(killing_safe_variables(self.sys))
            for e in self.W_basis:
                bad = [j for j, k in enumerate(e) if k and j not in allowed]
                if bad:
                    raise ValueError(f"W basis monomial {e} depends on actuated coordinate(s) "
                                     f"{[b + 1 for b in bad]}; this violates the Killing condition")

    @property
    def n(self) -> int:
        return self.sys.n

    @cached_property
    def entry_index(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in range(i, self.n)]

    @property
    def n_W(self) -> int:
        return len(self.entry_index) * len(self.W_basis)

    @property
    def n_params(self) -> int:
        return self.n_W + len(self.rho_basis)

    # parameter <-> polynomial maps --------------------------------------------
    def W_of(self, theta) -> PolyMatrix:
        n, nb = self.n, len(self.W_basis)
        ent = [[None] * n for _ in range(n)]
        for k, (i, j) in enumerate(self.entry_index):
            p = PolyExpr([(e, theta[k * nb + b]) for b, e in enumerate(self.W_basis)], n)
            ent[i][j] = ent[j][i] = p
        return PolyMatrix(ent, n, n, n, symmetric=True)

    def rho_of(self, theta) -> Multiplier:
        c = theta[self.n_W:]
        return Multiplier(PolyExpr([(e, c[b]) for b, e in enumerate(self.rho_basis)], self.n))

    def theta_of(self, W: PolyMatrix, rho: PolyExpr) -> np.ndarray:
        nb = len(self.W_basis)
        th = np.zeros(self.n_params)
        for k, (i, j) in enumerate(self.entry_index):
            for b, e in enumerate(self.W_basis):
                th[k * nb + b] = W[i, j].coeff(e)
        for b, e in enumerate(self.rho_basis):
            th[self.n_W + b] = rho.coeff(e)
        return th

    def equality_constraints(self) -> tuple[np.ndarray, np.ndarray]:
        rows, rhs = [], []
        nb = len(self.W_basis)
        if self.W_anchor is not None:
            x0, W0 = (np.asarray(a, dtype=float) for a in self.W_anchor)
            mb = _monomials(x0[None, :], np.array(self.W_basis))[0]
            for k, (i, j) in enumerate(self.entry_index):
                r = np.zeros(self.n_params)
                r[k * nb:(k + 1) * nb] = mb
                rows.append(r)
                rhs.append(W0[i, j])
        if self.rho_anchor is not None:
            x0 = np.asarray(self.rho_anchor[0], dtype=float)
            mb = _monomials(x0[None, :], np.array(self.rho_basis))[0]
            r = np.zeros(self.n_params)
            r[self.n_W:] = mb
            rows.append(r)
            rhs.append(float(self.rho_anchor[1]))
        if not rows:
            return np.zeros((0, self.n_params)), np.zeros(0)
        return np.array(rows), np.array(rhs)

    def initial_theta(self) -> np.ndarray:
        """Identity ``W`` and constant-one ``rho``."""
        n = self.n
        Wi = PolyMatrix.identity(n, n)
        return self.theta_of(Wi, PolyExpr.const(1.0, n))


# ---------------------------------------------------------------------------
# LMI assembly


@dataclass(frozen=True)
class AffineMatrixMap:
    """``theta -> offset + sum_p theta_p basis[p]`` (symmetric matrices)."""

    offset: np.ndarray
    basis: np.ndarray

    def __call__(self, theta) -> np.ndarray:
        return self.offset + np.tensordot(np.asarray(theta, dtype=float), self.basis, axes=(0, 0))


def _assemble_batch(prob: SynthesisProblem, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point basis matrices of the contraction LMI and of ``W``.

    Returns ``(G, H)`` of shapes ``(K, p, n, n)``: ``F(theta; x_k) = sum_p theta_p G[k, p]``
    and ``W(theta; x_k) = sum_p theta_p H[k, p]``.
    """
    sys, n, lam = prob.sys, prob.n, prob.lam
    K = X.shape[0]
    p = prob.n_params
    Eb = np.array(prob.W_basis, dtype=np.int64)
    m = _monomials(X, Eb)                      # (K, nb)
    fX = evaluate_vector(sys.f, X)             # (K, n)
    # d/dt of each monomial along f
    dm = np.zeros_like(m)
    for j in range(n):
        Ej = Eb.copy()
        has = Ej[:, j] > 0
        if not has.any():
            continue
        Ej[has, j] -= 1
        dm[:, has] += (_monomials(X, Ej[has]) * Eb[has, j]) * fX[:, j:j + 1]
    J = sys.f_jacobian.evaluate_batch(X)       # (K, n, n)
    G = np.zeros((K, p, n, n))
    H = np.zeros((K, p, n, n))
    nb = len(prob.W_basis)
    for k, (i, j) in enumerate(prob.entry_index):
        E = np.zeros((n, n))
        E[i, j] = E[j, i] = 1.0
        JE = J @ E                              # (K, n, n)
        sym = JE + np.swapaxes(JE, 1, 2)
        sl = slice(k * nb, (k + 1) * nb)
        G[:, sl] = (-dm + 2 * lam * m)[:, :, None, None] * E + m[:, :, None, None] * sym[:, None]
        H[:, sl] = m[:, :, None, None] * E
    if sys.m:
        Bx = sys.B_at(X)
        BB = Bx @ np.swapaxes(Bx, 1, 2)
        mr = _monomials(X, np.array(prob.rho_basis, dtype=np.int64))
        G[:, prob.n_W:] = -mr[:, :, None, None] * BB[:, None]
    return G, H


def assemble_lmi(prob: SynthesisProblem, x) -> AffineMatrixMap:
    """Affine map ``theta -> F(theta; x)`` of the multiplier-form LMI at ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    G, _ = _assemble_batch(prob, x)
    return AffineMatrixMap(np.zeros((prob.n, prob.n)), G[0])


class _Objective:
    """Worst-case eigenvalue over the grid, ``phi(theta)``, with subgradients."""

    def __init__(self, prob: SynthesisProblem, X: np.ndarray):
        self.prob = prob
        self.X = X
        self.G, self.H = _assemble_batch(prob, X)
        self.eps = prob.margin
        self.alpha1 = prob.alpha1
        # rho(x_k) >= 0 as the affine pieces -R theta <= 0
        self.R = np.zeros((X.shape[0], prob.n_params))
        if prob.sys.m:
            self.R[:, prob.n_W:] = _monomials(X, np.array(prob.rho_basis, dtype=np.int64))

    def pointwise(self, theta):
        F = np.einsum("kpij,p->kij", self.G, theta)
        Wt = np.einsum("kpij,p->kij", self.H, theta)
        ef, vf = np.linalg.eigh(F)
        ew, vw = np.linalg.eigh(Wt)
        return ef, vf, ew, vw

    def point_values(self, theta) -> np.ndarray:
        """Per-point value of the objective; ``phi`` is their maximum."""
        ef, _, ew, _ = self.pointwise(theta)
        return np.maximum.reduce([ef[:, -1] + self.eps, self.alpha1 - ew[:, 0], -(self.R @ theta)])

    def value(self, theta) -> float:
        ef, _, ew, _ = self.pointwise(theta)
        return float(max(ef[:, -1].max() + self.eps, self.alpha1 - ew[:, 0].min(),
                         -(self.R @ theta).min()))

    def value_and_subgradient(self, theta):
        ef, vf, ew, vw = self.pointwise(theta)
        f_top = ef[:, -1] + self.eps
        w_top = self.alpha1 - ew[:, 0]
        kf, kw = int(np.argmax(f_top)), int(np.argmax(w_top))
        r_top = -(self.R @ theta)
        kr = int(np.argmax(r_top))
        if r_top[kr] > max(f_top[kf], w_top[kw]):
            return float(r_top[kr]), -self.R[kr]
        if f_top[kf] >= w_top[kw]:
            v = vf[kf, :, -1]
            g = np.einsum("i,pij,j->p", v, self.G[kf], v)
            return float(f_top[kf]), g
        v = vw[kw, :, 0]
        g = -np.einsum("i,pij,j->p", v, self.H[kw], v)
        return float(w_top[kw]), g

    def cuts(self, theta, threshold: float, max_cuts: int):
        """Linear minorants ``a' theta + b`` of the active pieces above ``threshold``."""
        ef, vf, ew, vw = self.pointwise(theta)
        rows, consts = [], []
        f_top = ef[:, -1] + self.eps
        idx = np.where(f_top >= threshold)[0]
        idx = idx[np.argsort(-f_top[idx])][:max_cuts]
        for k in idx:
            for c in range(self.prob.n):
                if ef[k, c] + self.eps < threshold and c != self.prob.n - 1:
                    continue
                v = vf[k, :, c]
                rows.append(np.einsum("i,pij,j->p", v, self.G[k], v))
                consts.append(self.eps)
        w_top = self.alpha1 - ew[:, 0]
        idx = np.where(w_top >= threshold)[0]
        idx = idx[np.argsort(-w_top[idx])][:max_cuts]
        for k in idx:
            v = vw[k, :, 0]
            rows.append(-np.einsum("i,pij,j->p", v, self.H[k], v))
            consts.append(self.alpha1)
        r_top = -(self.R @ theta)
        idx = np.where(r_top >= threshold)[0]
        for k in idx[np.argsort(-r_top[idx])][:max_cuts]:
            rows.append(-self.R[k])
            consts.append(0.0)
        return rows, consts


# ---------------------------------------------------------------------------
# results


@dataclass
class SynthesisResult:
    W: DualMetric | None
    rho: Multiplier
    W_poly: PolyMatrix
    status: str
    achieved_margin: float
    iterations: int
    solve_time: float
    theta: np.ndarray | None = None
    grid_value: float = float("nan")
    reports: dict[str, CheckReport] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def to_text(self) -> str:
        n = self.W_poly.rows
        lines = ["# ccmkit synthesis result",
                 f"status: {self.status}",
                 f"n: {n}",
                 f"achieved_margin: {self.achieved_margin!r}",
                 f"iterations: {self.iterations}",
                 f"solve_time: {self.solve_time!r}"]
        if self.W is not None:
            lines += [f"alpha1: {self.W.alpha1!r}", f"alpha2: {self.W.alpha2!r}"]
        for k in sorted(self.provenance):
            lines.append(f"{k}: {self.provenance[k]}")
        for i in range(n):
            for j in range(i, n):
                lines.append(f"W[{i + 1},{j + 1}]: {self.W_poly[i, j].to_string()}")
        lines.append(f"rho: {self.rho.rho.to_string()}")
        return "\n".join(lines) + "\n"


def load_metric_text(text: str) -> tuple[PolyMatrix, Multiplier, dict]:
    """Parse the polynomial block of a :meth:`SynthesisResult.to_text` file."""
    kv: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, _, v = line.partition(":")
        kv[k.strip()] = v.strip()
    n = int(kv["n"])
    ent = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            ent[i][j] = ent[j][i] = parse_poly(kv[f"W[{i + 1},{j + 1}]"], n)
    W = PolyMatrix(ent, n, n, n, symmetric=True)
    rho = Multiplier(parse_poly(kv.get("rho", "0"), n))
    return W, rho, kv


# ---------------------------------------------------------------------------
# solvers


def _cutting_plane(obj: _Objective, theta_p, N, z0, *, phase2_weights=None, level=0.0,
                   max_iter=200, bound=1e3, tol=1e-6, max_cuts=300):
    """Outer-approximation LP iterations in the reduced variable ``z``.

    Phase 1 (``phase2_weights is None``) minimizes ``phi``; each LP point is
    followed by an exact line search from the incumbent, which keeps the
    iterates from zig-zagging. Phase 2 minimizes a weighted l1 norm of
    ``theta`` over the outer approximation of ``{phi <= level}`` and stops at
    the first point with ``phi <= level / 2`` (``level`` is negative).
    """
    d = N.shape[1]
    cut_rows: list[np.ndarray] = []
    cut_b: list[float] = []

    def f(z):
        return obj.value(theta_p + N @ z)

    def add_cuts(z, val, rel=0.5):
        thr = min(val, 0.0) - rel * abs(val)
        rows, consts = obj.cuts(theta_p + N @ z, thr, max_cuts)
        for a, c in zip(rows, consts):
            # a' theta + c <= t  ->  (a'N) z - t <= -c - a' theta_p
            cut_rows.append(a @ N)
            cut_b.append(-c - a @ theta_p)

    best_z = z0.copy()
    best_val = f(best_z)
    add_cuts(best_z, best_val)
    it = 0
    for it in range(1, max_iter + 1):
        Ar = np.array(cut_rows)
        br = np.array(cut_b)
        if phase2_weights is None:
            cvec = np.zeros(d + 1)
            cvec[-1] = 1.0
            A_ub = np.hstack([Ar, -np.ones((Ar.shape[0], 1))])
            bounds = [(-bound, bound)] * d + [(None, None)]
            res = linprog(cvec, A_ub=A_ub, b_ub=br, bounds=bounds, method="highs")
            if res.status != 0:
                logger.warning("LP failed: %s", res.message)
                break
            z_lp, lower = res.x[:d], res.x[-1]
            step = z_lp - best_z
            ls = minimize_scalar(lambda tau: f(best_z + tau * step), bounds=(0.0, 1.0),
                                 method="bounded", options={"xatol": 1e-3})
            z_new, v_new = best_z + ls.x * step, float(ls.fun)
            v_lp = f(z_lp)
            add_cuts(z_lp, v_lp)
            add_cuts(z_new, v_new)
            if v_lp < v_new:
                z_new, v_new = z_lp, v_lp
            if v_new < best_val:
                best_z, best_val = z_new, v_new
            logger.debug("cutting-plane it=%d phi=%.6g lower=%.6g", it, best_val, lower)
            if best_val - lower <= tol * max(1.0, abs(best_val)):
                break
        else:
            # variables [z, s]; s >= |theta_p + N z| componentwise
            p = N.shape[0]
            w = phase2_weights
            cvec = np.concatenate([np.zeros(d), w])
            A1 = np.hstack([Ar, np.zeros((Ar.shape[0], p))])
            A2 = np.hstack([N, -np.eye(p)])
            A3 = np.hstack([-N, -np.eye(p)])
            A_ub = np.vstack([A1, A2, A3])
            b_ub = np.concatenate([br + level, -theta_p, theta_p])
            bounds = [(-bound, bound)] * d + [(0, None)] * p
            res = linprog(cvec, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
            if res.status != 0:
                logger.warning("LP failed: %s", res.message)
                break
            z_lp = res.x[:d]
            v_lp = f(z_lp)
            logger.debug("l1 phase it=%d phi=%.6g", it, v_lp)
            best_z, best_val = z_lp, v_lp
            if v_lp <= 0.5 * level:
                break
            add_cuts(z_lp, v_lp, rel=1.0)
    return best_z, best_val, it


def _subgradient(obj: _Objective, theta_p, N, z0, *, max_iter=2000, target=None):
    z = z0.copy()
    best_z, best_val = z.copy(), np.inf
    delta = None
    for it in range(1, max_iter + 1):
        val, g = obj.value_and_subgradient(theta_p + N @ z)
        if val < best_val:
            best_z, best_val = z.copy(), val
        gz = N.T @ g
        gn = float(gz @ gz)
        if gn == 0:
            break
        if target is not None:
            step = (val - target) / gn
        else:
            # Polyak step toward an adaptively lowered level
            if delta is None:
                delta = max(abs(val), 1.0) * 0.1
            level = best_val - delta
            step = (val - level) / gn
            if val > best_val:
                delta *= 0.95
        z = z - step * gz
        if target is not None and best_val <= target:
            break
    return best_z, best_val, it


def synthesize(prob: SynthesisProblem, method: str = "cutting-plane", *,
               verify_factor: int = 2, l1_phase: bool = True, max_iter: int = 300,
               bound: float = 1e3, exchange_rounds: int = 8,
               exchange_points: int = 200) -> SynthesisResult:
    """Search for ``(W, rho)`` and verify on a refined grid.

    The objective is ``phi(theta) = max_x max(lambda_max(F) + margin,
    lambda_max(alpha1 I - W), -rho(x))``; ``phi <= 0`` means feasible on the
    synthesis grid. Equality anchors are eliminated by ``theta = theta_p + N z``.

    A solution that satisfies the grid constraints can still fail between
    grid points. After each solve the refined grid is scanned and its worst
    offending points are added to the synthesis set (an exchange method),
    for at most ``exchange_rounds`` rounds.
    """
    if method not in ("cutting-plane", "subgradient"):
        raise ValueError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    X = grid_points(prob.grid)
    vgrid = prob.grid.refined(verify_factor)
    Xv = grid_points(vgrid)
    Aeq, beq = prob.equality_constraints()
    if Aeq.shape[0]:
        theta_p = np.linalg.lstsq(Aeq, beq, rcond=None)[0]
        N = null_space(Aeq)
    else:
        theta_p = np.zeros(prob.n_params)
        N = np.eye(prob.n_params)
    z = N.T @ (prob.initial_theta() - theta_p)
    w = np.ones(prob.n_params)
    w[prob.n_W:] = prob.rho_weight

    iters = 0
    rounds = 0
    grid_value = float("inf")
    theta = theta_p + N @ z
    while True:
        obj = _Objective(prob, X)
        if method == "cutting-plane":
            z1, val1, it = _cutting_plane(obj, theta_p, N, z, max_iter=max_iter, bound=bound)
        else:
            z1, val1, it = _subgradient(obj, theta_p, N, z, max_iter=max_iter)
        iters += it
        logger.info("round %d phase 1: phi=%.6g after %d iterations (%d points)",
                    rounds, val1, it, X.shape[0])
        z, grid_value = z1, val1
        if val1 > 0:
            theta = theta_p + N @ z
            break
        if l1_phase and method == "cutting-plane":
            z2, val2, it2 = _cutting_plane(obj, theta_p, N, z1, phase2_weights=w,
                                           level=0.5 * val1, max_iter=max_iter, bound=bound)
            iters += it2
            if val2 > 0:
                # pull back toward the phase-1 point; phi is convex along the segment
                tau = val2 / (val2 - val1)
                z2 = (1 - tau) * z2 + tau * z1
                val2 = obj.value(theta_p + N @ z2)
            logger.info("round %d phase 2: phi=%.6g", rounds, val2)
            if val2 <= 0:
                z, grid_value = z2, val2
        theta = theta_p + N @ z
        if prob.grid.degenerate or rounds >= exchange_rounds:
            break
        pv = _Objective(prob, Xv).point_values(theta)
        bad = np.where(pv > 0)[0]
        if not bad.size:
            break
        bad = bad[np.argsort(-pv[bad])][:exchange_points]
        logger.info("round %d: %d refined-grid points violate (worst %.3g)",
                    rounds, int((pv > 0).sum()), pv.max())
        X = np.vstack([X, Xv[bad]])
        rounds += 1

    W_poly = prob.W_of(theta)
    rho = prob.rho_of(theta)
    status = "feasible" if grid_value <= 0 else "infeasible"
    reports: dict[str, CheckReport] = {}
    W_metric = None
    achieved = -float("inf")
    if status == "feasible":
        rep = check_ccm_rho(prob.sys, W_poly, rho, prob.lam, vgrid)
        kil = check_killing(prob.sys, W_poly, vgrid)
        lo, hi = verify_bounds(W_poly, vgrid, strict=False)
        reports = {"ccm_rho": rep, "killing": kil}
        achieved = -rep.max_eig
        rho_min = float(rho(Xv).min()) if prob.sys.m else 0.0
        if prob.grid.degenerate:
            status = "unverified"
        elif not (rep.passed and kil.passed and lo > 0 and rho_min >= 0):
            status = "unverified"
        if lo > 0:
            W_metric = DualMetric(W_poly, lo, hi, vgrid)
    elapsed = time.perf_counter() - t0
    prov = {"lambda": prob.lam, "margin": prob.margin, "method": method,
            "exchange_rounds": rounds,
            "synthesis_grid": " ".join(prob.grid.to_lines()),
            "verification_grid": " ".join(vgrid.to_lines()),
            "scope": "box-grid certificate"}
    return SynthesisResult(W_metric, rho, W_poly, status, achieved, iters, elapsed,
                           theta, grid_value, reports, prov)


def phi(prob: SynthesisProblem, theta, X=None) -> float:
    """Worst-case grid value of the synthesis objective at ``theta``."""
    X = grid_points(prob.grid) if X is None else X
    return _Objective(prob, X).value(np.asarray(theta, dtype=float))
