"""Geodesic-based tracking controllers.

Every controller here is a callable ``controller(t, x) -> u`` so it can be
handed to :func:`ccmkit.simulate.simulate`. The building blocks are a
differential feedback ``k_delta(x, delta, u)`` and its integral along a
curve joining the target ``x*`` to the current state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geodesic import (DiscretizedCurve, GeodesicResult, energy_and_gradient,
                       energy_rate_affine, geodesic)
from .metric import (CertificationError, DualMetric, GridSpec, MetricEvaluator, Multiplier,
                     check_killing, killing_residuals)
from .polydyn import ControlAffineSystem, PolyMatrix, directional_derivative

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# target trajectories


@dataclass(frozen=True)
class TrajectorySource:
    """A target ``t -> (x*(t), u*(t))``.

    Build one with :meth:`equilibrium`, :meth:`sampled` or :meth:`closed_form`.
    """

    kind: str
    fn: Callable[[float], tuple[np.ndarray, np.ndarray]]
    xdot_fn: Callable[[float], np.ndarray]

    def __call__(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        return self.fn(t)

    def xdot(self, t: float) -> np.ndarray:
        return self.xdot_fn(t)

    @classmethod
    def equilibrium(cls, x_star, u_star=(), sys: ControlAffineSystem | None = None,
                    tol: float = 1e-6) -> "TrajectorySource":
        xs = np.asarray(x_star, dtype=float).copy()
        us = np.asarray(u_star, dtype=float).reshape(-1).copy()
        if sys is not None:
            if us.size == 0:
                us = np.zeros(sys.m)
            r = np.linalg.norm(sys.rhs(xs, us))
            if r > tol:
                raise ValueError(f"(x*, u*) is not an equilibrium: residual {r:.3g}")
        xs.flags.writeable = False
        us.flags.writeable = False
        zero = np.zeros_like(xs)
        return cls("equilibrium", lambda t: (xs, us), lambda t: zero)

    @classmethod
    def closed_form(cls, sys: ControlAffineSystem, x_fn, u_fn) -> "TrajectorySource":
        def fn(t):
            return np.asarray(x_fn(t), dtype=float), np.asarray(u_fn(t), dtype=float).reshape(-1)

        def xdot(t):
            x, u = fn(t)
            return sys.rhs(x, u)
        return cls("closed-form", fn, xdot)

    @classmethod
    def sampled(cls, sys: ControlAffineSystem, times, states, controls,
                tol: float = 1e-6) -> "TrajectorySource":
        """Piecewise-cubic state samples with zero-order-hold controls.

        The samples must solve the dynamics: the spline derivative is compared
        with ``f + B u`` at every sample time.
        """
        from scipy.interpolate import CubicSpline

        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        controls = np.asarray(controls, dtype=float).reshape(len(times), -1)
        spline = CubicSpline(times, states, axis=0)
        deriv = spline.derivative()
        resid = max(np.linalg.norm(deriv(t) - sys.rhs(x, u))
                    for t, x, u in zip(times, states, controls))
        scale = 1.0 + np.abs(states).max()
        if resid > tol * scale:
            raise ValueError(f"sampled trajectory violates the dynamics (residual {resid:.3g})")

        def fn(t):
            i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1))
            return spline(t), controls[i]
        return cls("sampled", fn, lambda t: deriv(t))


# ---------------------------------------------------------------------------
# differential feedback


def sontag_rho(a: float, b: float) -> float:
    """Multiplier of the Sontag-type differential controller."""
    if a < 0:
        return 0.0
    if b <= 0:
        raise CertificationError(f"contraction condition violated: drift term {a:.3g} >= 0 "
                                 "with no control authority")
    return float((a + np.hypot(a, b)) / b)


class DifferentialFeedback:
    """Differential feedback ``k_delta`` built from a dual metric.

    Parameters
    ----------
    sys : ControlAffineSystem
    W : DualMetric, PolyMatrix or MetricEvaluator
    lam : float
        Contraction rate used by the Sontag form.
    rho : Multiplier, optional
        Required for the strong form ``k = -rho/2 B' M delta``.
    form : {"strong", "sontag"}
        Defaults to ``"strong"`` when ``rho`` is given.
    gain_scale : float
        Multiplies ``rho``; values above one test the gain margin.
    """

    def __init__(self, sys: ControlAffineSystem, W, lam: float, rho: Multiplier | None = None,
                 form: str | None = None, gain_scale: float = 1.0):
        self.sys = sys
        self.lam = float(lam)
        self.metric = W if isinstance(W, MetricEvaluator) else MetricEvaluator(W)
        self.W_poly = self.metric.source.W if self.metric.source is not None else None
        if form is None:
            form = "strong" if rho is not None else "sontag"
        if form not in ("strong", "sontag"):
            raise ValueError(f"unknown form {form!r}")
        if form == "strong":
            if rho is None:
                raise ValueError("the strong form needs a multiplier rho")
            if self.W_poly is not None and not all(
                    r.is_zero() for r in killing_residuals(sys, self.W_poly)):
                kil = check_killing(sys, self.W_poly, _any_grid(self.metric))
                if not kil.passed:
                    raise CertificationError("strong form requires the Killing condition; "
                                             f"residual {kil.max_eig:.3g}")
        self.form = form
        self.rho = rho
        self.gain_scale = float(gain_scale)

    @classmethod
    def from_result(cls, sys, result, lam: float, **kw) -> "DifferentialFeedback":
        """From a :class:`~ccmkit.synthesis.SynthesisResult`."""
        W = result.W if result.W is not None else result.W_poly
        return cls(sys, W, lam, rho=result.rho, **kw)

    # -- strong form -------------------------------------------------------
    def gain(self, X) -> np.ndarray:
        """``K(x) = -rho(x)/2 B(x)' M(x)``, shape ``(K, m, n)`` for a batch."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.rho is None:
            raise ValueError("gain is only defined for the strong form")
        Mx = _safe_M(self.metric, X)
        r = np.atleast_1d(self.rho(X)) * self.gain_scale
        Bx = self.sys.B_at(X)
        return -0.5 * r[:, None, None] * np.swapaxes(Bx, 1, 2) @ Mx

    def k_delta_strong(self, x, delta) -> np.ndarray:
        return self.gain(np.asarray(x, dtype=float))[0] @ np.asarray(delta, dtype=float)

    # -- sontag form -------------------------------------------------------
    def sontag_terms(self, x, delta, u) -> tuple[float, np.ndarray]:
        """Drift term ``a`` and the input direction ``2 B' M delta``."""
        x = np.asarray(x, dtype=float)
        d = np.asarray(delta, dtype=float)
        u = np.asarray(u, dtype=float).reshape(-1)
        Mx = _safe_M(self.metric, x)[0]
        xdot = self.sys.rhs(x, u)
        A = self.sys.f_jacobian.evaluate(x)
        for i, Jb in enumerate(self.sys.b_jacobians):
            A = A + u[i] * Jb.evaluate(x)
        # dM along xdot: -M (dW . xdot) M
        if self.metric.is_constant:
            Mdot = np.zeros_like(Mx)
        else:
            dW = self.metric.dW_at(x)[0]
            Mdot = -Mx @ np.tensordot(xdot, dW, axes=(0, 0)) @ Mx
        Md = Mx @ d
        a = d @ Mdot @ d + 2 * Md @ A @ d + 2 * self.lam * d @ Md
        bvec = 2 * self.sys.B_at(x).T @ Md
        return float(a), bvec

    def k_delta_sontag(self, x, delta, u) -> np.ndarray:
        d = np.asarray(delta, dtype=float)
        if not np.any(d):
            return np.zeros(self.sys.m)
        a, bvec = self.sontag_terms(x, d, u)
        r = sontag_rho(a, float(bvec @ bvec)) * self.gain_scale
        return -r * bvec

    def __call__(self, x, delta, u=None) -> np.ndarray:
        if self.form == "strong":
            return self.k_delta_strong(x, delta)
        return self.k_delta_sontag(x, delta, np.zeros(self.sys.m) if u is None else u)


def _any_grid(metric: MetricEvaluator):
    src = metric.source
    if isinstance(src, DualMetric) and src.box is not None and not src.box.degenerate:
        return src.box
    return GridSpec.box(1.0, metric.n, 5)


def _safe_M(metric: MetricEvaluator, X) -> np.ndarray:
    Wx = metric.W(X)
    ev = np.linalg.eigvalsh(Wx)
    if np.any(ev[:, 0] <= 0):
        raise CertificationError("metric is singular or indefinite at the evaluation point")
    return np.linalg.inv(Wx)


def k_delta_strong(x, delta, rho: float, B, M) -> np.ndarray:
    """Array form of the strong differential gain, ``-rho/2 B' M delta``."""
    return -0.5 * float(rho) * np.asarray(B, dtype=float).T @ np.asarray(M, dtype=float) @ \
        np.asarray(delta, dtype=float)


# ---------------------------------------------------------------------------
# path integration


@dataclass(frozen=True)
class ControlPath:
    values: np.ndarray

    @property
    def end(self) -> np.ndarray:
        return self.values[-1]


def path_integrate(curve: DiscretizedCurve | np.ndarray, u_star, fb: DifferentialFeedback,
                   ) -> ControlPath:
    """Integrate ``du/ds = k_delta(c(s), c_s(s), u)`` from ``u(0) = u*``.

    Classical RK4 on the curve's s-grid. Within a segment the curve is linear,
    so the tangent is constant and the half-step stage sits at the segment
    midpoint. For the strong form the stages do not depend on ``u`` and the
    scheme is Simpson's rule.
    """
    nodes = curve.nodes if isinstance(curve, DiscretizedCurve) else np.asarray(curve, dtype=float)
    u_star = np.asarray(u_star, dtype=float).reshape(-1)
    N = nodes.shape[0] - 1
    h = 1.0 / N
    out = np.empty((N + 1, u_star.size))
    out[0] = u_star
    tang = np.diff(nodes, axis=0) * N
    if not np.any(tang):
        out[1:] = u_star
        return ControlPath(out)
    if fb.form == "strong":
        mids = 0.5 * (nodes[1:] + nodes[:-1])
        Kn = fb.gain(nodes)
        Km = fb.gain(mids)
        kn0 = np.einsum("kij,kj->ki", Kn[:-1], tang)
        kn1 = np.einsum("kij,kj->ki", Kn[1:], tang)
        km = np.einsum("kij,kj->ki", Km, tang)
        incr = h / 6.0 * (kn0 + 4 * km + kn1)
        out[1:] = u_star + np.cumsum(incr, axis=0)
    else:
        u = u_star.copy()
        for k in range(N):
            c0, c1 = nodes[k], nodes[k + 1]
            cm = 0.5 * (c0 + c1)
            d = tang[k]
            k1 = fb.k_delta_sontag(c0, d, u)
            k2 = fb.k_delta_sontag(cm, d, u + 0.5 * h * k1)
            k3 = fb.k_delta_sontag(cm, d, u + 0.5 * h * k2)
            k4 = fb.k_delta_sontag(c1, d, u + h * k3)
            u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(u)):
                raise FloatingPointError("path integration overflowed")
            out[k + 1] = u
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("path integration overflowed")
    return ControlPath(out)


# ---------------------------------------------------------------------------
# feedback controllers


class GeodesicFeedback:
    """Continuous feedback: geodesic from ``x*(t)`` to ``x``, then path integration.

    The previous geodesic warm-starts the next solve. When the solve flags a
    possible cut locus, the previous control is held for that step.
    """

    def __init__(self, fb: DifferentialFeedback, traj: TrajectorySource, N: int = 32,
                 metric: MetricEvaluator | None = None, check_cut_locus: bool = False,
                 geodesic_tol: float = 1e-6):
        self.fb = fb
        self.traj = traj
        self.N = N
        self.metric = metric if metric is not None else fb.metric
        self.check_cut_locus = check_cut_locus
        self.tol = geodesic_tol
        self.last: GeodesicResult | None = None
        self._last_u: np.ndarray | None = None
        self.held_steps = 0

    def geodesic(self, t: float, x) -> GeodesicResult:
        xs, _ = self.traj(t)
        init = self.last.curve if self.last is not None and not self.last.curve.is_degenerate() else None
        g = geodesic(xs, x, self.metric, self.N, init=init, tol=self.tol,
                     check_cut_locus=self.check_cut_locus)
        self.last = g
        return g

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xs, us = self.traj(t)
        if np.array_equal(x, xs):
            self._last_u = np.array(us, dtype=float)
            return self._last_u.copy()
        g = self.geodesic(t, x)
        if g.near_cut_locus and self._last_u is not None:
            self.held_steps += 1
            return self._last_u.copy()
        u = path_integrate(g.curve, us, self.fb).end
        self._last_u = u
        return u.copy()


def feedback_continuous(x, t: float, traj: TrajectorySource, fb: DifferentialFeedback,
                        M: MetricEvaluator | None = None, N: int = 32) -> np.ndarray:
    """One-shot version of :class:`GeodesicFeedback` (no warm start)."""
    return GeodesicFeedback(fb, traj, N, metric=M)(t, x)


class LinearFeedback:
    """``u = u*(t) - K (x - x*(t))``, e.g. an LQR gain."""

    def __init__(self, K, traj: TrajectorySource):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.traj = traj

    def __call__(self, t: float, x) -> np.ndarray:
        xs, us = self.traj(t)
        return us - self.K @ (np.asarray(x, dtype=float) - xs)


def min_norm_control(x, t: float, traj: TrajectorySource, M: MetricEvaluator,
                     sys: ControlAffineSystem, lam: float, N: int = 32,
                     g: GeodesicResult | None = None) -> np.ndarray:
    """Smallest ``u`` with ``0.5 dE/dt <= -lam E``.

    At ``x = x*(t)`` the energy is zero and ``u*`` is returned unchanged.
    """
    x = np.asarray(x, dtype=float)
    xs, us = traj(t)
    if np.array_equal(x, xs):
        return np.array(us, dtype=float)
    if g is None:
        g = geodesic(xs, x, M, N)
    c0, a = energy_rate_affine(g, sys, x, traj.xdot(t))
    target = -lam * g.energy
    if c0 <= target:
        return np.zeros(sys.m)
    aa = float(a @ a)
    if aa == 0.0:
        raise CertificationError("no admissible control: energy cannot be decreased at this point")
    return a * (target - c0) / aa


class MinNormFeedback:
    """Warm-started wrapper of :func:`min_norm_control` for simulation loops."""

    def __init__(self, sys, metric: MetricEvaluator, traj: TrajectorySource, lam: float,
                 N: int = 32):
        self.sys, self.metric, self.traj, self.lam, self.N = sys, metric, traj, lam, N
        self.last: GeodesicResult | None = None

    def __call__(self, t: float, x) -> np.ndarray:
        xs, us = self.traj(t)
        x = np.asarray(x, dtype=float)
        if np.array_equal(x, xs):
            return np.array(us, dtype=float)
        init = self.last.curve if self.last is not None and not self.last.curve.is_degenerate() else None
        self.last = geodesic(xs, x, self.metric, self.N, init=init)
        return min_norm_control(x, t, self.traj, self.metric, self.sys, self.lam, g=self.last)


# ---------------------------------------------------------------------------
# open-loop forward image


@dataclass
class OpenLoopResult:
    times: np.ndarray
    controls: np.ndarray
    lengths: np.ndarray
    curves: list[np.ndarray] = field(repr=False)
    max_anchor_drift: float = 0.0

    def control_at(self, t: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1))
        return self.controls[i]


def _curve_length(nodes: np.ndarray, metric: MetricEvaluator) -> float:
    if not np.any(np.diff(nodes, axis=0)):
        return 0.0
    _, _, q = energy_and_gradient(nodes, metric)
    return float(np.mean(np.sqrt(np.maximum(q, 0.0))))


class ForwardImage:
    """Method-of-lines propagation of a whole curve under its control path.

    Node ``s`` moves with ``f(c) + B(c) u(s)`` where ``u`` is the path
    integral along the current curve. The ``s = 0`` node is pinned to the
    target. :meth:`step` advances by one RK4 step.
    """

    def __init__(self, nodes, t0: float, traj: TrajectorySource, fb: DifferentialFeedback):
        self.nodes = np.array(nodes, dtype=float)
        self.t = float(t0)
        self.traj = traj
        self.fb = fb
        self.sys = fb.sys
        self.anchor_drift = 0.0

    def controls(self, nodes=None, t=None) -> np.ndarray:
        nodes = self.nodes if nodes is None else nodes
        t = self.t if t is None else t
        _, us = self.traj(t)
        return path_integrate(nodes, us, self.fb).values

    def _rate(self, nodes, t):
        U = self.controls(nodes, t)
        F = self.sys.f_at(nodes)
        if self.sys.m:
            F = F + np.einsum("kij,kj->ki", self.sys.B_at(nodes), U)
        return F

    def step(self, dt: float) -> None:
        t, c = self.t, self.nodes
        k1 = self._rate(c, t)
        k2 = self._rate(c + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = self._rate(c + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = self._rate(c + dt * k3, t + dt)
        new = c + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(new)) or np.abs(new).max() > 1e8:
            raise FloatingPointError("forward image blew up")
        self.t = t + dt
        xs, _ = self.traj(self.t)
        self.anchor_drift = max(self.anchor_drift, float(np.abs(new[0] - xs).max()))
        new[0] = xs
        self.nodes = new


def open_loop(x0, t0: float, t1: float, traj: TrajectorySource, fb: DifferentialFeedback,
              M: MetricEvaluator | None = None, N: int = 32, dt: float = 1e-3,
              record_every: int = 1) -> OpenLoopResult:
    """Open-loop control from the forward image of a minimal geodesic.

    Returns the control applied at the state end (``s = 1``) of the curve at
    each time step, the Riemannian length of the evolving curve and the
    recorded curves.
    """
    M = fb.metric if M is None else M
    xs, _ = traj(t0)
    g = geodesic(xs, x0, M, N)
    img = ForwardImage(g.curve.nodes, t0, traj, fb)
    nsteps = int(round((t1 - t0) / dt))
    times, controls, lengths, curves = [], [], [], []
    for k in range(nsteps + 1):
        if k % record_every == 0 or k == nsteps:
            times.append(img.t)
            controls.append(img.controls()[-1])
            lengths.append(_curve_length(img.nodes, M))
            curves.append(img.nodes.copy())
        if k < nsteps:
            img.step(dt)
    return OpenLoopResult(np.array(times), np.array(controls), np.array(lengths), curves,
                          img.anchor_drift)


class SampledFeedback:
    """Sampled-data controller: fresh geodesic at each sample time, open loop between.

    Parameters
    ----------
    sample_times : sequence of float or float
        Explicit sample instants, or a uniform period.
    dt : float
        Internal forward-image step between samples. It should divide the
        simulation step so the internal clock lands on the calls.
    """

    def __init__(self, fb: DifferentialFeedback, traj: TrajectorySource,
                 sample_times: Sequence[float] | float, N: int = 32, dt: float = 1e-3,
                 metric: MetricEvaluator | None = None):
        self.fb, self.traj, self.N, self.dt = fb, traj, N, dt
        self.metric = fb.metric if metric is None else metric
        if np.isscalar(sample_times):
            self.period = float(sample_times)
            self.samples = None
        else:
            self.period = None
            self.samples = np.asarray(sorted(sample_times), dtype=float)
        self.image: ForwardImage | None = None
        self._next = -np.inf
        self.sample_log: list[tuple[float, float]] = []

    def _next_after(self, t: float) -> float:
        if self.period is not None:
            return (np.floor(t / self.period + 1e-9) + 1) * self.period
        later = self.samples[self.samples > t + 1e-12]
        return float(later[0]) if later.size else np.inf

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.image is None or t >= self._next - 1e-12:
            xs, _ = self.traj(t)
            g = geodesic(xs, x, self.metric, self.N)
            self.sample_log.append((t, g.length))
            self.image = ForwardImage(g.curve.nodes, t, self.traj, self.fb)
            self._next = self._next_after(t)
        else:
            while self.image.t < t - 1e-12:
                self.image.step(min(self.dt, t - self.image.t))
        return self.image.controls()[-1].copy()


def feedback_sampled(x, t_i: float, t: float, traj: TrajectorySource, fb: DifferentialFeedback,
                     M: MetricEvaluator | None = None, N: int = 32, dt: float = 1e-3) -> np.ndarray:
    """Control at time ``t`` for a sample taken at ``t_i`` with state ``x``."""
    if t < t_i:
        raise ValueError("t must not precede the sample time")
    if t == t_i:
        return feedback_continuous(x, t, traj, fb, M, N)
    return open_loop(x, t_i, t, traj, fb, M, N, dt=min(dt, t - t_i)).controls[-1]
