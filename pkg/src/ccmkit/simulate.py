"""Fixed-step closed-loop simulation with Riemannian instrumentation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controller import TrajectorySource
from .geodesic import DiscretizedCurve, geodesic
from .metric import MetricEvaluator
from .polydyn import ControlAffineSystem

DIVERGENCE_CEILING = 1e6


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 10.0
    integrator: str = "rk4"
    energy_every: int = 10
    geodesic_N: int = 32
    ceiling: float = DIVERGENCE_CEILING

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        if self.integrator != "rk4":
            raise ValueError(f"unsupported integrator {self.integrator!r}")
        if self.energy_every < 1:
            raise ValueError("energy_every must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class SimulationTrace:
    """Sampled closed-loop response.

    ``energy`` holds ``E(x, x*)`` at the samples where it was computed and
    NaN elsewhere; ``distance_bound`` is ``R exp(-lam t) |x(0) - x*(0)|``
    when a rate and overshoot were supplied.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    targets: np.ndarray
    energy: np.ndarray
    distance_bound: np.ndarray
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.times)
        if not all(len(a) == k for a in (self.states, self.controls, self.targets,
                                         self.energy, self.distance_bound)):
            raise ValueError("trace arrays must have equal length")
        if k > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.states - self.targets, axis=1)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def energy_samples(self) -> tuple[np.ndarray, np.ndarray]:
        ok = np.isfinite(self.energy)
        return self.times[ok], self.energy[ok]

    def to_csv(self, meta: dict | None = None) -> str:
        n, m = self.states.shape[1], self.controls.shape[1]
        buf = io.StringIO()
        for k, v in {**self.meta, **(meta or {})}.items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
                   + ["E", "envelope"])
        for i in range(len(self.times)):
            w.writerow([repr(float(v)) for v in
                        (self.times[i], *self.states[i], *self.controls[i],
                         self.energy[i], self.distance_bound[i])])
        return buf.getvalue()


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate(sys: ControlAffineSystem, controller, traj: TrajectorySource, x0,
             cfg: SimConfig = SimConfig(), *, metric: MetricEvaluator | None = None,
             lam: float | None = None, R: float | None = None) -> SimulationTrace:
    """RK4 integration of ``xdot = f(x) + B(x) u`` with the control held over each step.

    ``controller(t, x)`` is called once per step (``None`` means ``u = u*``).
    With a ``metric`` the geodesic energy to the target is recorded every
    ``cfg.energy_every`` steps; with ``lam`` and ``R`` the exponential
    envelope is recorded as well. A state norm above ``cfg.ceiling`` stops
    the run and marks it as diverged.
    """
    x = np.asarray(x0, dtype=float).copy()
    n, m = sys.n, sys.m
    K = cfg.steps
    times = np.empty(K + 1)
    states = np.empty((K + 1, n))
    controls = np.zeros((K + 1, m))
    targets = np.empty((K + 1, n))
    energy = np.full(K + 1, np.nan)
    curve: DiscretizedCurve | None = None
    diverged = False
    last = K
    for k in range(K + 1):
        t = k * cfg.dt
        xs, us = traj(t)
        u = np.asarray(us, dtype=float) if controller is None else \
            np.asarray(controller(t, x), dtype=float).reshape(m)
        times[k], states[k], controls[k], targets[k] = t, x, u, xs
        if metric is not None and (k % cfg.energy_every == 0 or k == K):
            g = geodesic(xs, x, metric, cfg.geodesic_N, init=curve)
            energy[k] = g.energy
            curve = None if g.curve.is_degenerate() else g.curve
        if k == K:
            break
        if m:
            x = rk4_step(lambda z: sys.f_at(z) + sys.B_at(z) @ u, x, cfg.dt)
        else:
            x = rk4_step(sys.f_at, x, cfg.dt)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > cfg.ceiling:
            diverged = True
            last = k
            break
    sl = slice(0, last + 1)
    times, states, controls, targets, energy = (a[sl] for a in
                                                 (times, states, controls, targets, energy))
    if lam is not None and R is not None:
        bound = R * np.exp(-lam * times) * np.linalg.norm(states[0] - targets[0])
    else:
        bound = np.full(len(times), np.nan)
    meta = {"dt": cfg.dt, "horizon": cfg.horizon, "integrator": cfg.integrator,
            "diverged": diverged}
    return SimulationTrace(times, states, controls, targets, energy, bound, diverged, meta)


@dataclass(frozen=True)
class EnvelopeReport:
    violations: int
    max_ratio: float
    samples: int


def check_envelope(trace: SimulationTrace, lam: float, R: float, slack: float = 0.05
                   ) -> EnvelopeReport:
    """Count samples with ``|x - x*| > (1 + slack) R exp(-lam t) |x(0) - x*(0)|``."""
    if len(trace.times) == 0:
        raise ValueError("empty trace")
    err = trace.errors
    bound = R * np.exp(-lam * (trace.times - trace.times[0])) * err[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, err / bound, np.where(err > 0, np.inf, 0.0))
    return EnvelopeReport(int(np.sum(ratio > 1 + slack)), float(ratio.max()), len(err))


@dataclass(frozen=True)
class EnergyDecayReport:
    violations: int
    max_ratio: float
    samples: int


def check_energy_decay(trace: SimulationTrace, lam: float, slack: float = 0.05
                       ) -> EnergyDecayReport:
    """Check ``E(t) <= (1 + slack) exp(-2 lam t) E(0)`` at the recorded energy samples."""
    t, E = trace.energy_samples()
    if E.size == 0:
        raise ValueError("trace has no energy samples")
    bound = E[0] * np.exp(-2 * lam * (t - t[0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, E / bound, np.where(E > 0, np.inf, 0.0))
    return EnergyDecayReport(int(np.sum(ratio > 1 + slack)), float(ratio.max()), len(E))


# ---------------------------------------------------------------------------
# the planar system with an input-invariant line


@dataclass(frozen=True)
class Example1Report:
    decay_violations: int
    worst_decay_ratio: float
    max_abs_x2_on_line: float
    max_equilibrium_drift: float

    @property
    def passed(self) -> bool:
        return (self.decay_violations == 0 and self.max_abs_x2_on_line <= 1e-9
                and self.max_equilibrium_drift <= 1e-8)


def example1_demo(n_random: int = 10, seed: int = 0, dt: float = 1e-3,
                  horizon: float = 2.0) -> Example1Report:
    """Decay, invariant line and equilibria of the four-equilibrium planar system.

    Under ``u = -x1^2 - x2^2`` the function ``V = x1^2 + x2^2`` obeys
    ``Vdot <= -4 V``; the line ``x2 = 0`` is invariant whatever the input,
    which is why the origin cannot be reached from every target.
    """
    from .systems import example1_system

    sys = example1_system()
    origin = TrajectorySource.equilibrium(np.zeros(2), np.zeros(1))
    cfg = SimConfig(dt=dt, horizon=horizon)

    def u_fb(t, x):
        return np.array([-x[0] ** 2 - x[1] ** 2])

    rng = np.random.default_rng(seed)
    starts = [np.array([1.0, 1.0])] + list(rng.uniform(-0.5, 0.5, size=(n_random, 2)))
    viol, worst = 0, 0.0
    for x0 in starts:
        tr = simulate(sys, u_fb, origin, x0, cfg)
        V = np.sum(tr.states**2, axis=1)
        ratio = V / (V[0] * np.exp(-4 * tr.times))
        viol += int(np.sum(ratio > 1.05))
        worst = max(worst, float(ratio.max()))
    line = 0.0
    for x0 in ([5.0, 0.0], [-1.0, 0.0], [0.3, 0.0]):
        tr = simulate(sys, u_fb, origin, x0, cfg)
        line = max(line, float(np.abs(tr.states[:, 1]).max()))
    drift = 0.0
    s3 = np.sqrt(3.0)
    for xe in ([0.0, 0.0], [2.0, 0.0], [3.0, s3], [3.0, -s3]):
        tr = simulate(sys, None, TrajectorySource.equilibrium(xe, [0.0]), xe, cfg)
        drift = max(drift, float(np.abs(tr.states - np.asarray(xe)).max()))
    return Example1Report(viol, worst, line, drift)
