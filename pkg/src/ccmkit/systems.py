"""Example systems used throughout the tests and notebooks."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .metric import GridSpec, Multiplier
from .polydyn import ControlAffineSystem, PolyMatrix
from .synthesis import (LQRProblem, SynthesisProblem, killing_safe_variables, load_metric_text,
                        monomial_basis, solve_are)


def andrieu_system() -> ControlAffineSystem:
    """Three-state polynomial system with a single input on ``x3``."""
    return ControlAffineSystem.from_strings(
        ["-x1 + x3", "x1^2 - x2 - 2*x1*x3 + x3", "-x2"],
        [["0"], ["0"], ["1"]],
        name="andrieu",
    )


def planar_example() -> ControlAffineSystem:
    """Two-state system that is not feedback linearizable but admits ``W = I``."""
    return ControlAffineSystem.from_strings(
        ["-x1 - x1^3 + x2^2", "0"], [["0"], ["1"]], name="planar")


def consensus_system() -> ControlAffineSystem:
    """Uncontrolled pair ``x1' = -x1 + x2``, ``x2' = x1 - x2``."""
    return ControlAffineSystem.from_strings(["-x1 + x2", "x1 - x2"], None, name="consensus")


def example1_system() -> ControlAffineSystem:
    """Planar system with four equilibria and an input-invariant line ``x2 = 0``."""
    return ControlAffineSystem.from_strings(
        ["-2*x1 + x1^2 - x2^2", "-6*x2 + 2*x1*x2"], [["1"], ["0"]], name="example1")


def andrieu_lqr(r: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Riccati solution ``P`` and gain ``K`` at the origin, cost ``x'x + r u^2``."""
    sys = andrieu_system()
    A, B = sys.linearize(np.zeros(3))
    return solve_are(LQRProblem(A, B, np.eye(3), np.array([[r]])))


def andrieu_problem(points: int = 15, half_width: float = 12.0, lam: float = 0.5,
                    margin: float = 1e-3, alpha1: float = 1e-3, r: float = 1.0) -> SynthesisProblem:
    """Quadratic ``W(x1, x2)``, quadratic ``rho(x1)``, anchored to the LQR solution."""
    sys = andrieu_system()
    P, _ = andrieu_lqr(r)
    safe = killing_safe_variables(sys)
    return SynthesisProblem(
        sys=sys,
        lam=lam,
        grid=GridSpec.box(half_width, 3, points),
        W_basis=monomial_basis(3, 2, safe),
        rho_basis=monomial_basis(3, 2, [0]),
        margin=margin,
        alpha1=alpha1,
        W_anchor=(np.zeros(3), np.linalg.inv(P)),
        rho_anchor=(np.zeros(3), 2.0 / r),
    )


def andrieu_metric() -> tuple[PolyMatrix, Multiplier]:
    """Dual metric and multiplier from a stored synthesis run of :func:`andrieu_problem`."""
    text = resources.files("ccmkit").joinpath("data/andrieu_metric.txt").read_text()
    W, rho, _ = load_metric_text(text)
    return W, rho
