import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccmkit.metric import GridSpec, check_ccm_rho, ccm_rho_matrices
from ccmkit.polydyn import ControlAffineSystem, PolyMatrix, parse_poly
from ccmkit.synthesis import (AREError, LQRProblem, SynthesisProblem, are_residual, assemble_lmi,
                              load_metric_text, monomial_basis, phi, solve_are, synthesize)
from ccmkit.systems import andrieu_lqr, andrieu_problem, andrieu_system, planar_example


# -- Riccati ----------------------------------------------------------------

def test_are_scalar():
    P, K = solve_are(LQRProblem(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), np.eye(1)))
    assert P[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert K[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_are_double_integrator():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    P, _ = solve_are(LQRProblem(A, B, np.eye(2), np.eye(1)))
    s3 = np.sqrt(3.0)
    np.testing.assert_allclose(P, [[s3, 1.0], [1.0, s3]], atol=1e-8)


def test_are_unstable_controllable():
    A = np.array([[0.0, 1.0], [1.0, -1.0]])
    B = np.array([[0.0], [1.0]])
    prob = LQRProblem(A, B, np.eye(2), np.eye(1))
    P, K = solve_are(prob)
    assert are_residual(prob, P) <= 1e-8
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0


def test_are_andrieu_linearization():
    sys = andrieu_system()
    A, B = sys.linearize(np.zeros(3))
    prob = LQRProblem(A, B, np.eye(3), np.eye(1))
    P, K = andrieu_lqr()
    assert are_residual(prob, P) <= 1e-8
    assert np.min(np.linalg.eigvalsh(P)) > 0
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0


def test_are_uncontrollable_unstable():
    A = np.array([[1.0, 0.0], [0.0, -1.0]])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(AREError):
        solve_are(LQRProblem(A, B, np.eye(2), np.eye(1)))


def test_are_rejects_indefinite_R():
    with pytest.raises(ValueError):
        solve_are(LQRProblem(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), -np.eye(1)))


# -- assembly ---------------------------------------------------------------

@pytest.fixture
def planar_problem():
    return SynthesisProblem(planar_example(), 0.1, GridSpec.box(1.5, 2, 9),
                            W_basis=monomial_basis(2, 2, [0]), rho_basis=monomial_basis(2, 2))


def test_assemble_matches_checker(planar_problem):
    th = planar_problem.theta_of(PolyMatrix.identity(2, 2), parse_poly("1 + 2*x2^2", 2))
    F = assemble_lmi(planar_problem, [0.0, 0.0])(th)
    np.testing.assert_allclose(F, np.diag([-1.8, -0.8]), atol=1e-12)


def test_assemble_matches_checker_off_origin(planar_problem, rng):
    th = rng.normal(size=planar_problem.n_params)
    W, rho = planar_problem.W_of(th), planar_problem.rho_of(th)
    for x in rng.uniform(-1.5, 1.5, size=(5, 2)):
        F = assemble_lmi(planar_problem, x)(th)
        ref = ccm_rho_matrices(planar_problem.sys, W, rho, 0.1, x[None])[0]
        np.testing.assert_allclose(F, ref, atol=1e-10)


def test_assemble_is_linear(planar_problem, rng):
    th = rng.normal(size=planar_problem.n_params)
    amap = assemble_lmi(planar_problem, [0.3, -0.7])
    np.testing.assert_allclose(amap(2 * th), 2 * amap(th), atol=1e-12)
    np.testing.assert_array_equal(amap(np.zeros_like(th)), 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_objective_convex(seed, t):
    prob = SynthesisProblem(planar_example(), 0.1, GridSpec.box(1.5, 2, 5),
                            W_basis=monomial_basis(2, 2, [0]), rho_basis=monomial_basis(2, 2))
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, prob.n_params))
    lhs = phi(prob, t * a + (1 - t) * b)
    assert lhs <= t * phi(prob, a) + (1 - t) * phi(prob, b) + 1e-9


def test_killing_safe_basis_rejected():
    with pytest.raises(ValueError, match="Killing"):
        SynthesisProblem(planar_example(), 0.1, GridSpec.box(1, 2, 3),
                         W_basis=monomial_basis(2, 2), rho_basis=[(0, 0)])


# -- synthesis --------------------------------------------------------------

def test_scalar_stable_feasible():
    sys = ControlAffineSystem.from_strings(["-x1"], [["1"]])
    prob = SynthesisProblem(sys, 0.5, GridSpec.box(1, 1, 5), W_basis=[(0,)], rho_basis=[(0,)],
                            alpha1=0.1)
    res = synthesize(prob)
    assert res.feasible
    assert res.W.alpha1 >= 0.1 - 1e-9
    assert res.achieved_margin > 0


def test_scalar_unstable_unactuated_infeasible():
    sys = ControlAffineSystem.from_strings(["x1"], None)
    prob = SynthesisProblem(sys, 0.0, GridSpec.box(1, 1, 5), W_basis=[(0,)], rho_basis=[],
                            alpha1=0.1)
    res = synthesize(prob)
    assert not res.feasible
    assert res.status == "infeasible"


def test_planar_synthesis_on_small_box(planar_problem):
    res = synthesize(planar_problem)
    assert res.feasible
    Xf = planar_problem.grid.refined(2)
    assert check_ccm_rho(planar_problem.sys, res.W_poly, res.rho, 0.1, Xf).passed
    # W was only allowed to depend on x1
    for i in range(2):
        for j in range(2):
            assert not res.W_poly[i, j].depends_on(1)


def test_result_text_roundtrip(planar_problem):
    res = synthesize(planar_problem)
    W, rho, kv = load_metric_text(res.to_text())
    X = planar_problem.grid.points()
    np.testing.assert_allclose(W.evaluate_batch(X), res.W_poly.evaluate_batch(X), atol=1e-12)
    np.testing.assert_allclose(rho(X), res.rho(X), atol=1e-12)
    assert kv["status"] == res.status


def test_anchors_respected():
    prob = andrieu_problem(points=5)
    A, b = prob.equality_constraints()
    th = prob.initial_theta()
    assert A.shape[0] == 7
    P, _ = andrieu_lqr()
    np.testing.assert_allclose(b[:6], np.linalg.inv(P)[np.triu_indices(3)])
    assert b[6] == 2.0
    assert th.size == prob.n_params


def test_are_stabilizable_not_controllable():
    A = np.array([[-1.0, 0.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    prob = LQRProblem(A, B, np.eye(2), np.eye(1))
    P, K = solve_are(prob)
    assert are_residual(prob, P) <= 1e-8
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0
