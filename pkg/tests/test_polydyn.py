import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccmkit.polydyn import (ControlAffineSystem, PolyExpr, PolyMatrix, PolyParseError,
                            annihilator, differential_dynamics, directional_derivative,
                            jacobian, parse_poly)
from ccmkit.systems import andrieu_system, planar_example


def test_evaluate_monomial():
    assert parse_poly("x1^2", 1).evaluate([2.0]) == 4.0


def test_evaluate_zero_polynomial():
    assert PolyExpr.const(0.0, 3).evaluate([1.0, -2.0, 5.0]) == 0.0


def test_evaluate_planar_drift():
    p = parse_poly("-x1 - x1^3 + x2^2", 2)
    assert p.evaluate([1.0, 2.0]) == pytest.approx(2.0)


def test_evaluate_dimension_mismatch():
    with pytest.raises(ValueError):
        parse_poly("x1 + x2", 2).evaluate([1.0])


@pytest.mark.parametrize("text", ["x1 +", "x3", "2*(x1", "x1^-1", "x1 $ 2"])
def test_parse_errors(text):
    with pytest.raises(PolyParseError):
        parse_poly(text, 2)


def test_parse_roundtrip():
    p = parse_poly("3*x1^2*x2 - 0.5*x2 + 7", 2)
    q = parse_poly(p.to_string(), 2)
    assert p.allclose(q)


def test_arithmetic_and_products():
    x1, x2 = PolyExpr.var(0, 2), PolyExpr.var(1, 2)
    p = (x1 + x2) * (x1 - x2)
    assert p.allclose(parse_poly("x1^2 - x2^2", 2))


def test_jacobian_andrieu_at_origin():
    J = andrieu_system().f_jacobian.evaluate(np.zeros(3))
    np.testing.assert_array_equal(J, [[-1, 0, 1], [0, -1, 1], [0, -1, 0]])


def test_jacobian_constant_vector_is_zero():
    v = [PolyExpr.const(2.0, 2), PolyExpr.const(-1.0, 2)]
    assert jacobian(v).is_zero()


def test_jacobian_swap():
    v = [parse_poly("x2", 2), parse_poly("x1", 2)]
    np.testing.assert_array_equal(jacobian(v).evaluate([0.3, 0.7]), [[0, 1], [1, 0]])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_jacobian_matches_central_differences(x):
    sys = andrieu_system()
    x = np.array(x)
    J = sys.f_jacobian.evaluate(x)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (sys.f_at(x + e) - sys.f_at(x - e)) / (2 * h)
        assert np.all(np.abs(J[:, j] - fd) <= 1e-6 * (1 + np.abs(J[:, j])))


def test_directional_derivative_single_variable():
    M = PolyMatrix([[parse_poly("1 + x1^2", 2), PolyExpr.const(0, 2)],
                    [PolyExpr.const(0, 2), PolyExpr.const(1, 2)]])
    D = directional_derivative(M, [PolyExpr.const(1, 2), PolyExpr.const(0, 2)])
    np.testing.assert_allclose(D.evaluate([0.5, 3.0]), np.diag([1.0, 0.0]))


def test_directional_derivative_constant_matrix():
    D = directional_derivative(PolyMatrix.identity(2, 2), planar_example().f)
    assert D.is_zero()


def test_directional_derivative_along_planar_drift():
    M = PolyMatrix([[parse_poly("1 + 2*x2^2", 2), PolyExpr.const(0, 2)],
                    [PolyExpr.const(0, 2), PolyExpr.const(1, 2)]])
    assert directional_derivative(M, planar_example().f).is_zero()


def test_differential_dynamics_constant_B():
    dd = differential_dynamics(andrieu_system())
    x = np.array([0.4, -1.0, 2.0])
    np.testing.assert_allclose(dd.A_at(x, [3.0]), dd.A_at(x, [0.0]))


def test_differential_dynamics_state_dependent_B():
    sys = ControlAffineSystem.from_strings(["x2", "0"], [["0"], ["x1"]])
    dd = differential_dynamics(sys)
    x = np.array([1.0, 2.0])
    diff = dd.A_at(x, [2.5]) - dd.A_at(x, [0.0])
    np.testing.assert_allclose(diff, 2.5 * np.array([[0, 0], [1, 0]]))


def test_differential_dynamics_linear_system():
    sys = ControlAffineSystem.from_strings(["x2", "-x1 - x2"], [["0"], ["1"]])
    A = differential_dynamics(sys).A_at([5.0, -3.0], [1.0])
    np.testing.assert_array_equal(A, [[0, 1], [-1, -1]])


def test_differential_dynamics_affine_in_u(rng):
    sys = ControlAffineSystem.from_strings(["x1*x2", "x1^2"], [["x2"], ["1 + x1"]])
    dd = differential_dynamics(sys)
    for _ in range(10):
        x = rng.normal(size=2)
        u1, u2 = rng.normal(size=1), rng.normal(size=1)
        A0 = dd.A_at(x, [0.0])
        lhs = dd.A_at(x, u1 + u2) - A0
        rhs = (dd.A_at(x, u1) - A0) + (dd.A_at(x, u2) - A0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_annihilator_planar():
    np.testing.assert_allclose(np.abs(annihilator(np.array([[0.0], [1.0]]))), [[1.0], [0.0]])


def test_annihilator_three_states():
    Bp = annihilator(np.array([[0.0], [0.0], [1.0]]))
    assert Bp.shape == (3, 2)
    np.testing.assert_allclose(Bp.T @ Bp, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(Bp[2], 0.0)


def test_annihilator_fully_actuated():
    assert annihilator(np.eye(2)).shape == (2, 0)


def test_annihilator_rejects_rank_deficient():
    with pytest.raises(ValueError):
        annihilator(np.zeros((3, 1)))


def test_annihilator_rejects_state_dependent():
    B = PolyMatrix([[PolyExpr.const(0, 2)], [parse_poly("x1", 2)]])
    with pytest.raises(ValueError):
        annihilator(B)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 2), st.integers(0, 10_000))
def test_annihilator_orthonormal(n, m, seed):
    B = np.random.default_rng(seed).normal(size=(n, max(1, min(m, n - 1))))
    Bp = annihilator(B)
    assert np.linalg.norm(Bp.T @ B) <= 1e-10
    np.testing.assert_allclose(Bp.T @ Bp, np.eye(Bp.shape[1]), atol=1e-12)


def test_ndarray_times_polymatrix():
    M = PolyMatrix.identity(2, 2)
    T = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose((T @ M).evaluate([0.0, 0.0]), T)


def test_coordinate_change_of_linear_system(rng):
    sys = ControlAffineSystem.from_strings(["x2", "-2*x1 - x2"], [["0"], ["1"]])
    T = rng.normal(size=(2, 2)) + 3 * np.eye(2)
    st_ = sys.linear_coordinate_change(T)
    A, B = sys.linearize(np.zeros(2))
    At, Bt = st_.linearize(np.zeros(2))
    np.testing.assert_allclose(At, T @ A @ np.linalg.inv(T), atol=1e-12)
    np.testing.assert_allclose(Bt, T @ B, atol=1e-12)
