import numpy as np
import pytest

from ccmkit.controller import (DifferentialFeedback, GeodesicFeedback, LinearFeedback,
                               MinNormFeedback, SampledFeedback, TrajectorySource,
                               feedback_continuous, feedback_sampled, k_delta_strong,
                               min_norm_control, open_loop, path_integrate, sontag_rho)
from ccmkit.geodesic import DiscretizedCurve, geodesic
from ccmkit.metric import CertificationError, DualMetric, GridSpec, MetricEvaluator, Multiplier
from ccmkit.polydyn import ControlAffineSystem, PolyMatrix, parse_poly
from ccmkit.simulate import SimConfig, rk4_step, simulate
from ccmkit.synthesis import LQRProblem, solve_are
from ccmkit.systems import andrieu_lqr


@pytest.fixture
def planar_fb(planar, planar_certificate):
    W, rho, lam = planar_certificate
    return DifferentialFeedback(planar, W, lam, rho=rho)


@pytest.fixture
def origin2(planar):
    return TrajectorySource.equilibrium([0.0, 0.0], [0.0], planar)


# -- differential feedback --------------------------------------------------

def test_sontag_rho_negative_drift():
    assert sontag_rho(-1.0, 7.0) == 0.0


def test_sontag_rho_values():
    assert sontag_rho(3.0, 4.0) == pytest.approx(2.0)
    assert sontag_rho(0.0, 1.0) == pytest.approx(1.0)


def test_sontag_rho_no_authority():
    with pytest.raises(CertificationError):
        sontag_rho(1.0, 0.0)


def test_strong_gain_array_form():
    B = np.array([[0.0], [1.0]])
    assert k_delta_strong(None, [0.0, 1.0], 2.0, B, np.eye(2))[0] == pytest.approx(-1.0)
    np.testing.assert_array_equal(k_delta_strong(None, [0.0, 0.0], 2.0, B, np.eye(2)), 0.0)
    assert k_delta_strong(None, [3.0, 1.0], 0.0, B, np.eye(2))[0] == 0.0


def test_strong_form_requires_killing(planar):
    W = PolyMatrix([[parse_poly("1 + x2^2", 2), parse_poly("0", 2)],
                    [parse_poly("0", 2), parse_poly("1", 2)]], symmetric=True)
    with pytest.raises(CertificationError):
        DifferentialFeedback(planar, W, 0.1, rho=Multiplier.constant(1.0, 2))


def test_sontag_form_dissipates(planar, planar_certificate, rng):
    W, _, lam = planar_certificate
    fb = DifferentialFeedback(planar, W, lam, form="sontag")
    for _ in range(20):
        x = rng.uniform(-1.5, 1.5, 2)
        d = rng.normal(size=2)
        a, bvec = fb.sontag_terms(x, d, [0.0])
        k = fb.k_delta_sontag(x, d, [0.0])
        # Vdot + 2 lam V = a + bvec' k  must be negative
        assert a + bvec @ k < 0


# -- path integration -------------------------------------------------------

def _unit_system():
    return ControlAffineSystem.from_strings(["-x1", "0"], [["0"], ["1"]])


def test_path_integral_constant_integrand():
    fb = DifferentialFeedback(_unit_system(), PolyMatrix.identity(2, 2), 0.5,
                              rho=Multiplier.constant(2.0, 2))
    path = path_integrate(DiscretizedCurve.straight([0, 0], [0, 1], 10), [0.7], fb)
    assert path.end[0] == pytest.approx(0.7 - 1.0)


def test_path_integral_zero_length():
    fb = DifferentialFeedback(_unit_system(), PolyMatrix.identity(2, 2), 0.5,
                              rho=Multiplier.constant(2.0, 2))
    path = path_integrate(DiscretizedCurve.straight([1, 1], [1, 1], 10), [0.3], fb)
    np.testing.assert_array_equal(path.values, 0.3)


def test_path_integral_zero_multiplier():
    fb = DifferentialFeedback(_unit_system(), PolyMatrix.identity(2, 2), 0.5,
                              rho=Multiplier.constant(0.0, 2))
    path = path_integrate(DiscretizedCurve.straight([0, 0], [1, 2], 10), [0.3], fb)
    np.testing.assert_allclose(path.values, 0.3)


def test_path_integral_step_halving(planar, planar_certificate):
    W, _, lam = planar_certificate
    fb = DifferentialFeedback(planar, W, lam, form="sontag")
    M = MetricEvaluator(W)
    g = geodesic([0.0, 0.0], [1.0, -0.8], M, 32)
    u32 = path_integrate(g.curve, [0.0], fb).end
    u64 = path_integrate(g.curve.refined(), [0.0], fb).end
    assert np.abs(u32 - u64).max() <= 1e-6 * max(1.0, np.abs(u64).max())


# -- feedback laws ----------------------------------------------------------

def test_linear_system_gives_linear_feedback(rng):
    sys = ControlAffineSystem.from_strings(["x2", "x1 - x2"], [["0"], ["1"]])
    A, B = sys.linearize(np.zeros(2))
    P, _ = solve_are(LQRProblem(A, B, np.eye(2), np.eye(1)))
    W = DualMetric.constant(np.linalg.inv(P))
    fb = DifferentialFeedback(sys, W, 0.1, rho=Multiplier.constant(3.0, 2))
    traj = TrajectorySource.equilibrium([0.0, 0.0], [0.0], sys)
    for _ in range(3):
        x = rng.normal(size=2)
        expected = -0.5 * 3.0 * B.T @ P @ x
        np.testing.assert_allclose(feedback_continuous(x, 0.0, traj, fb), expected, atol=1e-12)


def test_ccm_gain_matches_lqr_at_origin(andrieu, andrieu_cert):
    W, rho = andrieu_cert
    fb = DifferentialFeedback(andrieu, W, 0.5, rho=rho)
    _, K = andrieu_lqr()
    np.testing.assert_allclose(fb.gain(np.zeros(3))[0], -K, rtol=1e-6)


def test_ccm_close_to_lqr_near_origin(andrieu, andrieu_cert, rng):
    W, rho = andrieu_cert
    fb = DifferentialFeedback(andrieu, W, 0.5, rho=rho)
    traj = TrajectorySource.equilibrium(np.zeros(3), [0.0], andrieu)
    _, K = andrieu_lqr()
    for x in rng.uniform(-0.1, 0.1, size=(8, 3)):
        diff = np.linalg.norm(feedback_continuous(x, 0.0, traj, fb) + K @ x)
        assert diff <= 0.05 * np.linalg.norm(K) * np.linalg.norm(x)


def test_boundary_consistency(planar, planar_fb, planar_certificate):
    W, _, lam = planar_certificate
    xs, us = np.array([0.4, -0.2]), np.array([0.0])
    # a non-equilibrium constant target is fine for the boundary identity
    traj = TrajectorySource("const", lambda t: (xs, us), lambda t: np.zeros(2))
    M = MetricEvaluator(W)
    controllers = [GeodesicFeedback(planar_fb, traj),
                   MinNormFeedback(planar, M, traj, lam),
                   LinearFeedback(np.ones((1, 2)), traj),
                   SampledFeedback(planar_fb, traj, 0.1, dt=0.01)]
    for c in controllers:
        np.testing.assert_array_equal(c(0.0, xs.copy()), us)
    np.testing.assert_array_equal(min_norm_control(xs, 0.0, traj, M, planar, lam), us)


def test_min_norm_projection():
    sys = ControlAffineSystem.from_strings(["0"], [["1"]])
    M = MetricEvaluator(PolyMatrix.identity(1, 1))
    traj = TrajectorySource.equilibrium([0.0], [0.0], sys)
    u = min_norm_control([2.0], 0.0, traj, M, sys, lam=1.0)
    assert u[0] == pytest.approx(-2.0)


def test_min_norm_interior_case():
    sys = ControlAffineSystem.from_strings(["-3*x1"], [["1"]])
    M = MetricEvaluator(PolyMatrix.identity(1, 1))
    traj = TrajectorySource.equilibrium([0.0], [0.0], sys)
    np.testing.assert_array_equal(min_norm_control([2.0], 0.0, traj, M, sys, lam=1.0), 0.0)


def test_min_norm_without_authority():
    sys = ControlAffineSystem.from_strings(["x1", "0"], [["0"], ["1"]])
    M = MetricEvaluator(PolyMatrix.identity(2, 2))
    traj = TrajectorySource.equilibrium([0.0, 0.0], [0.0], sys)
    with pytest.raises(CertificationError):
        min_norm_control([1.0, 0.0], 0.0, traj, M, sys, lam=1.0)


def test_sampled_trajectory_rejects_inconsistent_samples(planar):
    t = np.linspace(0, 1, 11)
    X = np.stack([t, t], axis=1)
    with pytest.raises(ValueError):
        TrajectorySource.sampled(planar, t, X, np.zeros(11))


def test_sampled_trajectory_accepts_solution():
    sys = ControlAffineSystem.from_strings(["-x1"], [["1"]])
    t = np.linspace(0, 1, 201)
    traj = TrajectorySource.sampled(sys, t, np.exp(-t)[:, None], np.zeros(201), tol=1e-5)
    assert traj(0.5)[0][0] == pytest.approx(np.exp(-0.5), rel=1e-8)


# -- differential dissipation along the extended dynamics -------------------

def test_differential_dissipation(planar, planar_fb, planar_certificate, rng):
    _, _, lam = planar_certificate
    dt, T = 1e-3, 2.0
    for _ in range(20):
        z = np.concatenate([rng.uniform(-1.5, 1.5, 2), rng.normal(size=2)])

        def rhs(z):
            x, d = z[:2], z[2:]
            A = planar.f_jacobian.evaluate(x)
            return np.concatenate([planar.f_at(x), A @ d + planar.B_at(x) @ planar_fb(x, d)])
        V0 = z[2:] @ z[2:]
        for k in range(int(T / dt)):
            z = rk4_step(rhs, z, dt)
        assert z[2:] @ z[2:] <= np.exp(-2 * lam * T) * V0 * 1.05


# -- open loop and sampled data ---------------------------------------------

def test_open_loop_at_target(planar_fb, origin2):
    r = open_loop([0.0, 0.0], 0.0, 0.2, origin2, planar_fb, N=8, dt=0.01)
    np.testing.assert_array_equal(r.controls, 0.0)
    assert np.all(r.lengths == 0.0)


def test_open_loop_matches_feedback_at_start(planar_fb, origin2):
    x0 = np.array([0.8, -0.6])
    r = open_loop(x0, 0.0, 0.05, origin2, planar_fb, N=16, dt=0.01)
    np.testing.assert_allclose(r.controls[0], feedback_continuous(x0, 0.0, origin2, planar_fb, N=16),
                               atol=1e-12)
    assert r.max_anchor_drift <= 1e-12


def test_open_loop_length_decay(planar_fb, origin2, planar_certificate):
    lam = planar_certificate[2]
    r = open_loop([1.0, 1.2], 0.0, 2.0, origin2, planar_fb, N=16, dt=0.01, record_every=10)
    assert np.all(r.lengths <= np.exp(-lam * r.times) * r.lengths[0] * 1.05)


def test_feedback_sampled_consistency(planar_fb, origin2):
    x = np.array([0.5, 0.5])
    np.testing.assert_allclose(feedback_sampled(x, 0.0, 0.0, origin2, planar_fb, N=16),
                               feedback_continuous(x, 0.0, origin2, planar_fb, N=16))
    r = open_loop(x, 0.0, 0.1, origin2, planar_fb, N=16, dt=0.01)
    np.testing.assert_allclose(feedback_sampled(x, 0.0, 0.1, origin2, planar_fb, N=16, dt=0.01),
                               r.controls[-1])


def test_sampled_data_distance_decay(planar, planar_fb, origin2, planar_certificate):
    lam = planar_certificate[2]
    ctrl = SampledFeedback(planar_fb, origin2, 0.1, N=16, dt=0.01)
    simulate(planar, ctrl, origin2, [1.0, -1.0], SimConfig(dt=0.01, horizon=2.0))
    d = np.array([L for _, L in ctrl.sample_log])
    assert len(d) == 21  # samples at 0, 0.1, ..., 2.0
    assert np.all(d[1:] <= d[:-1] * np.exp(-lam * 0.1) * 1.05)


def test_continuous_feedback_energy_monotone(planar, planar_fb, origin2, planar_certificate):
    W, _, lam = planar_certificate
    dt = 0.01
    tr = simulate(planar, GeodesicFeedback(planar_fb, origin2, N=16), origin2, [1.0, 1.0],
                  SimConfig(dt=dt, horizon=2.0, energy_every=1, geodesic_N=16),
                  metric=MetricEvaluator(W))
    E = tr.energy
    assert np.all(E[1:] <= E[:-1] * np.exp(-2 * lam * dt) * 1.02)
    du = np.abs(np.diff(tr.controls[:, 0]))
    assert du.max() <= 50 * dt
