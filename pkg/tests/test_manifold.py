import numpy as np
import pytest

from ccmkit.controller import TrajectorySource
from ccmkit.manifold import (ConvergenceError, ManifoldError, ManifoldSpec, build_virtual,
                             check_corollary2, level_set_invariance, verify_convergence)
from ccmkit.metric import GridSpec
from ccmkit.polydyn import ControlAffineSystem, PolyMatrix, parse_poly
from ccmkit.simulate import SimConfig, simulate
from ccmkit.systems import consensus_system


def _spec(z, n, c=0.0):
    return ManifoldSpec.from_strings(z, n, c)


def test_null_space_difference():
    vs = build_virtual(consensus_system(), _spec(["x1 - x2"], 2), GridSpec.box(1, 2, 3))
    G = vs.G.constant_value()
    np.testing.assert_allclose(np.abs(G[:, 0]), [1 / np.sqrt(2)] * 2)
    np.testing.assert_allclose(G[0, 0], G[1, 0])


def test_null_space_coordinate_plane():
    sys = ControlAffineSystem.from_strings(["-x1", "-x2", "-x3"], None)
    G = build_virtual(sys, _spec(["x3"], 3), GridSpec.box(1, 3, 3)).G.constant_value()
    assert G.shape == (3, 2)
    np.testing.assert_allclose(G[2], 0.0, atol=1e-12)


def test_null_space_axis():
    sys = ControlAffineSystem.from_strings(["-x1", "-x2", "-x3"], None)
    G = build_virtual(sys, _spec(["x1", "x2"], 3), GridSpec.box(1, 3, 3)).G.constant_value()
    np.testing.assert_allclose(np.abs(G[:, 0]), [0, 0, 1], atol=1e-12)


def test_null_space_nonconstant():
    sys = ControlAffineSystem.from_strings(["-x1", "-x2"], None)
    spec = _spec(["x1^2 + x2^2"], 2, 1.0)
    g = GridSpec.box(2, 2, 4)   # even point count avoids the origin
    vs = build_virtual(sys, spec, g)
    X = g.points()
    assert np.abs(spec.jacobian.evaluate_batch(X) @ vs.G.evaluate_batch(X)).max() <= 1e-10
    assert vs.system.m == 1


def test_rank_deficiency_detected():
    sys = ControlAffineSystem.from_strings(["-x1", "-x2"], None)
    with pytest.raises(ManifoldError):
        build_virtual(sys, _spec(["x1^2 + x2^2"], 2), GridSpec.box(1, 2, 3))


def test_virtual_system_keeps_original_inputs(planar):
    vs = build_virtual(planar, _spec(["x1"], 2), GridSpec.box(1, 2, 3))
    Bb = vs.B_bar.evaluate([0.0, 0.0])
    np.testing.assert_allclose(Bb[:, 0], [0.0, 1.0])
    assert Bb.shape == (2, 2)


def test_corollary2_passes():
    rep = check_corollary2(consensus_system(), _spec(["x1 - x2"], 2), PolyMatrix.identity(2, 2),
                           0.5, GridSpec.box(2, 2, 5))
    assert rep.max_eig == pytest.approx(-6.0)
    assert rep.passed


def test_corollary2_fails_at_high_rate():
    rep = check_corollary2(consensus_system(), _spec(["x1 - x2"], 2), PolyMatrix.identity(2, 2),
                           3.0, GridSpec.box(2, 2, 5))
    assert rep.max_eig == pytest.approx(4.0)
    assert not rep.passed


def test_corollary2_linear_manifold_matches_partial_contraction(rng):
    sys = ControlAffineSystem.from_strings(["-2*x1 + x2", "x1 - 3*x2 + x3", "-x3"], None)
    V = rng.normal(size=(1, 3))
    z = [" + ".join(f"({float(V[0, j])!r})*x{j + 1}" for j in range(3))]
    rep = check_corollary2(sys, _spec(z, 3), PolyMatrix.identity(3, 3), 0.0, GridSpec.box(1, 3, 3))
    J = sys.f_jacobian.constant_value()
    assert rep.max_eig == pytest.approx(float((V @ (J + J.T) @ V.T)[0, 0]), rel=1e-10)


def test_corollary2_requires_uncontrolled(planar):
    with pytest.raises(ManifoldError):
        check_corollary2(planar, _spec(["x1"], 2), PolyMatrix.identity(2, 2), 0.1,
                         GridSpec.box(1, 2, 3))


def test_corollary2_requires_invariant_metric():
    W = PolyMatrix([[parse_poly("1 + (x1 + x2)^2", 2), parse_poly("0", 2)],
                    [parse_poly("0", 2), parse_poly("1", 2)]], symmetric=True)
    with pytest.raises(ManifoldError):
        check_corollary2(consensus_system(), _spec(["x1 - x2"], 2), W, 0.5, GridSpec.box(1, 2, 3))
    W2 = PolyMatrix([[parse_poly("1 + (x1 - x2)^2", 2), parse_poly("0", 2)],
                     [parse_poly("0", 2), parse_poly("1 + (x1 - x2)^2", 2)]], symmetric=True)
    G = PolyMatrix.from_array(np.array([[1.0], [1.0]]), 2, symmetric=False)
    assert level_set_invariance(W2, G, GridSpec.box(1, 2, 3)) == 0.0


def test_convergence_rate():
    sys = consensus_system()
    traj = TrajectorySource.equilibrium([0.0, 0.0], [], sys)
    tr = simulate(sys, None, traj, [2.0, -1.0], SimConfig(dt=1e-3, horizon=3.0))
    rep = verify_convergence(_spec(["x1 - x2"], 2), tr)
    assert rep.rate_estimate == pytest.approx(2.0, abs=0.05)


def test_convergence_on_manifold():
    sys = consensus_system()
    traj = TrajectorySource.equilibrium([0.0, 0.0], [], sys)
    tr = simulate(sys, None, traj, [1.5, 1.5], SimConfig(dt=1e-2, horizon=1.0))
    rep = verify_convergence(_spec(["x1 - x2"], 2), tr)
    assert rep.max_residual <= 1e-9


def test_non_decaying_residual():
    sys = ControlAffineSystem.from_strings(["x1", "-x2"], None)
    traj = TrajectorySource.equilibrium([0.0, 0.0], [], sys)
    tr = simulate(sys, None, traj, [0.1, 1.0], SimConfig(dt=1e-2, horizon=2.0))
    with pytest.raises(ConvergenceError):
        verify_convergence(_spec(["x1"], 2), tr)


def test_level_must_match():
    with pytest.raises(ValueError):
        ManifoldSpec.from_strings(["x1", "x2"], 2, [0.0, 1.0, 2.0])
