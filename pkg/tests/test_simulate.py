import numpy as np
import pytest

from ccmkit.controller import LinearFeedback, TrajectorySource
from ccmkit.polydyn import ControlAffineSystem
from ccmkit.simulate import (SimConfig, SimulationTrace, check_energy_decay, check_envelope,
                             example1_demo, rk4_step, simulate)
from ccmkit.systems import example1_system


@pytest.fixture
def decay():
    return ControlAffineSystem.from_strings(["-x1"], None)


def test_linear_decay(decay):
    traj = TrajectorySource.equilibrium([0.0], [], decay)
    tr = simulate(decay, None, traj, [1.0], SimConfig(dt=1e-3, horizon=1.0))
    assert tr.final_state[0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    assert tr.times[-1] == pytest.approx(1.0)


def test_rk4_order():
    def err(dt):
        x = np.array([1.0])
        for _ in range(int(round(1.0 / dt))):
            x = rk4_step(lambda z: -z, x, dt)
        return abs(x[0] - np.exp(-1.0))
    ratio = err(0.1) / err(0.05)
    assert 14.0 <= ratio <= 18.0


def test_stays_at_target(planar):
    traj = TrajectorySource.equilibrium([0.0, 0.0], [0.0], planar)
    tr = simulate(planar, LinearFeedback([[0.0, 1.0]], traj), traj, [0.0, 0.0],
                  SimConfig(dt=0.01, horizon=1.0))
    assert tr.errors.max() <= 1e-9


def test_divergence_is_recorded():
    sys = ControlAffineSystem.from_strings(["x1^2"], None)
    traj = TrajectorySource.equilibrium([0.0], [], sys)
    tr = simulate(sys, None, traj, [2.0], SimConfig(dt=1e-3, horizon=5.0))
    assert tr.diverged
    assert tr.times[-1] < 0.6
    assert np.all(np.isfinite(tr.states))


def test_envelope_contracting_system(decay):
    traj = TrajectorySource.equilibrium([0.0], [], decay)
    tr = simulate(decay, None, traj, [3.0], SimConfig(dt=1e-2, horizon=3.0))
    assert check_envelope(tr, 1.0, 1.0).violations == 0
    assert check_envelope(tr, 2.0, 1.0).violations > 0


def test_envelope_zero_initial_error(decay):
    traj = TrajectorySource.equilibrium([0.0], [], decay)
    tr = simulate(decay, None, traj, [0.0], SimConfig(dt=1e-2, horizon=1.0))
    assert check_envelope(tr, 1.0, 1.0).violations == 0


def test_energy_decay_report():
    t = np.linspace(0, 1, 11)
    E = np.full(11, np.nan)
    E[::2] = 4.0 * np.exp(-2 * t[::2])
    z = np.zeros((11, 1))
    tr = SimulationTrace(t, z, z, z, E, np.full(11, np.nan))
    rep = check_energy_decay(tr, 1.0)
    assert rep.violations == 0 and rep.samples == 6
    assert check_energy_decay(tr, 2.0).violations > 0


def test_trace_validation():
    z = np.zeros((3, 1))
    with pytest.raises(ValueError):
        SimulationTrace(np.array([0.0, 0.0, 1.0]), z, z, z, np.zeros(3), np.zeros(3))


def test_csv_metadata(decay):
    traj = TrajectorySource.equilibrium([0.0], [], decay)
    tr = simulate(decay, None, traj, [1.0], SimConfig(dt=0.1, horizon=0.3))
    text = tr.to_csv({"seed": 7})
    assert "# seed: 7" in text and "# dt: 0.1" in text
    assert text.splitlines()[-5].startswith("t,x_1")


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(integrator="euler")


def test_example1_single_cases():
    sys = example1_system()
    origin = TrajectorySource.equilibrium([0.0, 0.0], [0.0], sys)
    cfg = SimConfig(dt=1e-3, horizon=1.0)
    fb = lambda t, x: np.array([-x[0] ** 2 - x[1] ** 2])
    tr = simulate(sys, fb, origin, [1.0, 1.0], cfg)
    V = np.sum(tr.states ** 2, axis=1)
    assert np.all(V <= V[0] * np.exp(-4 * tr.times) * 1.05)
    tr = simulate(sys, fb, origin, [5.0, 0.0], cfg)
    assert np.all(tr.states[:, 1] == 0.0)
    xe = [3.0, np.sqrt(3.0)]
    tr = simulate(sys, None, TrajectorySource.equilibrium(xe, [0.0], sys), xe, cfg)
    assert np.abs(tr.states - xe).max() <= 1e-8


def test_example1_demo():
    assert example1_demo(n_random=4, horizon=1.0).passed
