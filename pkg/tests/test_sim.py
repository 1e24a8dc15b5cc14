import numpy as np
import pytest
from scipy import signal

from conftest import first_order_loop, random_stable_pair
from swcaw import awlmi, awsys, sim
from swcaw.sim import Signal


def test_zero_input_stays_at_rest(bench_cl):
    r = sim.simulate(bench_cl, None, Signal.zeros(1, 2.0))
    assert np.all(r.x == 0) and np.all(r.z == 0)
    assert not r.saturation_active.any()


def test_small_input_matches_linear_response(bench_cl):
    t = 1e-3 * np.arange(5001)
    w = 1e-3 * np.sin(2.0 * t)
    r = sim.simulate(bench_cl, 0.5 * np.ones((3, 1)), Signal(0.0, 1e-3, w))
    assert not r.saturation_active.any()
    sys = signal.StateSpace(*awsys.unconstrained_matrices(bench_cl))
    _, z, _ = signal.lsim(sys, w, t)
    assert np.allclose(r.z[:, 0], z, atol=1e-9 * 1e3 * np.abs(z).max())


@pytest.mark.parametrize("trial", range(20))
def test_compact_model_matches_raw_interconnection(trial):
    rng = np.random.default_rng(100 + trial)
    n_u = 1 if trial < 14 else 2
    plant, ctrl, cl = random_stable_pair(rng, n_u=n_u)
    D = 0.3 * rng.normal(size=(cl.n_v, n_u))
    if n_u == 1:
        D[-1, 0] = rng.uniform(-2.0, 0.8)
    else:
        D[-n_u:] = 0.2 * rng.uniform(-1, 1, size=(n_u, n_u))
    t = 1e-3 * np.arange(10001)
    w = Signal(0.0, 1e-3, 30.0 * np.sin(rng.uniform(0.2, 3.0) * t) + rng.normal())
    a = sim.simulate(cl, D, w)
    b = sim.simulate_interconnection(plant, ctrl, D, 1.0, w)
    assert a.saturation_active.any()
    scale = 1.0 + np.abs(b.x).max()
    assert np.max(np.abs(a.x - b.x)) <= 1e-8 * scale
    assert np.max(np.abs(a.z - b.z)) <= 1e-8 * (1.0 + np.abs(b.z).max())
    assert np.max(np.abs(a.u - b.u)) <= 1e-8 * (1.0 + np.abs(b.u).max())


def test_rk4_fourth_order(bench_cl):
    x0 = 1e-4 * np.array([2.0, -1.0, 0.5, 0.3, 0.01])

    def final(dt):
        w = Signal.zeros(1, 2.0, dt)
        return sim.simulate(bench_cl, None, w, x0=x0).x[-1]

    # linear regime keeps the right-hand side smooth
    assert not sim.simulate(bench_cl, None, Signal.zeros(1, 2.0, 0.005), x0=x0).saturation_active.any()
    ref = final(0.000625)
    e1 = np.linalg.norm(final(0.01) - ref)
    e2 = np.linalg.norm(final(0.005) - ref)
    assert 12.0 < e1 / e2 < 20.0


def test_sigma_consistency(bench_cl):
    r = sim.simulate(bench_cl, None, Signal.step(10.0, 5.0))
    assert np.array_equal(r.sigma, np.clip(r.u, -1.0, 1.0))
    assert np.array_equal(r.saturation_active, np.abs(r.u[:, 0]) > 1.0)
    assert r.saturation_active.any()
    assert np.all(np.abs(r.sigma) <= 1.0)


def test_dz_loop_closed_form():
    c = np.linspace(-5, 5, 41)[:, None]
    for g in (-3.0, -0.5, 0.0, 0.4, 0.95):
        u = sim.solve_dz_loop(c, np.array([[g]]), np.array([1.0]))
        assert np.allclose(u, c + g * sim.deadzone(u, 1.0), atol=1e-12)
    with pytest.raises(sim.SimulationError):
        sim.solve_dz_loop(c, np.array([[1.0]]), np.array([1.0]))


def test_dz_loop_fixed_point():
    rng = np.random.default_rng(0)
    c = 4 * rng.normal(size=(30, 2))
    G = np.array([[0.2, -0.3], [0.1, 0.25]])
    u = sim.solve_dz_loop(c, G, np.array([1.0, 0.5]))
    assert np.allclose(u, c + sim.deadzone(u, np.array([1.0, 0.5])) @ G.T, atol=1e-10)
    with pytest.raises(sim.SimulationError):
        # u = c + dz(u) has no solution once |c| > u_bar
        sim.solve_dz_loop(np.array([[10.0, 10.0]]), np.eye(2), np.array([1.0, 1.0]))


def test_l2norm():
    dt = 1e-3
    t = dt * np.arange(int(40 / dt) + 1)
    e = np.exp(-t)
    assert sim.l2norm(e, dt) == pytest.approx(1 / np.sqrt(2), rel=1e-6)
    assert sim.l2norm(Signal(0.0, dt, 3.0 * e)) == pytest.approx(3 / np.sqrt(2), rel=1e-6)
    two = np.stack([e, e], axis=1)
    assert sim.l2norm(two, dt) == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(ValueError):
        sim.l2norm(e)


def test_probe_inputs_energy():
    W = sim.probe_inputs(9, 1, 0.01, np.random.default_rng(0), 5.0, 8.0)
    energies = np.sqrt(sim._trapz_energy(W, sim.DT))
    assert np.allclose(sorted(set(np.round(energies / 0.01, 9))), sim.RHO_LEVELS)
    t = sim.DT * np.arange(W.shape[1])
    assert np.all(W[:, t > 5.0] == 0)
    with pytest.raises(ValueError):
        sim.probe_inputs(1, 1, 0.01, np.random.default_rng(0), 1.0, 2.0, families=("bogus",))


def test_gain_check_approaches_hinf_from_below():
    cl = first_order_loop()
    g = sim.gain_check(cl, None, 1.0, 1.0, n_trials=6, t_support=200.0, t_end=230.0, dt=5e-3,
                       families=("sine",), sine_freqs=[0.01])
    assert 0.95 < g <= 1.0 + 1e-3


def test_gain_check_is_bounded_by_certificate(bench_cl):
    res = awlmi.analyze_nominal(bench_cl, np.zeros((3, 1)), 0.003)
    g = sim.gain_check(bench_cl, None, res.gamma_hat, 0.003, n_trials=12, t_end=30.0)
    assert g <= res.gamma_hat * (1 + 1e-3)


def test_antiwindup_reduces_step_overshoot(bench_cl):
    des = awlmi.synthesize_nominal(bench_cl, 0.003)
    w = Signal.step(10.0, 30.0)
    plain = sim.simulate(bench_cl, None, w)
    aw = sim.simulate(bench_cl, des.D_aw, w)
    # z = w - y, so the overshoot of y is -min z
    over_plain, over_aw = -plain.z.min(), -aw.z.min()
    assert over_plain > 1.0
    assert over_aw < 0.5 * over_plain


def test_signal_and_csv():
    with pytest.raises(ValueError):
        Signal(0.0, 0.0, [1.0])
    with pytest.raises(ValueError):
        Signal.zeros(1, 0.0105, 1e-3 * 2)
    s = Signal.step([1.0, 2.0], 0.01, t_on=0.005)
    assert s.dim == 2 and len(s) == 11
    assert np.array_equal(s.samples[5], [1.0, 2.0]) and np.all(s.samples[4] == 0)
    r = sim.simulate(first_order_loop(), None, Signal.step(1.0, 0.01))
    lines = r.to_csv("seed 0").splitlines()
    assert lines[0] == "# seed 0"
    assert lines[1] == "t,x1,u,sigma,z"
    assert len(lines) == 2 + 11


def test_input_beyond_signal_is_zero():
    cl = first_order_loop()
    r = sim.simulate(cl, None, Signal(0.0, 1e-3, np.ones(11)), t_end=0.02)
    assert len(r.t) == 21
    W = sim._grid_inputs(Signal(0.0, 1e-3, np.ones(11)), 1, 0.02)
    assert np.all(W[:11] == 1.0) and np.all(W[11:] == 0.0)
    # once the input has ramped down the state decays
    assert np.all(np.diff(r.x[11:, 0]) < 0)


def test_dimension_mismatch(bench_cl):
    with pytest.raises(ValueError):
        sim.simulate(bench_cl, None, Signal.zeros(2, 1.0))
    with pytest.raises(ValueError):
        sim.simulate_batch(bench_cl, None, np.zeros((3, 4)))
