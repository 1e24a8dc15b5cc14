import dataclasses

import numpy as np
import pytest
from scipy import signal

from swcaw import awsys


def hurwitz(A):
    return np.max(np.linalg.eigvals(A).real) < 0


def test_benchmark_dimensions(bench_cl):
    assert (bench_cl.n, bench_cl.n_u, bench_cl.n_v, bench_cl.n_w, bench_cl.n_z) == (5, 1, 3, 1, 1)
    assert bench_cl.to_dict()["dims"] == {"n": 5, "n_u": 1, "n_v": 3, "n_w": 1, "n_z": 1}
    assert np.all(bench_cl.D_cluq == 0)


def test_benchmark_plant_and_loop_are_stable(bench_cl):
    plant, _ = awsys.benchmark_nominal()
    assert hurwitz(plant.A_p)
    assert hurwitz(bench_cl.A_cl)


def test_printed_controller_table():
    c = awsys.printed_controller()
    assert np.array_equal(c.A_c, [[-80.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(c.C_c, [[20.25, 1600.0]])
    assert c.D_cy[0, 0] == 80.0 and c.D_cw[0, 0] == -80.0
    plant, _ = awsys.benchmark_nominal()
    cl = awsys.assemble_closed_loop(plant, c, 1.0)
    # read literally the loop is positive feedback
    assert not hurwitz(cl.A_cl)
    assert np.allclose(cl.C_clu, [[80.0, 880.0, 2400.0, 20.25, 1600.0]])


def test_benchmark_controller_is_swapped_table():
    c = awsys.printed_controller()
    _, b = awsys.benchmark_nominal()
    assert np.array_equal(b.B_cy, c.B_cw) and np.array_equal(b.B_cw, c.B_cy)
    assert np.array_equal(b.D_cy, c.D_cw) and np.array_equal(b.D_cw, c.D_cy)


def test_closed_loop_matches_direct_interconnection(rng):
    # v = 0, q = 0: the compact model equals the plain feedback interconnection
    from conftest import random_stable_pair

    plant, ctrl, cl = random_stable_pair(rng, n_u=2)
    P, C = plant, ctrl
    x = rng.normal(size=cl.n)
    w = rng.normal(size=cl.n_w)
    xp, xc = x[:P.n_p], x[P.n_p:]
    y = P.C_py @ xp + P.D_pyw @ w
    u = C.C_c @ xc + C.D_cy @ y + C.D_cw @ w
    dx = np.concatenate([P.A_p @ xp + P.B_pu @ u + P.B_pw @ w, C.A_c @ xc + C.B_cy @ y + C.B_cw @ w])
    z = P.C_pz @ xp + P.D_pzu @ u + P.D_pzw @ w
    assert np.allclose(cl.A_cl @ x + cl.B_clw @ w, dx)
    assert np.allclose(cl.C_clu @ x + cl.D_cluw @ w, u)
    assert np.allclose(cl.C_clz @ x + cl.D_clzw @ w, z)
    # a deadzone output q reduces the applied input to u - q
    q = rng.normal(size=cl.n_u)
    dxq = np.concatenate([P.B_pu @ (-q), np.zeros(C.n_c)])
    assert np.allclose(cl.B_clq @ q, dxq)
    assert np.allclose(cl.D_clzq @ q, -P.D_pzu @ q)


def test_feedthrough_rejected():
    plant, ctrl = awsys.benchmark_nominal()
    bad = dataclasses.replace(plant, D_pyu=np.ones((1, 1)))
    with pytest.raises(ValueError, match="D_pyu"):
        awsys.assemble_closed_loop(bad, ctrl)


def test_dimension_errors():
    plant, ctrl = awsys.benchmark_nominal()
    with pytest.raises(ValueError):
        dataclasses.replace(plant, A_p=np.ones((2, 3)))
    with pytest.raises(ValueError):
        awsys.assemble_closed_loop(plant, ctrl, [-1.0])


def test_serialization_round_trip(bench_cl):
    plant, ctrl = awsys.benchmark_nominal()
    assert awsys.Plant.from_dict(plant.to_dict()).to_dict() == plant.to_dict()
    assert awsys.Controller.from_dict(ctrl.to_dict()).to_dict() == ctrl.to_dict()
    back = awsys.ClosedLoop.from_dict(bench_cl.to_dict())
    assert back.to_dict() == bench_cl.to_dict()


def test_circuit_coefficients():
    num, den = awsys.transfer_coefficients(awsys.circuit_to_plant(awsys.CircuitParams()))
    assert np.allclose(num, [1.0, 11.0, 30.0], rtol=0.02)
    assert np.allclose(den, [1.0, 10.6, 6.09, 0.9], rtol=0.02)
    assert np.allclose(np.sort(np.roots(num).real), [-5.882, -5.0], atol=1e-3)


def test_circuit_models_have_positive_dc_gain():
    for model in ("cascade", "nodal"):
        plant = awsys.circuit_to_plant(awsys.CircuitParams(), model=model)
        assert hurwitz(plant.A_p)
        dc = -plant.C_py @ np.linalg.solve(plant.A_p, plant.B_pu)
        assert dc[0, 0] > 0
    with pytest.raises(ValueError):
        awsys.circuit_to_plant(awsys.CircuitParams(), model="other")


def test_circuit_impedance_scaling():
    # scaling all resistances by lam and capacitances by 1/lam leaves the model unchanged
    p = awsys.CircuitParams()
    lam = 3.7
    a = p.as_array()
    scaled = awsys.CircuitParams.from_array(np.concatenate([a[:5] * lam, a[5:] / lam]))
    for model in ("cascade", "nodal"):
        n1, d1 = awsys.transfer_coefficients(awsys.circuit_to_plant(p, model=model))
        n2, d2 = awsys.transfer_coefficients(awsys.circuit_to_plant(scaled, model=model))
        assert np.allclose(n1, n2) and np.allclose(d1, d2)


def test_frozen_gain():
    p = awsys.CircuitParams(R1=400.0)
    k0 = awsys.circuit_gain(awsys.CircuitParams())
    frozen = awsys.circuit_to_plant(p, k=k0)
    assert frozen.C_py[0, 2] == pytest.approx(k0)
    num, _ = awsys.transfer_coefficients(awsys.circuit_to_plant(p))
    assert num[0] == pytest.approx(1.0)


def test_sampling_moments():
    unc = awsys.CircuitUncertainty()
    draws = np.array([p.as_array() for p in awsys.sample_circuit(unc, 20000, np.random.default_rng(1))])
    mean = unc.means.as_array()
    assert np.all(draws > 0)
    assert np.allclose(draws.mean(axis=0), mean, rtol=0.005)
    assert np.allclose(draws.std(axis=0) / mean, 0.10, rtol=0.03)


def test_sampling_positive_with_wide_spread():
    unc = awsys.CircuitUncertainty(relative_std=0.45)
    draws = np.array([p.as_array() for p in awsys.sample_circuit(unc, 5000, np.random.default_rng(2))])
    assert np.all(draws > 0)
    with pytest.raises(ValueError):
        awsys.CircuitUncertainty(relative_std=0.6)
    with pytest.raises(ValueError):
        awsys.CircuitParams(R1=-1.0)


def test_small_std_loops_stay_close_to_nominal():
    s = awsys.CircuitLoopSampler(awsys.CircuitUncertainty(relative_std=1e-4))
    loops = s(np.random.default_rng(0), 5)
    base = s.loop(awsys.CircuitParams())
    for cl in loops:
        assert hurwitz(cl.A_cl)
        assert np.allclose(np.sort_complex(np.linalg.eigvals(cl.A_cl)),
                           np.sort_complex(np.linalg.eigvals(base.A_cl)), rtol=1e-2, atol=1e-2)


def test_circuit_loop_matches_companion_benchmark(bench_cl):
    cl = awsys.CircuitLoopSampler().loop(awsys.CircuitParams())
    # same transfer function sigma -> y up to the 2% table rounding
    tf_a = signal.ss2tf(*awsys.unconstrained_matrices(cl))
    tf_b = signal.ss2tf(*awsys.unconstrained_matrices(bench_cl))
    assert np.allclose(tf_a[1], tf_b[1], rtol=0.05, atol=1.0)


def test_published_gains():
    assert np.array_equal(awsys.published_daw("nominal"), -awsys.PUBLISHED_DAW_NOMINAL)
    assert awsys.published_daw("robust").shape == (3, 1)
    with pytest.raises(ValueError):
        awsys.published_daw("other")


def test_point_mass_sampler(bench_cl):
    s = awsys.FixedLoopSampler(bench_cl)
    assert s(np.random.default_rng(0), 3) == [bench_cl] * 3


def test_with_u_bar(bench_cl):
    cl = awsys.with_u_bar(bench_cl, 2.0)
    assert np.array_equal(cl.u_bar, [2.0])
    assert np.array_equal(bench_cl.u_bar, [1.0])
