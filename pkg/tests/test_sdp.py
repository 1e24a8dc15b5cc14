import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swcaw import sdp
from swcaw.sdp import LmiBlock, Sense, SdpProblem, SolveStatus, Tolerances


def scalar_problem():
    # min x s.t. x >= 1
    return SdpProblem(1, [1.0], [LmiBlock([[-1.0]], [(0, [[1.0]])], Sense.PSD)])


def brl_problem(a=-1.0, b=1.0, c=1.0):
    """Bounded-real LMI for dx = a x + b w, z = c x; optimum gamma^2 = (b c / a)^2."""
    # variables: 0 -> gamma^2, 1 -> p
    he = LmiBlock(
        np.array([[0.0, 0.0, c], [0.0, 0.0, 0.0], [c, 0.0, -1.0]]),
        [(0, np.diag([0.0, -1.0, 0.0])), (1, np.array([[2 * a, b, 0.0], [b, 0.0, 0.0], [0.0, 0.0, 0.0]]))],
        Sense.NSD, strict=True, name="he",
    )
    pos = LmiBlock([[0.0]], [(1, [[1.0]])], Sense.PSD, strict=True, name="p")
    return SdpProblem(2, [1.0, 0.0], [he, pos], ["gamma2", "p"])


@pytest.mark.parametrize("backend", ["clarabel", "cvxopt"])
def test_scalar(backend):
    sol = sdp.solve(scalar_problem(), Tolerances(backend=backend))
    assert sol.ok
    assert sol.values[0] == pytest.approx(1.0, abs=1e-7)


@pytest.mark.parametrize("backend", ["clarabel", "cvxopt"])
def test_infeasible_pair(backend):
    p = SdpProblem(1, [0.0], [LmiBlock([[-1.0]], [(0, [[1.0]])]), LmiBlock([[0.0]], [(0, [[-1.0]])])])
    sol = sdp.solve(p, Tolerances(backend=backend))
    assert sol.status is SolveStatus.INFEASIBLE
    assert not sol.ok
    assert np.isinf(sol.objective_value)


@pytest.mark.parametrize("backend", ["clarabel", "cvxopt"])
@pytest.mark.parametrize("a,b,c", [(-1.0, 1.0, 1.0), (-2.0, 3.0, 0.5), (-0.5, 1.0, 2.0)])
def test_brl_toy(backend, a, b, c):
    sol = sdp.solve(brl_problem(a, b, c), Tolerances(backend=backend))
    assert sol.ok
    assert sol.values[0] == pytest.approx((b * c / a) ** 2, rel=1e-4)
    ok, worst = sdp.check_point(brl_problem(a, b, c), sol.values)
    assert ok


def test_strict_margin_survives_round_trip():
    p = brl_problem()
    sol = sdp.solve(p)
    for blk in p.blocks:
        # blocks hold with a margin, not merely within solver tolerance
        assert blk.slack(sol.values) >= 0.5 * blk.strict_margin()


def test_check_point_examples():
    p = scalar_problem()
    assert sdp.check_point(p, [1.5]) == (True, pytest.approx(0.5))
    ok, worst = sdp.check_point(p, [0.9])
    assert not ok and worst == pytest.approx(-0.1)
    assert sdp.check_point(p, [1.0 - 1e-10])[0]
    with pytest.raises(sdp.SdpError):
        sdp.check_point(p, [1.0, 2.0])


def test_block_validation():
    with pytest.raises(sdp.SdpError):
        LmiBlock([[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(sdp.SdpError):
        LmiBlock(np.eye(2), [(0, np.eye(3))])
    with pytest.raises(sdp.SdpError):
        SdpProblem(1, [1.0], [LmiBlock([[0.0]], [(3, [[1.0]])])])
    with pytest.raises(sdp.SdpError):
        SdpProblem(2, [1.0], [LmiBlock([[0.0]])])
    with pytest.raises(sdp.SdpError):
        sdp.solve(scalar_problem(), Tolerances(backend="nope"))


def test_strict_margin_default_and_override():
    b = LmiBlock(np.eye(2) * 3, [(0, np.eye(2) * 5)], strict=True)
    assert b.strict_margin(1e-7) == pytest.approx(6e-7)
    assert LmiBlock(np.eye(2), strict=True, margin=0.25).strict_margin() == 0.25
    assert LmiBlock(np.eye(2)).strict_margin() == 0.0


def test_transpose_invariance():
    p = brl_problem(-2.0, 3.0, 0.5)
    q = SdpProblem(p.n_vars, p.objective, [b.transposed() for b in p.blocks])
    assert sdp.solve(q).objective_value == pytest.approx(sdp.solve(p).objective_value, rel=1e-8)


@settings(max_examples=10, deadline=None)
@given(scale=st.floats(0.1, 100.0))
def test_objective_scaling(scale):
    p = brl_problem(-2.0, 3.0, 0.5)
    base = sdp.solve(p)
    scaled = sdp.solve(SdpProblem(p.n_vars, scale * p.objective, p.blocks))
    assert scaled.ok
    assert scaled.objective_value == pytest.approx(scale * base.objective_value, rel=1e-6)
    assert scaled.values[0] == pytest.approx(base.values[0], rel=1e-6)


def test_json_round_trip():
    p = brl_problem(-2.0, 3.0, 0.5)
    p.blocks[1].margin = 1e-6
    text = sdp.dumps(p)
    q = sdp.loads(text)
    assert sdp.dumps(q) == text
    assert q.var_names == ["gamma2", "p"]
    assert q.blocks[1].margin == 1e-6
    assert sdp.solve(q).objective_value == pytest.approx(sdp.solve(p).objective_value, rel=1e-10)


def test_round_trip_dim_mismatch():
    d = sdp.problem_to_dict(scalar_problem())
    d["blocks"][0]["dim"] = 2
    with pytest.raises(sdp.SdpError):
        sdp.problem_from_dict(d)


def test_restrict():
    p = brl_problem()
    sol = sdp.solve(p)
    # fix p at its optimum, keep gamma^2 as variable 0
    blocks = sdp.restrict(p.blocks, {1: float(sol.values[1])}, {0: 0})
    assert all(idx == 0 for b in blocks for idx, _ in b.coeffs)
    for orig, new in zip(p.blocks, blocks):
        assert new.strict_margin() == pytest.approx(orig.strict_margin())
    r = sdp.solve(SdpProblem(1, [1.0], blocks))
    assert r.ok
    assert r.values[0] == pytest.approx(sol.values[0], rel=1e-5)


def test_backends_agree_on_random_lmis():
    rng = np.random.default_rng(3)
    for _ in range(5):
        d, n = 4, 3
        mats = [rng.normal(size=(d, d)) for _ in range(n)]
        mats = [m + m.T for m in mats]
        # F(x) = I + sum x_j F_j >= 0, min c.x with c inside the dual cone -> bounded
        c = np.array([np.trace(m) for m in mats]) + 0.1 * rng.normal(size=n)
        p = SdpProblem(n, c, [LmiBlock(np.eye(d), list(enumerate(mats)))])
        a = sdp.solve(p, Tolerances(backend="clarabel"))
        b = sdp.solve(p, Tolerances(backend="cvxopt"))
        assert a.status == b.status
        if a.ok:
            assert a.objective_value == pytest.approx(b.objective_value, rel=1e-5, abs=1e-6)
