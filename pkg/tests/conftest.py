import numpy as np
import pytest

from swcaw import awsys, cli

_criteria: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        outcome = "passed" if call.excinfo is None else "failed"
        _criteria.setdefault(marker.args[0], []).append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok = all(o == "passed" for o in _criteria[n])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")


@pytest.fixture(scope="session")
def bench_cl():
    return awsys.benchmark_closed_loop()


@pytest.fixture(scope="session")
def benchmark_runs(tmp_path_factory):
    """Two complete desk-scale benchmark runs with the same seed."""
    cfg = cli.load_config(None)
    dirs = []
    for i in range(2):
        d = tmp_path_factory.mktemp(f"bench{i}")
        cli.cmd_benchmark(cfg, d)
        dirs.append(d)
    return dirs


def random_stable_pair(rng: np.random.Generator, n_u: int = 1):
    """Random plant/controller pair (D_pyu = 0) with a Hurwitz unconstrained loop."""
    while True:
        n_p, n_c = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        Ap = rng.normal(size=(n_p, n_p))
        Ap -= (np.max(np.linalg.eigvals(Ap).real) + rng.uniform(0.2, 1.0)) * np.eye(n_p)
        plant = awsys.Plant(
            A_p=Ap, B_pu=rng.normal(size=(n_p, n_u)), B_pw=rng.normal(size=(n_p, 1)),
            C_py=rng.normal(size=(1, n_p)), D_pyu=np.zeros((1, n_u)), D_pyw=rng.normal(size=(1, 1)) * 0.5,
            C_pz=rng.normal(size=(1, n_p)), D_pzu=rng.normal(size=(1, n_u)), D_pzw=np.zeros((1, 1)),
        )
        Ac = rng.normal(size=(n_c, n_c))
        Ac -= (np.max(np.linalg.eigvals(Ac).real) + 0.5) * np.eye(n_c)
        ctrl = awsys.Controller(
            A_c=Ac, B_cy=rng.normal(size=(n_c, 1)), B_cw=rng.normal(size=(n_c, 1)),
            C_c=rng.normal(size=(n_u, n_c)), D_cy=rng.normal(size=(n_u, 1)) * 0.3, D_cw=rng.normal(size=(n_u, 1)),
        )
        cl = awsys.assemble_closed_loop(plant, ctrl, 1.0)
        if np.max(np.linalg.eigvals(cl.A_cl).real) < -0.05:
            return plant, ctrl, cl


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def first_order_loop(a=-1.0, b=1.0, c=1.0, d=0.0):
    """dx = a x + b w, z = c x + d w with a deadzone port that never acts."""
    z = np.zeros((1, 1))
    return awsys.ClosedLoop(
        A_cl=[[a]], B_clq=z, B_clv=z, B_clw=[[b]], C_clz=[[c]], D_clzq=z, D_clzv=z, D_clzw=[[d]],
        C_clu=z, D_cluq=z, D_cluv=z, D_cluw=z, u_bar=[1.0],
    )
