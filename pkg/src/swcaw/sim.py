"""Fixed-step simulation of saturated loops with static anti-windup.

Inputs are sampled on a uniform grid and interpolated linearly inside a step,
so the RK4 half-step stages see ``(w_k + w_{k+1}) / 2``. The algebraic loop
``u = c + G dz(u)`` with ``G = D_cluq + D_cluv D_aw`` is solved at every stage.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .awsys import ClosedLoop, Controller, Plant

DT = 1e-3
FIXED_POINT_TOL = 1e-12
FIXED_POINT_ITERS = 100
RHO_LEVELS = (0.1, 0.5, 1.0)


class SimulationError(RuntimeError):
    pass


@dataclass
class Signal:
    t0: float
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        s = np.asarray(self.samples, dtype=float)
        self.samples = s[:, np.newaxis] if s.ndim == 1 else s
        if self.samples.ndim != 2:
            raise ValueError("samples must be (n_steps,) or (n_steps, dim)")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.samples))

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return len(self.samples)

    def scaled(self, factor: float) -> "Signal":
        return Signal(self.t0, self.dt, factor * self.samples)

    @classmethod
    def zeros(cls, dim: int, t_end: float, dt: float = DT) -> "Signal":
        return cls(0.0, dt, np.zeros((_n_steps(t_end, dt) + 1, dim)))

    @classmethod
    def step(cls, amplitude, t_end: float, dt: float = DT, t_on: float = 0.0) -> "Signal":
        amp = np.atleast_1d(np.asarray(amplitude, dtype=float))
        t = dt * np.arange(_n_steps(t_end, dt) + 1)
        return cls(0.0, dt, np.where(t[:, None] >= t_on, amp[None, :], 0.0))


@dataclass
class SimResult:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    saturation_active: np.ndarray
    y: np.ndarray | None = None

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            for line in header.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ["t"] + _names("x", self.x.shape[1]) + _names("u", self.u.shape[1]) \
            + _names("sigma", self.sigma.shape[1]) + _names("z", self.z.shape[1])
        w.writerow(cols)
        data = np.hstack([self.t[:, None], self.x, self.u, self.sigma, self.z])
        for row in data:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _names(base: str, n: int) -> list[str]:
    if base == "x" or n > 1:
        return [f"{base}{i + 1}" for i in range(n)]
    return [base]


def _n_steps(t_end: float, dt: float) -> int:
    n = int(round(t_end / dt))
    if n < 1 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end={t_end} must be a positive multiple of dt={dt}")
    return n


def sat(u, u_bar):
    return np.clip(u, -u_bar, u_bar)


def deadzone(u, u_bar):
    return u - np.clip(u, -u_bar, u_bar)


def solve_dz_loop(c: np.ndarray, G: np.ndarray, u_bar: np.ndarray, step: int | None = None) -> np.ndarray:
    """Solve ``u = c + G dz(u)`` row-wise for ``c`` of shape ``(batch, n_u)``.

    For one input the three saturation regions give a closed form, valid when
    ``G < 1``. Several inputs use Newton steps on the piecewise-linear
    residual, falling back to a damped fixed-point iteration.
    """
    n_u = G.shape[0]
    if n_u == 1:
        g = float(G[0, 0])
        if g == 0.0:
            return c.copy()
        if g >= 1.0:
            raise SimulationError(f"ill-posed algebraic loop: dz feedthrough {g} >= 1")
        ub = u_bar[0]
        out = c.copy()
        hit = np.abs(c) > ub
        out[hit] = (c[hit] - g * ub * np.sign(c[hit])) / (1.0 - g)
        return out
    if not np.any(G):
        return c.copy()
    # the residual is piecewise linear: Newton steps land on the exact
    # solution once the saturation pattern is right
    u = c.copy()
    eye = np.eye(n_u)
    for _ in range(2 * n_u + 4):
        r = u - c - deadzone(u, u_bar) @ G.T
        if np.max(np.abs(r)) <= FIXED_POINT_TOL * (1.0 + np.max(np.abs(u))):
            return u
        active = (np.abs(u) > u_bar).astype(float)
        J = eye[None] - G[None] * active[:, None, :]
        try:
            u = u - np.linalg.solve(J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
    u = c.copy()
    beta = 0.5
    for _ in range(FIXED_POINT_ITERS):
        nxt = (1.0 - beta) * u + beta * (c + deadzone(u, u_bar) @ G.T)
        if np.max(np.abs(nxt - u)) <= FIXED_POINT_TOL * (1.0 + np.max(np.abs(nxt))):
            return nxt
        u = nxt
    where = "" if step is None else f" at step {step}"
    raise SimulationError(f"algebraic loop did not converge{where}")


# --------------------------------------------------------------------------
# compact closed-loop simulation


class _Compact:
    def __init__(self, cl: ClosedLoop, D_aw):
        D = np.zeros((cl.n_v, cl.n_u)) if D_aw is None else np.asarray(D_aw, dtype=float).reshape(cl.n_v, cl.n_u)
        self.cl = cl
        self.Bq = cl.B_clq + cl.B_clv @ D
        self.G = cl.D_cluq + cl.D_cluv @ D
        self.Dzq = cl.D_clzq + cl.D_clzv @ D
        self.u_bar = cl.u_bar

    def control(self, x, w, step=None):
        c = x @ self.cl.C_clu.T + w @ self.cl.D_cluw.T
        return solve_dz_loop(c, self.G, self.u_bar, step)

    def rhs(self, x, w, step=None):
        u = self.control(x, w, step)
        q = deadzone(u, self.u_bar)
        return x @ self.cl.A_cl.T + q @ self.Bq.T + w @ self.cl.B_clw.T

    def outputs(self, x, w):
        u = self.control(x, w)
        q = deadzone(u, self.u_bar)
        z = x @ self.cl.C_clz.T + q @ self.Dzq.T + w @ self.cl.D_clzw.T
        return u, z


def _rk4(rhs, x0: np.ndarray, W: np.ndarray, dt: float) -> np.ndarray:
    """States on the grid for inputs ``W`` of shape ``(batch, n_steps + 1, n_w)``."""
    n_steps = W.shape[1] - 1
    X = np.empty((W.shape[0], n_steps + 1, x0.shape[1]))
    X[:, 0] = x = x0
    for k in range(n_steps):
        w0, w1 = W[:, k], W[:, k + 1]
        wm = 0.5 * (w0 + w1)
        k1 = rhs(x, w0, k)
        k2 = rhs(x + 0.5 * dt * k1, wm, k)
        k3 = rhs(x + 0.5 * dt * k2, wm, k)
        k4 = rhs(x + dt * k3, w1, k)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X[:, k + 1] = x
    return X


def _grid_inputs(w: Signal, n_w: int, t_end: float | None) -> np.ndarray:
    if w.dim != n_w:
        raise ValueError(f"input has dimension {w.dim}, loop expects {n_w}")
    n = len(w) - 1 if t_end is None else _n_steps(t_end, w.dt)
    W = np.zeros((n + 1, n_w))
    m = min(n + 1, len(w))
    W[:m] = w.samples[:m]  # zero beyond the provided samples (finite energy)
    return W


def simulate_batch(cl: ClosedLoop, D_aw, W: np.ndarray, dt: float = DT, x0=None):
    """Vectorized simulation; returns ``(X, U, Z)`` each with leading batch axis."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 3 or W.shape[2] != cl.n_w:
        raise ValueError("W must have shape (batch, n_steps + 1, n_w)")
    m = _Compact(cl, D_aw)
    x0 = np.zeros((W.shape[0], cl.n)) if x0 is None else np.broadcast_to(
        np.asarray(x0, dtype=float), (W.shape[0], cl.n)).copy()
    X = _rk4(m.rhs, x0, W, dt)
    b, n1 = X.shape[:2]
    U, Z = m.outputs(X.reshape(b * n1, -1), W.reshape(b * n1, -1))
    return X, U.reshape(b, n1, -1), Z.reshape(b, n1, -1)


def simulate(cl: ClosedLoop, D_aw, w: Signal, x0=None, t_end: float | None = None) -> SimResult:
    """Trajectory of the saturated loop from ``x0`` (zero by default) under ``w``."""
    W = _grid_inputs(w, cl.n_w, t_end)
    X, U, Z = simulate_batch(cl, D_aw, W[None], w.dt, x0)
    u = U[0]
    sigma = sat(u, cl.u_bar)
    t = w.t0 + w.dt * np.arange(len(W))
    return SimResult(t, X[0], u, sigma, Z[0], np.any(u != sigma, axis=1))


# --------------------------------------------------------------------------
# raw interconnection, kept independent of the compact assembly


def _enumerate_regions(c: np.ndarray, D2: np.ndarray, u_bar: np.ndarray) -> np.ndarray:
    """Solve ``u = c + D2 dz(u)`` by checking all 3^n_u saturation patterns."""
    n_u = len(c)
    slack = 1e-12 * (1.0 + np.max(np.abs(c)))
    for pattern in itertools.product((-1.0, 0.0, 1.0), repeat=n_u):
        sgn = np.array(pattern)
        S = np.diag(np.abs(sgn))
        try:
            u = np.linalg.solve(np.eye(n_u) - D2 @ S, c - D2 @ (S @ (sgn * u_bar)))
        except np.linalg.LinAlgError:
            continue
        ok = np.where(sgn > 0, u >= u_bar - slack, np.where(sgn < 0, u <= -u_bar + slack, np.abs(u) <= u_bar + slack))
        if ok.all():
            return u
    raise SimulationError("no saturation pattern solves the algebraic loop")


def simulate_interconnection(plant: Plant, ctrl: Controller, D_aw, u_bar, w: Signal, x0=None,
                             t_end: float | None = None) -> SimResult:
    """Simulate plant, controller and anti-windup ports directly.

    Serves as the reference for :func:`simulate` on assembled loops. The
    algebraic loop is solved by Newton steps for one input and by trying
    every saturation pattern otherwise.
    """
    if np.any(plant.D_pyu):
        raise ValueError("D_pyu must be zero")
    n_p, n_c = plant.A_p.shape[0], ctrl.A_c.shape[0]
    n_u = plant.B_pu.shape[1]
    u_bar = np.broadcast_to(np.asarray(u_bar, dtype=float), (n_u,))
    D = np.zeros((n_c + n_u, n_u)) if D_aw is None else np.asarray(D_aw, dtype=float).reshape(n_c + n_u, n_u)
    D1, D2 = D[:n_c], D[n_c:]
    W = _grid_inputs(w, plant.B_pw.shape[1], t_end)

    def control(xp, xc, wk):
        y = plant.C_py @ xp + plant.D_pyw @ wk
        c = ctrl.C_c @ xc + ctrl.D_cy @ y + ctrl.D_cw @ wk
        if n_u == 1:
            # the residual is piecewise linear and increasing, so Newton from
            # c terminates after at most a few region changes
            d2, ub, c0 = float(D2[0, 0]), float(u_bar[0]), float(c[0])
            u = c0
            for _ in range(50):
                q = u - ub if u > ub else (u + ub if u < -ub else 0.0)
                r = u - c0 - d2 * q
                if abs(r) <= 4e-16 * (1.0 + abs(c0) + abs(u)):
                    break
                u -= r / (1.0 - d2 * (abs(u) > ub))
            u = np.array([u])
        else:
            u = _enumerate_regions(c, D2, u_bar)
        return u, y

    def f(state, wk):
        xp, xc = state[:n_p], state[n_p:]
        u, y = control(xp, xc, wk)
        q = deadzone(u, u_bar)
        v1 = D1 @ q
        dxp = plant.A_p @ xp + plant.B_pu @ sat(u, u_bar) + plant.B_pw @ wk
        dxc = ctrl.A_c @ xc + ctrl.B_cy @ y + ctrl.B_cw @ wk + v1
        return np.concatenate([dxp, dxc])

    dt = w.dt
    state = np.zeros(n_p + n_c) if x0 is None else np.asarray(x0, dtype=float).copy()
    X = [state]
    for k in range(len(W) - 1):
        w0, w1 = W[k], W[k + 1]
        wm = 0.5 * (w0 + w1)
        k1 = f(state, w0)
        k2 = f(state + 0.5 * dt * k1, wm)
        k3 = f(state + 0.5 * dt * k2, wm)
        k4 = f(state + dt * k3, w1)
        state = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        X.append(state)
    X = np.array(X)
    U, Y, Z = [], [], []
    for xk, wk in zip(X, W):
        u, y = control(xk[:n_p], xk[n_p:], wk)
        z = plant.C_pz @ xk[:n_p] + plant.D_pzu @ sat(u, u_bar) + plant.D_pzw @ wk
        U.append(u)
        Y.append(y)
        Z.append(z)
    U = np.array(U)
    sigma = sat(U, u_bar)
    t = w.t0 + dt * np.arange(len(W))
    return SimResult(t, X, U, sigma, np.array(Z), np.any(U != sigma, axis=1), np.array(Y))


# --------------------------------------------------------------------------
# norms and empirical gain


def l2norm(sig, dt: float | None = None) -> float:
    """Trapezoidal ``(int |z|^2 dt)^{1/2}``; accepts a :class:`Signal` or an
    array (then ``dt`` is required). A leading batch axis is not allowed."""
    if isinstance(sig, Signal):
        samples, dt = sig.samples, sig.dt
    else:
        if dt is None:
            raise ValueError("dt is required for raw arrays")
        samples = np.asarray(sig, dtype=float)
        samples = samples[:, None] if samples.ndim == 1 else samples
    return float(np.sqrt(_trapz_energy(samples[None], dt)[0]))


def _trapz_energy(S: np.ndarray, dt: float) -> np.ndarray:
    e = np.sum(S ** 2, axis=2)
    return dt * (e.sum(axis=1) - 0.5 * (e[:, 0] + e[:, -1]))


def probe_inputs(n_trials: int, n_w: int, s: float, rng: np.random.Generator, t_support: float,
                 t_end: float, dt: float = DT, families=("piecewise", "filtered", "sine"),
                 sine_freqs=None) -> np.ndarray:
    """Random inputs scaled to ``||w||_2 = rho s``, cycling through families and
    ``rho`` in :data:`RHO_LEVELS`. Support is ``[0, t_support]``, zero after."""
    n = _n_steps(t_end, dt)
    t = dt * np.arange(n + 1)
    on = t <= t_support
    W = np.zeros((n_trials, n + 1, n_w))
    for i in range(n_trials):
        fam = families[i % len(families)]
        rho = RHO_LEVELS[(i // len(families)) % len(RHO_LEVELS)]
        if fam == "piecewise":
            n_sw = int(rng.integers(1, 12))
            edges = np.sort(rng.uniform(0.0, t_support, n_sw))
            levels = rng.normal(size=(n_sw + 1, n_w))
            sig = levels[np.searchsorted(edges, t[on])]
        elif fam == "filtered":
            a = float(np.exp(rng.uniform(np.log(0.1), np.log(20.0))))
            noise = rng.normal(size=(int(on.sum()), n_w))
            sig = np.empty_like(noise)
            phi = np.exp(-a * dt)
            acc = np.zeros(n_w)
            for k in range(len(noise)):
                acc = phi * acc + (1.0 - phi) * noise[k] / np.sqrt(dt)
                sig[k] = acc
        elif fam == "sine":
            if sine_freqs is not None:
                om = float(rng.choice(np.asarray(sine_freqs, dtype=float)))
            else:
                om = float(np.exp(rng.uniform(np.log(0.01), np.log(100.0))))
            phase = rng.uniform(0, 2 * np.pi, n_w)
            sig = np.sin(om * t[on][:, None] + phase[None, :])
        else:
            raise ValueError(f"unknown input family {fam!r}")
        W[i, on] = sig
        energy = _trapz_energy(W[i:i + 1], dt)[0]
        if energy > 0:
            W[i] *= rho * s / np.sqrt(energy)
    return W


def gain_check(cl: ClosedLoop, D_aw, gamma_hat: float, s: float, n_trials: int = 100, seed: int = 0,
               t_support: float = 10.0, t_end: float = 60.0, dt: float = DT, families=("piecewise", "filtered", "sine"),
               sine_freqs=None, batch: int = 50) -> float:
    """Largest observed ``||z||_2 / ||w||_2`` over random inputs with ``||w||_2 <= s``.

    For a certified ``(gamma_hat, s)`` the result should not exceed
    ``gamma_hat`` beyond integration error. ``gamma_hat`` is not used in the
    computation; it is accepted so callers can pass a certificate as is.
    """
    del gamma_hat
    rng = np.random.default_rng(seed)
    W = probe_inputs(n_trials, cl.n_w, s, rng, t_support, t_end, dt, families, sine_freqs)
    worst = 0.0
    for start in range(0, n_trials, batch):
        Wb = W[start:start + batch]
        _, _, Z = simulate_batch(cl, D_aw, Wb, dt)
        ratio = np.sqrt(_trapz_energy(Z, dt) / _trapz_energy(Wb, dt))
        worst = max(worst, float(ratio.max()))
    return worst
