"""State-space data for saturated loops, and the RC-network benchmark.

Plant::

    xp' = Ap xp + Bpu sigma + Bpw w
    y   = Cpy xp + Dpyu sigma + Dpyw w
    z   = Cpz xp + Dpzu sigma + Dpzw w

Controller, with anti-windup ports ``v = [v1; v2]``::

    xc' = Ac xc + Bcy y + Bcw w + v1
    u   = Cc xc + Dcy y + Dcw w + v2

The saturated interconnection uses ``sigma = sat(u)`` and ``v = D_aw dz(u)``
with ``dz(u) = u - sat(u)``. :func:`assemble_closed_loop` writes both in the
compact form driven by ``dz(u)``, ``v`` and ``w`` over ``x = [xp; xc]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from importlib import resources

import numpy as np
from scipy import signal


def _mat(a, rows=None, cols=None) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected a {rows}x{cols} matrix, got {m.shape}")
    return m


def _to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


@dataclass
class Plant:
    A_p: np.ndarray
    B_pu: np.ndarray
    B_pw: np.ndarray
    C_py: np.ndarray
    D_pyu: np.ndarray
    D_pyw: np.ndarray
    C_pz: np.ndarray
    D_pzu: np.ndarray
    D_pzw: np.ndarray

    def __post_init__(self):
        self.A_p = _mat(self.A_p)
        n = self.A_p.shape[0]
        if self.A_p.shape != (n, n):
            raise ValueError(f"A_p must be square, got {self.A_p.shape}")
        self.B_pu = _mat(self.B_pu, n)
        self.B_pw = _mat(self.B_pw, n)
        nu, nw = self.B_pu.shape[1], self.B_pw.shape[1]
        self.C_py = _mat(self.C_py, None, n)
        ny = self.C_py.shape[0]
        self.D_pyu = _mat(self.D_pyu, ny, nu)
        self.D_pyw = _mat(self.D_pyw, ny, nw)
        self.C_pz = _mat(self.C_pz, None, n)
        nz = self.C_pz.shape[0]
        self.D_pzu = _mat(self.D_pzu, nz, nu)
        self.D_pzw = _mat(self.D_pzw, nz, nw)

    n_p = property(lambda self: self.A_p.shape[0])
    n_u = property(lambda self: self.B_pu.shape[1])
    n_w = property(lambda self: self.B_pw.shape[1])
    n_y = property(lambda self: self.C_py.shape[0])
    n_z = property(lambda self: self.C_pz.shape[0])

    def to_dict(self) -> dict:
        d = _to_dict(self)
        d["dims"] = {"n_p": self.n_p, "n_u": self.n_u, "n_w": self.n_w, "n_y": self.n_y, "n_z": self.n_z}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Plant":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


@dataclass
class Controller:
    A_c: np.ndarray
    B_cy: np.ndarray
    B_cw: np.ndarray
    C_c: np.ndarray
    D_cy: np.ndarray
    D_cw: np.ndarray

    def __post_init__(self):
        self.A_c = _mat(self.A_c)
        n = self.A_c.shape[0]
        if self.A_c.shape != (n, n):
            raise ValueError(f"A_c must be square, got {self.A_c.shape}")
        self.B_cy = _mat(self.B_cy, n)
        self.B_cw = _mat(self.B_cw, n)
        self.C_c = _mat(self.C_c, None, n)
        nu = self.C_c.shape[0]
        self.D_cy = _mat(self.D_cy, nu, self.B_cy.shape[1])
        self.D_cw = _mat(self.D_cw, nu, self.B_cw.shape[1])

    n_c = property(lambda self: self.A_c.shape[0])
    n_u = property(lambda self: self.C_c.shape[0])

    def to_dict(self) -> dict:
        d = _to_dict(self)
        d["dims"] = {"n_c": self.n_c, "n_u": self.n_u, "n_y": self.B_cy.shape[1], "n_w": self.B_cw.shape[1]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Controller":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


@dataclass
class ClosedLoop:
    """Compact form over ``x = [xp; xc]``, inputs ``q = dz(u)``, ``v``, ``w``.

    ``D_cluq`` is always zero because plants with ``D_pyu != 0`` are rejected.
    """

    A_cl: np.ndarray
    B_clq: np.ndarray
    B_clv: np.ndarray
    B_clw: np.ndarray
    C_clz: np.ndarray
    D_clzq: np.ndarray
    D_clzv: np.ndarray
    D_clzw: np.ndarray
    C_clu: np.ndarray
    D_cluq: np.ndarray
    D_cluv: np.ndarray
    D_cluw: np.ndarray
    u_bar: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            if f.name != "u_bar":
                setattr(self, f.name, _mat(getattr(self, f.name)))
        self.u_bar = np.asarray(self.u_bar, dtype=float).ravel()
        n = self.A_cl.shape[0]
        if self.A_cl.shape != (n, n):
            raise ValueError("A_cl must be square")
        nu = self.B_clq.shape[1]
        if self.u_bar.shape == (1,) and nu > 1:
            self.u_bar = np.full(nu, self.u_bar[0])
        if self.u_bar.shape != (nu,) or np.any(self.u_bar <= 0):
            raise ValueError(f"u_bar must hold {nu} strictly positive limits, got {self.u_bar}")
        checks = {
            "B_clq": (n, nu), "B_clw": (n, self.n_w), "C_clu": (nu, n), "D_cluq": (nu, nu),
            "D_cluv": (nu, self.n_v), "D_cluw": (nu, self.n_w), "C_clz": (self.n_z, n),
            "D_clzq": (self.n_z, nu), "D_clzv": (self.n_z, self.n_v), "D_clzw": (self.n_z, self.n_w),
            "B_clv": (n, self.n_v),
        }
        for name, shape in checks.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    n = property(lambda self: self.A_cl.shape[0])
    n_u = property(lambda self: self.B_clq.shape[1])
    n_v = property(lambda self: self.B_clv.shape[1])
    n_w = property(lambda self: self.B_clw.shape[1])
    n_z = property(lambda self: self.C_clz.shape[0])

    def to_dict(self) -> dict:
        d = _to_dict(self)
        d["dims"] = {"n": self.n, "n_u": self.n_u, "n_v": self.n_v, "n_w": self.n_w, "n_z": self.n_z}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClosedLoop":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def assemble_closed_loop(plant: Plant, controller: Controller, u_bar=1.0) -> ClosedLoop:
    """Lump plant, controller and the deadzone/anti-windup ports into one model."""
    if plant.n_u != controller.n_u:
        raise ValueError(f"plant has {plant.n_u} inputs but controller drives {controller.n_u}")
    if controller.B_cy.shape[1] != plant.n_y:
        raise ValueError(f"controller reads {controller.B_cy.shape[1]} measurements, plant has {plant.n_y}")
    if controller.B_cw.shape[1] != plant.n_w:
        raise ValueError(f"controller reads {controller.B_cw.shape[1]} exogenous inputs, plant has {plant.n_w}")
    if np.any(plant.D_pyu != 0):
        raise ValueError(
            "plant has direct feedthrough D_pyu != 0; the u-equation would contain an "
            "algebraic loop through sat(u), which this assembly does not resolve"
        )
    P, C = plant, controller
    nc, nu = C.n_c, P.n_u
    Dw = C.D_cy @ P.D_pyw + C.D_cw
    A = np.block([[P.A_p + P.B_pu @ C.D_cy @ P.C_py, P.B_pu @ C.C_c],
                  [C.B_cy @ P.C_py, C.A_c]])
    B_q = np.vstack([-P.B_pu, np.zeros((nc, nu))])
    B_v = np.block([[np.zeros((P.n_p, nc)), P.B_pu],
                    [np.eye(nc), np.zeros((nc, nu))]])
    B_w = np.vstack([P.B_pu @ Dw + P.B_pw, C.B_cy @ P.D_pyw + C.B_cw])
    C_u = np.hstack([C.D_cy @ P.C_py, C.C_c])
    D_uv = np.hstack([np.zeros((nu, nc)), np.eye(nu)])
    C_z = np.hstack([P.C_pz + P.D_pzu @ C.D_cy @ P.C_py, P.D_pzu @ C.C_c])
    D_zv = np.hstack([np.zeros((P.n_z, nc)), P.D_pzu])
    D_zw = P.D_pzu @ Dw + P.D_pzw
    u_bar = np.broadcast_to(np.asarray(u_bar, dtype=float), (nu,)).copy()
    return ClosedLoop(A, B_q, B_v, B_w, C_z, -P.D_pzu, D_zv, D_zw, C_u, np.zeros((nu, nu)), D_uv, Dw, u_bar)


def unconstrained_matrices(cl: ClosedLoop) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """State-space (A, B, C, D) from w to z with sigma = u and v = 0."""
    return cl.A_cl, cl.B_clw, cl.C_clz, cl.D_clzw


# --------------------------------------------------------------------------
# RC-network benchmark


@dataclass(frozen=True)
class CircuitParams:
    """Component values in ohms and farads."""

    R1: float = 313.0
    R2: float = 20.0
    R3: float = 315.0
    R4: float = 17.0
    R5: float = 10.0
    C1: float = 0.01
    C2: float = 0.01
    C3: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be strictly positive, got {getattr(self, f.name)!r}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def from_array(cls, values) -> "CircuitParams":
        return cls(*map(float, values))


@dataclass(frozen=True)
class CircuitUncertainty:
    means: CircuitParams = CircuitParams()
    relative_std: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.relative_std < 0.5:
            raise ValueError(f"relative_std must lie in (0, 0.5), got {self.relative_std!r}")


def _cascade_matrices(p: CircuitParams):
    # Sections are unloaded (each feeds the next through a buffer). Series RC
    # shunt stage: i = (v_in - v_C)/(R_s + R_sh), v_out = v_C + R_sh i.
    a1 = 1.0 / ((p.R1 + p.R2) * p.C1)
    a2 = 1.0 / ((p.R3 + p.R4) * p.C2)
    a3 = 1.0 / (p.R5 * p.C3)
    r1 = p.R2 / (p.R1 + p.R2)  # v_out1 = (1 - r1) vC1 + r1 Vi
    r2 = p.R4 / (p.R3 + p.R4)
    A = np.array([
        [-a1, 0.0, 0.0],
        [a2 * (1 - r1), -a2, 0.0],
        [a3 * r2 * (1 - r1), a3 * (1 - r2), -a3],
    ])
    B = np.array([[a1], [a2 * r1], [a3 * r2 * r1]])
    return A, B


def _nodal_matrices(p: CircuitParams):
    # Loaded ladder: node voltages v1, v2 are algebraic, states vC1, vC2, v3.
    g1, g2, g3, g4, g5 = (1.0 / r for r in (p.R1, p.R2, p.R3, p.R4, p.R5))
    G = np.array([[g1 + g2 + g3, -g3], [-g3, g3 + g4 + g5]])
    if abs(np.linalg.det(G)) < 1e-300:
        raise ValueError("singular node-conductance matrix")
    M = np.linalg.solve(G, np.array([[g2, 0.0, 0.0], [0.0, g4, g5]]))
    Mu = np.linalg.solve(G, np.array([[g1], [0.0]]))
    A = np.vstack([
        (M[0] - [1, 0, 0]) * g2 / p.C1,
        (M[1] - [0, 1, 0]) * g4 / p.C2,
        (M[1] - [0, 0, 1]) * g5 / p.C3,
    ])
    B = np.vstack([Mu[0] * g2 / p.C1, Mu[1] * g4 / p.C2, Mu[1] * g5 / p.C3])
    return A, B


def circuit_gain(params: CircuitParams, model: str = "cascade") -> float:
    """Amplifier gain ``k`` making the V_i -> V_o numerator monic."""
    A, B = _circuit_ab(params, model)
    num, _ = signal.ss2tf(A, B, np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 1)))
    lead = num[0][np.flatnonzero(np.abs(num[0]) > 1e-14 * np.max(np.abs(num[0])))[0]]
    return 1.0 / lead


def _circuit_ab(params: CircuitParams, model: str):
    if model == "cascade":
        return _cascade_matrices(params)
    if model == "nodal":
        return _nodal_matrices(params)
    raise ValueError(f"unknown circuit model {model!r}; expected 'cascade' or 'nodal'")


def circuit_to_plant(params: CircuitParams, k: float | None = None, model: str = "cascade") -> Plant:
    """Three-state plant with capacitor voltages as states.

    ``y = k v_C3`` is the measured output voltage and ``z = w - y`` the tracking
    error, with ``w`` the output reference. ``k=None`` recomputes the monic
    gain for these parameters; pass a number to freeze it.
    """
    A, B = _circuit_ab(params, model)
    gain = circuit_gain(params, model) if k is None else float(k)
    C = np.array([[0.0, 0.0, gain]])
    return Plant(A, B, np.zeros((3, 1)), C, np.zeros((1, 1)), np.zeros((1, 1)),
                 -C, np.zeros((1, 1)), np.ones((1, 1)))


def sample_circuit(unc: CircuitUncertainty, N: int, rng: np.random.Generator | None = None) -> list[CircuitParams]:
    """``N`` iid Gaussian draws around ``unc.means``; nonpositive values are redrawn."""
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    rng = np.random.default_rng(unc.seed) if rng is None else rng
    mean = unc.means.as_array()
    std = unc.relative_std * mean
    out = rng.normal(mean, std, size=(int(N), mean.size))
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(np.broadcast_to(mean, out.shape)[bad], np.broadcast_to(std, out.shape)[bad])
        bad = out <= 0
    return [CircuitParams.from_array(row) for row in out]


def transfer_coefficients(plant: Plant, out: int = 0, inp: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Numerator (leading zeros stripped) and monic denominator of sigma -> y."""
    num, den = signal.ss2tf(plant.A_p, plant.B_pu, plant.C_py, plant.D_pyu, input=inp)
    num = np.trim_zeros(np.where(np.abs(num[out]) < 1e-12 * np.max(np.abs(num[out])), 0.0, num[out]), "f")
    return num / den[0], den / den[0]


# Published controller table, rows [A_c | B_cy | B_cw ; C_c | D_cy | D_cw].
PRINTED_CONTROLLER_TABLE = np.array([
    [-80.0, 0.0, 1.0, -1.0],
    [1.0, 0.0, 0.0, 0.0],
    [20.25, 1600.0, 80.0, -80.0],
])
# published gains (nominal and randomized designs, both at s = 0.003), as printed
PUBLISHED_DAW_NOMINAL = np.array([[-0.0855], [0.0011], [0.9887]])
PUBLISHED_DAW_ROBUST = np.array([[-2.1493], [0.0266], [0.6407]])


def published_daw(which: str = "nominal") -> np.ndarray:
    """Published anti-windup gain mapped to this package's sign convention.

    The printed vectors are read as acting on ``sat(u) - u``, so in the
    ``dz(u) = u - sat(u)`` convention used here they change sign. As printed, the nominal gain puts
    the ``dz`` feedthrough at 0.9887, next to the well-posedness limit 1,
    and the analysis LMIs become numerically unreliable there.
    """
    table = {"nominal": PUBLISHED_DAW_NOMINAL, "robust": PUBLISHED_DAW_ROBUST}
    try:
        return -table[which].copy()
    except KeyError:
        raise ValueError(f"unknown design {which!r}; expected 'nominal' or 'robust'") from None


def printed_controller() -> Controller:
    """The controller table read literally; it closes a positive-feedback loop."""
    t = PRINTED_CONTROLLER_TABLE
    return Controller(t[:2, :2], t[:2, 2:3], t[:2, 3:4], t[2:, :2], t[2:, 2:3], t[2:, 3:4])


def _load_benchmark_file() -> dict:
    text = resources.files("swcaw").joinpath("data/benchmark.json").read_text()
    return json.loads(text)


def benchmark_nominal() -> tuple[Plant, Controller]:
    """Nominal companion-form plant and PID controller of the RC benchmark.

    The controller's ``y`` and ``w`` columns are exchanged with respect to the
    printed table (``B_cy, D_cy`` <-> ``B_cw, D_cw``), so that the PID acts on
    ``w - y``; read literally, the table gives an unstable loop.
    """
    d = _load_benchmark_file()
    return Plant.from_dict(d["plant"]), Controller.from_dict(d["controller"])


def benchmark_u_bar() -> np.ndarray:
    return np.asarray(_load_benchmark_file()["u_bar"], dtype=float)


def benchmark_closed_loop() -> ClosedLoop:
    plant, ctrl = benchmark_nominal()
    return assemble_closed_loop(plant, ctrl, benchmark_u_bar())


class CircuitLoopSampler:
    """Random closed loops of the benchmark controller with perturbed RC values.

    Callable as ``sampler(rng, N) -> list[ClosedLoop]``.
    """

    def __init__(self, unc: CircuitUncertainty | None = None, controller: Controller | None = None,
                 u_bar=None, freeze_k: bool = False, model: str = "cascade"):
        self.unc = unc or CircuitUncertainty()
        self.controller = controller or benchmark_nominal()[1]
        self.u_bar = benchmark_u_bar() if u_bar is None else u_bar
        self.model = model
        self.k = circuit_gain(self.unc.means, model) if freeze_k else None

    def loop(self, params: CircuitParams) -> ClosedLoop:
        plant = circuit_to_plant(params, self.k, self.model)
        return assemble_closed_loop(plant, self.controller, self.u_bar)

    def __call__(self, rng: np.random.Generator, N: int) -> list[ClosedLoop]:
        return [self.loop(p) for p in sample_circuit(self.unc, N, rng)]


class FixedLoopSampler:
    """Point-mass uncertainty: every draw is the same closed loop."""

    def __init__(self, cl: ClosedLoop):
        self.cl = cl

    def __call__(self, rng: np.random.Generator, N: int) -> list[ClosedLoop]:
        return [self.cl] * int(N)


def with_u_bar(cl: ClosedLoop, u_bar) -> ClosedLoop:
    return replace(cl, u_bar=np.broadcast_to(np.asarray(u_bar, dtype=float), (cl.n_u,)).copy())
