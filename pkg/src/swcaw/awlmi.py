"""Regional L2-gain LMIs for saturated loops with static anti-windup.

Analysis (fixed ``D_aw``) variables: ``gamma^2, Q, Y, U``. Synthesis replaces
the product ``D_aw U`` by a free matrix ``X`` and recovers
``D_aw = X U^{-1}``. Both programs share the blocks

* ``Q > 0`` and ``U > 0`` (``U`` diagonal),
* ``He[...] < 0``, the 4x4 block-row performance inequality,
* ``[[Q, Y_k^T], [Y_k, u_k^2/s^2]] >= 0`` for every input channel ``k``.

The uncertain versions hand these blocks to :mod:`swcaw.scenario`, with
``gamma^2`` (analysis) or ``gamma^2, U, X`` (synthesis) as design variables
and the rest as per-sample certificates.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import probbounds as pb
from .awsys import ClosedLoop
from .scenario import ConstraintFamily, SwcResult, estimate_violation, one_shot_swc, sequential_swc, solve_scenario
from .sdp import MARGIN_REL, LmiBlock, Sense, SdpProblem, Tolerances, solve


@dataclass(frozen=True)
class AnalysisSpec:
    s: float
    u_bar: np.ndarray | float = 1.0
    levels: pb.ProbLevels | None = None

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s!r}")
        if np.any(np.asarray(self.u_bar) <= 0):
            raise ValueError("u_bar must be strictly positive")


@dataclass
class AnalysisResult:
    feasible: bool
    gamma_hat: float
    s: float
    Q: np.ndarray | None = None
    Y: np.ndarray | None = None
    U: np.ndarray | None = None
    status: str = ""

    def ellipsoid(self) -> np.ndarray | None:
        """Shape matrix ``P`` of the guaranteed attraction region ``{x : x^T P x <= 1}``."""
        if self.Q is None:
            return None
        return np.linalg.inv(self.s ** 2 * self.Q)


@dataclass
class AwDesign:
    D_aw: np.ndarray
    gamma_hat: float
    s: float
    feasible: bool = True
    certificates: dict = field(default_factory=dict)
    status: str = ""


# --------------------------------------------------------------------------
# variable layout


def _sym_basis(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


@dataclass(frozen=True)
class Layout:
    """Decision-vector layout; symmetric ``Q`` is stored by its upper triangle."""

    n: int
    n_u: int
    n_v: int
    synthesis: bool

    @property
    def n_q(self) -> int:
        return self.n * (self.n + 1) // 2

    def _sizes(self) -> list[tuple[str, int]]:
        if self.synthesis:
            return [("gamma2", 1), ("U", self.n_u), ("X", self.n_v * self.n_u),
                    ("Q", self.n_q), ("Y", self.n_u * self.n)]
        return [("gamma2", 1), ("Q", self.n_q), ("Y", self.n_u * self.n), ("U", self.n_u)]

    def slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, size in self._sizes():
            out[name] = slice(pos, pos + size)
            pos += size
        return out

    @property
    def n_vars(self) -> int:
        return sum(size for _, size in self._sizes())

    @property
    def n_theta(self) -> int:
        """Design variables: gamma^2 for analysis; gamma^2, diag U, X for synthesis."""
        return 1 + self.n_u + self.n_v * self.n_u if self.synthesis else 1

    @property
    def n_theta_full(self) -> int:
        """Count with every variable and a full (unsymmetrized) ``Q``."""
        extra = self.n_v * self.n_u if self.synthesis else 0
        return 1 + self.n * self.n + self.n_u * self.n + self.n_u + extra

    def names(self) -> list[str]:
        out = []
        for name, _ in self._sizes():
            if name == "gamma2":
                out.append("gamma2")
            elif name == "Q":
                out += [f"Q[{i},{j}]" for i, j in _sym_basis(self.n)]
            elif name == "Y":
                out += [f"Y[{k},{j}]" for k in range(self.n_u) for j in range(self.n)]
            elif name == "U":
                out += [f"U[{k}]" for k in range(self.n_u)]
            else:
                out += [f"X[{a},{k}]" for a in range(self.n_v) for k in range(self.n_u)]
        return out

    def unpack(self, x: np.ndarray) -> dict[str, np.ndarray]:
        sl = self.slices()
        Q = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n)
        Q[iu] = x[sl["Q"]]
        Q = Q + np.triu(Q, 1).T
        out = {
            "gamma2": float(x[sl["gamma2"]][0]),
            "Q": Q,
            "Y": x[sl["Y"]].reshape(self.n_u, self.n),
            "U": np.diag(x[sl["U"]]),
        }
        if self.synthesis:
            out["X"] = x[sl["X"]].reshape(self.n_v, self.n_u)
        return out


def layout_for(cl: ClosedLoop, synthesis: bool) -> Layout:
    return Layout(cl.n, cl.n_u, cl.n_v, synthesis)


# --------------------------------------------------------------------------
# block construction


def _he_matrix(cl: ClosedLoop, g2, Q, Y, U, XU, c: float) -> np.ndarray:
    """``He`` of the performance matrix; ``XU`` is ``D_aw U`` or the free ``X``.

    ``c`` scales the variable-free entries (1 for the full matrix, 0 for the
    linear part).
    """
    n, nu, nw, nz = cl.n, cl.n_u, cl.n_w, cl.n_z
    r1 = [cl.A_cl @ Q, cl.B_clq @ U + cl.B_clv @ XU + Y.T, c * cl.B_clw, np.zeros((n, nz))]
    r2 = [cl.C_clu @ Q, cl.D_cluq @ U + cl.D_cluv @ XU - U, c * cl.D_cluw, np.zeros((nu, nz))]
    r3 = [np.zeros((nw, n)), np.zeros((nw, nu)), -c * np.eye(nw) / 2, np.zeros((nw, nz))]
    r4 = [cl.C_clz @ Q, cl.D_clzq @ U + cl.D_clzv @ XU, c * cl.D_clzw, -g2 * np.eye(nz) / 2]
    M = np.block([r1, r2, r3, r4])
    return M + M.T


def _block_values(cl: ClosedLoop, layout: Layout, x: np.ndarray, s: float, D_aw, c: float) -> list[np.ndarray]:
    v = layout.unpack(x)
    XU = v["X"] if layout.synthesis else D_aw @ v["U"]
    mats = [v["Q"], v["U"], _he_matrix(cl, v["gamma2"], v["Q"], v["Y"], v["U"], XU, c)]
    for k in range(cl.n_u):
        # congruence with diag(I, s/u_k): corner u_k^2/s^2 becomes 1, which
        # keeps the block well scaled for small s
        yk = v["Y"][k:k + 1, :] * (s / cl.u_bar[k])
        mats.append(np.block([[v["Q"], yk.T], [yk, np.array([[c]])]]))
    return mats


_BLOCK_META = [("Q>0", Sense.PSD, True), ("U>0", Sense.PSD, True), ("He<0", Sense.NSD, True)]


def _build_blocks(cl: ClosedLoop, layout: Layout, s: float, D_aw, margin_rel: float) -> list[LmiBlock]:
    if not s > 0:
        raise ValueError(f"s must be positive, got {s!r}")
    if not layout.synthesis:
        D_aw = np.asarray(D_aw, dtype=float).reshape(cl.n_v, cl.n_u)
    nv = layout.n_vars
    consts = _block_values(cl, layout, np.zeros(nv), s, D_aw, 1.0)
    coeffs: list[list] = [[] for _ in consts]
    e = np.zeros(nv)
    for j in range(nv):
        e[j] = 1.0
        for b, m in enumerate(_block_values(cl, layout, e, s, D_aw, 0.0)):
            if np.any(m):
                coeffs[b].append((j, m))
        e[j] = 0.0
    # the variable-free part of He holds only w/z data, never D_aw, so analysis
    # at D_aw and synthesis with X = D_aw U impose identical strictness
    margins = [2.0 * margin_rel, 2.0 * margin_rel, margin_rel * (1.0 + np.linalg.norm(consts[2], 2))]
    blocks = []
    for b, const in enumerate(consts):
        if b < 3:
            name, sense, strict = _BLOCK_META[b]
            blocks.append(LmiBlock(const, coeffs[b], sense, strict, margins[b], name))
        else:
            blocks.append(LmiBlock(const, coeffs[b], Sense.PSD, False, None, f"sector[{b - 3}]"))
    return blocks


def build_analysis_blocks(cl: ClosedLoop, D_aw, s: float, margin_rel: float = MARGIN_REL) -> list[LmiBlock]:
    """Blocks over ``(gamma^2, Q, Y, U)`` for a fixed anti-windup gain."""
    return _build_blocks(cl, layout_for(cl, False), s, D_aw, margin_rel)


def build_synthesis_blocks(cl: ClosedLoop, s: float, margin_rel: float = MARGIN_REL) -> list[LmiBlock]:
    """Blocks over ``(gamma^2, U, X, Q, Y)``; ``X`` stands for ``D_aw U``."""
    return _build_blocks(cl, layout_for(cl, True), s, None, margin_rel)


def _objective(layout: Layout) -> np.ndarray:
    c = np.zeros(layout.n_vars)
    c[0] = 1.0
    return c


def _tol(tol: Tolerances | None) -> Tolerances:
    return tol or Tolerances()


def analyze_nominal(cl: ClosedLoop, D_aw, s: float, tol: Tolerances | None = None) -> AnalysisResult:
    """Smallest certified regional L2 gain for inputs with ``||w||_2 <= s``.

    Infeasibility is a normal outcome (no regional certificate at this ``s``)
    and comes back with ``feasible=False`` and ``gamma_hat=inf``.
    """
    tol = _tol(tol)
    layout = layout_for(cl, False)
    prob = SdpProblem(layout.n_vars, _objective(layout), build_analysis_blocks(cl, D_aw, s, tol.margin_rel),
                      layout.names())
    sol = solve(prob, tol)
    if not sol.ok:
        return AnalysisResult(False, math.inf, s, status=sol.status.value)
    v = layout.unpack(sol.values)
    return AnalysisResult(True, math.sqrt(max(v["gamma2"], 0.0)), s, v["Q"], v["Y"], v["U"], sol.status.value)


def _design_from_theta(layout: Layout, theta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    sl = layout.slices()
    g2 = float(theta[0])
    U = theta[sl["U"]].copy()
    X = theta[sl["X"]].reshape(layout.n_v, layout.n_u)
    return g2, U, X, X / U[np.newaxis, :]


def synthesize_nominal(cl: ClosedLoop, s: float, tol: Tolerances | None = None) -> AwDesign:
    """Static anti-windup gain minimizing the certified regional L2 gain."""
    tol = _tol(tol)
    layout = layout_for(cl, True)
    prob = SdpProblem(layout.n_vars, _objective(layout), build_synthesis_blocks(cl, s, tol.margin_rel),
                      layout.names())
    sol = solve(prob, tol)
    if not sol.ok:
        return AwDesign(np.full((cl.n_v, cl.n_u), np.nan), math.inf, s, False, status=sol.status.value)
    g2, U, X, D = _design_from_theta(layout, sol.values)
    v = layout.unpack(sol.values)
    certs = {"Q": v["Q"], "Y": v["Y"], "U": np.diag(U), "X": X}
    return AwDesign(D, math.sqrt(max(g2, 0.0)), s, True, certs, sol.status.value)


# --------------------------------------------------------------------------
# uncertain versions


LoopSampler = Callable[[np.random.Generator, int], list]


def analysis_family(sampler: LoopSampler, D_aw, s: float, nominal: ClosedLoop,
                    margin_rel: float = MARGIN_REL) -> ConstraintFamily:
    """gamma^2 shared; Q, Y, U per sample. ``nominal`` fixes the dimensions."""
    layout = layout_for(nominal, False)
    names = layout.names()
    return ConstraintFamily(
        n_theta=1, n_xi=layout.n_vars - 1,
        generator=lambda cl: build_analysis_blocks(cl, D_aw, s, margin_rel),
        objective=np.ones(1), sampler=sampler, theta_names=names[:1], xi_names=names[1:],
    )


def synthesis_family(sampler: LoopSampler, s: float, nominal: ClosedLoop,
                     margin_rel: float = MARGIN_REL) -> ConstraintFamily:
    """gamma^2, U, X shared; Q, Y per sample."""
    layout = layout_for(nominal, True)
    nt = layout.n_theta
    names = layout.names()
    obj = np.zeros(nt)
    obj[0] = 1.0
    return ConstraintFamily(
        n_theta=nt, n_xi=layout.n_vars - nt,
        generator=lambda cl: build_synthesis_blocks(cl, s, margin_rel),
        objective=obj, sampler=sampler, theta_names=names[:nt], xi_names=names[nt:],
    )


def _run_family(family, spec: AnalysisSpec, seed, mode, seq, tol, n_theta, workers, shared, N):
    if spec.levels is None:
        raise ValueError("probabilistic runs need spec.levels")
    if mode == "oneshot":
        return one_shot_swc(family, spec.levels, seed, tol, n_theta, N=N, shared=shared)
    if mode == "sequential":
        if shared:
            raise ValueError("the common-certificate baseline is one-shot only")
        return sequential_swc(family, spec.levels, seq, seed, tol, n_theta, N=N, workers=workers)
    raise ValueError(f"unknown mode {mode!r}; expected 'oneshot' or 'sequential'")


def swc_analysis(sampler: LoopSampler, D_aw, spec: AnalysisSpec, seed: int, nominal: ClosedLoop,
                 mode: str = "oneshot", seq: pb.SequentialParams | None = None,
                 tol: Tolerances | None = None, n_theta: int | None = None, workers: int = 1,
                 shared: bool = False, N: int | None = None) -> tuple[float, SwcResult]:
    """Probabilistic worst-case regional gain of the uncertain loop at a fixed ``D_aw``."""
    tol = _tol(tol)
    family = analysis_family(sampler, D_aw, spec.s, nominal, tol.margin_rel)
    res = _run_family(family, spec, seed, mode, seq, tol, n_theta, workers, shared, N)
    return math.sqrt(max(res.theta[0], 0.0)), res


def swc_synthesis(sampler: LoopSampler, spec: AnalysisSpec, seed: int, nominal: ClosedLoop,
                  mode: str = "sequential", seq: pb.SequentialParams | None = None,
                  tol: Tolerances | None = None, n_theta: int | None = None, workers: int = 1,
                  shared: bool = False, N: int | None = None) -> tuple[AwDesign, SwcResult]:
    """Anti-windup gain for the uncertain loop with per-sample Lyapunov certificates."""
    tol = _tol(tol)
    family = synthesis_family(sampler, spec.s, nominal, tol.margin_rel)
    res = _run_family(family, spec, seed, mode, seq, tol, n_theta, workers, shared, N)
    layout = layout_for(nominal, True)
    g2, U, X, D = _design_from_theta(layout, res.theta)
    design = AwDesign(D, math.sqrt(max(g2, 0.0)), spec.s, True, {"U": np.diag(U), "X": X}, "Optimal")
    return design, res


def robust_analyze(samples: Sequence[ClosedLoop], D_aw, s: float, tol: Tolerances | None = None,
                   shared: bool = False) -> AnalysisResult:
    """Scenario analysis on an explicit multisample (per-sample or shared certificates)."""
    tol = _tol(tol)
    family = analysis_family(lambda rng, n: [], D_aw, s, samples[0], tol.margin_rel)
    theta, _, _, sol = solve_scenario(family, samples, tol, shared)
    if theta is None:
        return AnalysisResult(False, math.inf, s, status=sol.status.value)
    return AnalysisResult(True, math.sqrt(max(theta[0], 0.0)), s, status=sol.status.value)


def robust_synthesize(samples: Sequence[ClosedLoop], s: float, tol: Tolerances | None = None,
                      shared: bool = False) -> AwDesign:
    """Scenario synthesis on an explicit multisample (per-sample or shared certificates)."""
    tol = _tol(tol)
    nominal = samples[0]
    family = synthesis_family(lambda rng, n: [], s, nominal, tol.margin_rel)
    theta, _, _, sol = solve_scenario(family, samples, tol, shared)
    if theta is None:
        return AwDesign(np.full((nominal.n_v, nominal.n_u), np.nan), math.inf, s, False, status=sol.status.value)
    g2, U, X, D = _design_from_theta(layout_for(nominal, True), theta)
    return AwDesign(D, math.sqrt(max(g2, 0.0)), s, True, {"U": np.diag(U), "X": X}, sol.status.value)


def analysis_violation(sampler: LoopSampler, D_aw, gamma_hat: float, s: float, nominal: ClosedLoop,
                       M: int, seed, tol: Tolerances | None = None, workers: int = 1) -> tuple[float, list[int]]:
    """Fraction of fresh loops admitting no certificate for ``gamma_hat`` at ``s``."""
    tol = _tol(tol)
    family = analysis_family(sampler, D_aw, s, nominal, tol.margin_rel)
    return estimate_violation(family, np.array([gamma_hat ** 2]), M, seed, tol, workers)


# --------------------------------------------------------------------------
# gain curves


@dataclass
class GainCurve:
    s: np.ndarray
    gamma_hat: np.ndarray
    feasible: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.gamma_hat = np.asarray(self.gamma_hat, dtype=float)
        self.feasible = np.asarray(self.feasible, dtype=bool)
        if np.any(np.diff(self.s) <= 0):
            raise ValueError("s values must be strictly increasing")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.s.tolist(), self.gamma_hat.tolist()))

    def interpolate(self, s) -> np.ndarray:
        """Piecewise-linear through feasible points (display only); NaN outside."""
        m = self.feasible
        if not m.any():
            return np.full(np.shape(s), np.nan)
        return np.interp(s, self.s[m], self.gamma_hat[m], left=np.nan, right=np.nan)

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            for line in header.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "gamma_hat", "feasible"])
        for s, g, f in zip(self.s, self.gamma_hat, self.feasible):
            w.writerow([repr(float(s)), repr(float(g)) if f else "inf", int(bool(f))])
        return buf.getvalue()


def read_curve_csv(text: str, label: str = "") -> GainCurve:
    """Inverse of :meth:`GainCurve.to_csv`; ``#`` lines are skipped."""
    rows = list(csv.reader(line for line in text.splitlines() if line and not line.startswith("#")))
    if not rows or rows[0] != ["s", "gamma_hat", "feasible"]:
        raise ValueError("not a gain-curve CSV (expected columns s, gamma_hat, feasible)")
    body = rows[1:]
    return GainCurve([float(r[0]) for r in body], [float(r[1]) for r in body],
                     [r[2] == "1" for r in body], label)


def _check_grid(s_grid) -> np.ndarray:
    grid = np.asarray(s_grid, dtype=float).ravel()
    if grid.size < 1 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("s grid must be positive and strictly increasing")
    return grid


def gain_curve(target, D_aw, s_grid, mode: str = "nominal", tol: Tolerances | None = None,
               workers: int = 1, label: str = "") -> GainCurve:
    """Certified gain at every grid point.

    ``mode="nominal"``: ``target`` is one :class:`ClosedLoop`.
    ``mode="probabilistic"``: ``target`` is a fixed multisample of loops, so
    every grid point is evaluated on the same scenarios.
    """
    grid = _check_grid(s_grid)
    if mode == "nominal":
        def point(s):
            return analyze_nominal(target, D_aw, s, tol)
    elif mode == "probabilistic":
        samples = list(target)

        def point(s):
            return robust_analyze(samples, D_aw, s, tol)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'nominal' or 'probabilistic'")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(point, grid))
    else:
        results = [point(s) for s in grid]
    return GainCurve(grid, [r.gamma_hat for r in results], [r.feasible for r in results], label)
