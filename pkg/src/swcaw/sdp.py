"""Linear-objective semidefinite programs over affine LMI blocks.

A block is ``F(x) = F0 + sum_j x_j F_j`` with a sense (``PSD`` for
``F(x) >= 0``, ``NSD`` for ``F(x) <= 0``) and a strictness flag. Strict
blocks are solved as ``F(x) >= mu I`` (resp. ``<= -mu I``) with a small
margin ``mu`` so that strictness survives the round trip through
:func:`check_point`.

Two backends solve the same problem data: Clarabel (default) and CVXOPT.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

SYMMETRY_RTOL = 1e-12
MARGIN_REL = 1e-7


class Sense(str, enum.Enum):
    PSD = "PSD"
    NSD = "NSD"


class SolveStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


class SdpError(ValueError):
    """Malformed problem data."""


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-8
    gap: float = 1e-8
    margin_rel: float = MARGIN_REL
    max_iter: int = 200
    backend: str = "clarabel"
    # clarabel's default static KKT regularization (1e-8) caps the attainable
    # objective accuracy on badly scaled LMIs; solves that fail at the smaller
    # value are retried with the stock one
    regularization: float = 1e-10


def _is_symmetric(m: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    return bool(np.max(np.abs(m - m.T), initial=0.0) <= SYMMETRY_RTOL * scale)


@dataclass
class LmiBlock:
    """One affine symmetric-matrix constraint.

    ``margin`` overrides the default strictness margin
    ``margin_rel * (1 + max_j ||F_j||_2)``; it is ignored for non-strict blocks.
    """

    constant: np.ndarray
    coeffs: list[tuple[int, np.ndarray]] = field(default_factory=list)
    sense: Sense = Sense.PSD
    strict: bool = False
    margin: float | None = None
    name: str = ""

    def __post_init__(self):
        self.constant = np.atleast_2d(np.asarray(self.constant, dtype=float))
        self.sense = Sense(self.sense)
        d = self.constant.shape[0]
        if d < 1 or self.constant.shape != (d, d):
            raise SdpError(f"block {self.name!r}: constant must be square, got {self.constant.shape}")
        coeffs = []
        for idx, mat in self.coeffs:
            mat = np.atleast_2d(np.asarray(mat, dtype=float))
            if mat.shape != (d, d):
                raise SdpError(f"block {self.name!r}: coefficient for variable {idx} has shape {mat.shape}")
            coeffs.append((int(idx), mat))
        self.coeffs = coeffs
        for mat in [self.constant] + [m for _, m in coeffs]:
            if not _is_symmetric(mat):
                raise SdpError(f"block {self.name!r}: matrices must be symmetric")

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    @property
    def sign(self) -> float:
        return 1.0 if self.sense is Sense.PSD else -1.0

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        out = self.constant.copy()
        for idx, mat in self.coeffs:
            out += x[idx] * mat
        return out

    def slack(self, x: np.ndarray) -> float:
        """Smallest eigenvalue of ``sign * F(x)``; nonnegative means satisfied."""
        m = self.sign * self.evaluate(x)
        return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])

    def strict_margin(self, margin_rel: float = MARGIN_REL) -> float:
        if not self.strict:
            return 0.0
        if self.margin is not None:
            return float(self.margin)
        norms = [np.linalg.norm(self.constant, 2)] + [np.linalg.norm(m, 2) for _, m in self.coeffs]
        return margin_rel * (1.0 + max(norms))

    def transposed(self) -> "LmiBlock":
        return LmiBlock(self.constant.T.copy(), [(i, m.T.copy()) for i, m in self.coeffs],
                        self.sense, self.strict, self.margin, self.name)


@dataclass
class SdpProblem:
    """``min c^T x`` subject to every block."""

    n_vars: int
    objective: np.ndarray
    blocks: list[LmiBlock]
    var_names: list[str] | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).ravel()
        if self.objective.shape != (self.n_vars,):
            raise SdpError(f"objective has length {self.objective.size}, expected {self.n_vars}")
        if not self.blocks:
            raise SdpError("problem needs at least one block")
        for b in self.blocks:
            for idx, _ in b.coeffs:
                if not 0 <= idx < self.n_vars:
                    raise SdpError(f"block {b.name!r} references variable {idx} outside [0, {self.n_vars})")
        if self.var_names is not None and len(self.var_names) != self.n_vars:
            raise SdpError("var_names length must equal n_vars")


@dataclass
class SdpSolution:
    values: np.ndarray
    objective_value: float
    status: SolveStatus
    margin: float
    message: str = ""
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


def check_point(problem: SdpProblem, point, tol: float = 1e-8) -> tuple[bool, float]:
    """Evaluate every block at ``point``; return (feasible, worst eigenvalue slack).

    A block passes when its slack is at least ``-tol * (1 + ||F(x)||_2)``, so
    the test is absolute for unit-scale blocks and relative for large ones.
    """
    x = np.asarray(point, dtype=float).ravel()
    if x.shape != (problem.n_vars,):
        raise SdpError(f"point has length {x.size}, expected {problem.n_vars}")
    ok, worst = True, math.inf
    for b in problem.blocks:
        m = b.sign * b.evaluate(x)
        eig = np.linalg.eigvalsh(0.5 * (m + m.T))
        worst = min(worst, float(eig[0]))
        ok &= bool(eig[0] >= -tol * (1.0 + np.abs(eig).max()))
    return ok, worst


# --------------------------------------------------------------------------
# backends


def _svec_index(d: int):
    """Upper-triangle column-major positions and sqrt(2) weights (Clarabel layout)."""
    rows, cols = [], []
    for j in range(d):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    rows = np.array(rows)
    cols = np.array(cols)
    w = np.where(rows == cols, 1.0, math.sqrt(2.0))
    return rows, cols, w


def _solve_clarabel(problem: SdpProblem, tol: Tolerances, reg: float):
    import clarabel

    n = problem.n_vars
    lin_rows, psd = [], []
    for b in problem.blocks:
        (lin_rows if b.dim == 1 else psd).append(b)

    data, ri, ci, rhs = [], [], [], []
    row = 0
    # s = sign * (F(x) - mu I * sign) = sign*F0 - mu + sign * sum x_j F_j  in cone
    # clarabel form: A x + s = b  =>  A = -sign*svec(F_j), b = svec(sign*F0 - mu I)
    for b in lin_rows:
        mu = b.strict_margin(tol.margin_rel)
        for idx, mat in b.coeffs:
            data.append(-b.sign * mat[0, 0])
            ri.append(row)
            ci.append(idx)
        rhs.append(b.sign * b.constant[0, 0] - mu)
        row += 1
    cones = []
    if lin_rows:
        cones.append(clarabel.NonnegativeConeT(len(lin_rows)))
    for b in psd:
        d = b.dim
        r, c, w = _svec_index(d)
        mu = b.strict_margin(tol.margin_rel)
        rows_here = np.arange(row, row + r.size)
        for idx, mat in b.coeffs:
            v = -b.sign * w * mat[r, c]
            nz = v != 0.0
            data.extend(v[nz])
            ri.extend(rows_here[nz])
            ci.extend([idx] * int(nz.sum()))
        rhs.extend(w * (b.sign * b.constant - mu * np.eye(d))[r, c])
        row += r.size
        cones.append(clarabel.PSDTriangleConeT(d))

    A = sp.csc_matrix((data, (ri, ci)), shape=(row, n))
    P = sp.csc_matrix((n, n))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = tol.max_iter
    settings.tol_gap_rel = tol.gap
    settings.tol_gap_abs = tol.gap
    settings.tol_feas = tol.feasibility
    settings.presolve_enable = False
    settings.static_regularization_constant = reg
    solver = clarabel.DefaultSolver(P, problem.objective.copy(), A, np.asarray(rhs, dtype=float), cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    x = np.asarray(sol.x, dtype=float)
    if status in ("Solved", "AlmostSolved"):
        code = "solved" if status == "Solved" else "almost"
    elif status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        code = "infeasible"
    else:
        code = "failed"
    return code, x, status, int(sol.iterations)


def _solve_cvxopt(problem: SdpProblem, tol: Tolerances, reg: float = 0.0):
    import cvxopt
    from cvxopt import solvers

    n = problem.n_vars
    lin = [b for b in problem.blocks if b.dim == 1]
    psd = [b for b in problem.blocks if b.dim > 1]
    opts = {"show_progress": False, "abstol": tol.gap, "reltol": tol.gap,
            "feastol": tol.feasibility, "maxiters": tol.max_iter}
    # cvxopt form: G x + s = h, s >= 0 (componentwise / PSD column-major)
    Gl = np.zeros((len(lin), n))
    hl = np.zeros(len(lin))
    for r, b in enumerate(lin):
        for idx, mat in b.coeffs:
            Gl[r, idx] -= b.sign * mat[0, 0]
        hl[r] = b.sign * b.constant[0, 0] - b.strict_margin(tol.margin_rel)
    Gs, hs = [], []
    for b in psd:
        d = b.dim
        G = np.zeros((d * d, n))
        for idx, mat in b.coeffs:
            G[:, idx] -= b.sign * mat.ravel(order="F")
        Gs.append(cvxopt.matrix(G))
        hs.append(cvxopt.matrix(b.sign * b.constant - b.strict_margin(tol.margin_rel) * np.eye(d)))
    kwargs = {}
    if lin:
        kwargs["Gl"] = cvxopt.matrix(Gl)
        kwargs["hl"] = cvxopt.matrix(hl)
    try:
        res = solvers.sdp(cvxopt.matrix(problem.objective), Gs=Gs, hs=hs, options=opts, **kwargs)
    except (ValueError, ArithmeticError) as exc:
        return "failed", np.zeros(n), f"cvxopt: {exc}", 0
    status = res["status"]
    x = np.zeros(n) if res["x"] is None else np.array(res["x"]).ravel()
    if status == "optimal":
        code = "solved"
    elif status == "primal infeasible":
        code = "infeasible"
    elif res["x"] is not None:
        code = "almost"
    else:
        code = "failed"
    return code, x, status, int(res.get("iterations", 0))


_BACKENDS = {"clarabel": _solve_clarabel, "cvxopt": _solve_cvxopt}


def solve(problem: SdpProblem, tol: Tolerances | None = None) -> SdpSolution:
    """Solve ``problem``; the returned point is re-checked against every block.

    ``Optimal`` is reported only if the point satisfies all blocks to within
    ``tol.feasibility`` on the minimum eigenvalue. A proven infeasibility is
    ``Infeasible``; anything else is ``NumericalFailure``.
    """
    tol = tol or Tolerances()
    try:
        backend = _BACKENDS[tol.backend]
    except KeyError:
        raise SdpError(f"unknown backend {tol.backend!r}; choose from {sorted(_BACKENDS)}") from None
    regs = [tol.regularization] + ([1e-8] if tol.backend == "clarabel" and tol.regularization < 1e-8 else [])
    for reg in regs:
        code, x, raw, iters = backend(problem, tol, reg)
        if code == "infeasible":
            break
        ok = False
        if code != "failed" and np.all(np.isfinite(x)):
            ok, margin = check_point(problem, x, tol.feasibility)
            if ok:
                break
    if code == "infeasible":
        return SdpSolution(np.full(problem.n_vars, np.nan), math.inf, SolveStatus.INFEASIBLE,
                           -math.inf, raw, iters)
    if code == "failed" or not np.all(np.isfinite(x)):
        return SdpSolution(x, math.nan, SolveStatus.NUMERICAL_FAILURE, -math.inf, raw, iters)
    status = SolveStatus.OPTIMAL if ok else SolveStatus.NUMERICAL_FAILURE
    if code == "almost" and status is SolveStatus.OPTIMAL:
        raw = f"{raw} (reduced accuracy, point feasible)"
    return SdpSolution(x, float(problem.objective @ x), status, margin, raw, iters)


# --------------------------------------------------------------------------
# serialization


def problem_to_dict(problem: SdpProblem) -> dict:
    blocks = []
    for b in problem.blocks:
        entry = {
            "dim": b.dim,
            "constant": b.constant.tolist(),
            "coeffs": [{"var": i, "matrix": m.tolist()} for i, m in b.coeffs],
            "sense": b.sense.value,
            "strict": b.strict,
        }
        if b.margin is not None:
            entry["margin"] = b.margin
        if b.name:
            entry["name"] = b.name
        blocks.append(entry)
    out = {"n_vars": problem.n_vars, "objective": problem.objective.tolist(), "blocks": blocks}
    if problem.var_names is not None:
        out["var_names"] = list(problem.var_names)
    return out


def problem_from_dict(data: dict) -> SdpProblem:
    blocks = []
    for entry in data["blocks"]:
        b = LmiBlock(
            np.asarray(entry["constant"], dtype=float),
            [(c["var"], np.asarray(c["matrix"], dtype=float)) for c in entry["coeffs"]],
            Sense(entry["sense"]),
            bool(entry["strict"]),
            entry.get("margin"),
            entry.get("name", ""),
        )
        if b.dim != entry["dim"]:
            raise SdpError(f"block declares dim {entry['dim']} but constant is {b.dim}x{b.dim}")
        blocks.append(b)
    return SdpProblem(int(data["n_vars"]), np.asarray(data["objective"], dtype=float), blocks,
                      data.get("var_names"))


def dumps(problem: SdpProblem) -> str:
    return json.dumps(problem_to_dict(problem), sort_keys=True)


def loads(text: str) -> SdpProblem:
    return problem_from_dict(json.loads(text))


def restrict(blocks: Sequence[LmiBlock], fixed: dict[int, float], remap: dict[int, int],
             margin_rel: float = MARGIN_REL) -> list[LmiBlock]:
    """Substitute fixed variable values and renumber the remaining ones.

    Every variable index must appear in exactly one of ``fixed`` or ``remap``.
    The strictness margin of each block is frozen at its original value so
    that restricting a problem never changes what "strict" means.
    """
    out = []
    for b in blocks:
        const = b.constant.copy()
        coeffs = []
        for idx, mat in b.coeffs:
            if idx in fixed:
                const += fixed[idx] * mat
            else:
                coeffs.append((remap[idx], mat))
        margin = b.strict_margin(margin_rel) if b.strict and b.margin is None else b.margin
        out.append(LmiBlock(const, coeffs, b.sense, b.strict, margin, b.name))
    return out
