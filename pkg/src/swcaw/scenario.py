"""Scenario programs, scenario-with-certificates assembly and the sequential algorithm.

A :class:`ConstraintFamily` maps one uncertainty sample to LMI blocks over a
local vector ``(theta, xi)``: ``n_theta`` design variables followed by
``n_xi`` certificate variables. :func:`assemble_swc` gives every sample its
own copy of ``xi``; :func:`assemble_so` is the certificate-free special case.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import probbounds as pb
from .sdp import LmiBlock, SdpProblem, SolveStatus, Tolerances, restrict, solve

log = logging.getLogger(__name__)

# validation samples are checked in chunks of this size; the early stop of the
# sequential algorithm happens at chunk boundaries so the log does not depend
# on the worker count
VALIDATION_CHUNK = 32


class ScenarioError(RuntimeError):
    """A design solve failed; ``context`` carries the iteration details."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}


@dataclass
class ConstraintFamily:
    """Uncertain LMI constraints ``f(theta, xi, q) <= 0`` with a sampler for ``q``.

    ``generator(q)`` returns blocks indexed over ``range(n_theta + n_xi)``;
    ``sampler(rng, N)`` returns ``N`` iid samples.
    """

    n_theta: int
    n_xi: int
    generator: Callable[[Any], list[LmiBlock]]
    objective: np.ndarray
    sampler: Callable[[np.random.Generator, int], list]
    theta_names: list[str] | None = None
    xi_names: list[str] | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).ravel()
        if self.objective.shape != (self.n_theta,):
            raise ValueError(f"objective must have length n_theta={self.n_theta}")

    def blocks(self, q) -> list[LmiBlock]:
        blocks = self.generator(q)
        top = self.n_theta + self.n_xi
        for b in blocks:
            for idx, _ in b.coeffs:
                if not 0 <= idx < top:
                    raise ValueError(f"generator produced variable index {idx} outside [0, {top})")
        return blocks


@dataclass
class IterationLog:
    k: int
    N_k: int
    M_k: int
    objective: float
    violations: int
    checked: int
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SwcResult:
    theta: np.ndarray
    objective_value: float
    n_used: int
    iterations: list[IterationLog]
    certificate_values: list[np.ndarray] = field(default_factory=list)
    validated: bool = False
    N: int = 0
    params: dict = field(default_factory=dict)

    def log_lines(self) -> list[str]:
        """JSON-lines iteration log with the run parameters echoed in each line."""
        return [json.dumps({**asdict(it), "params": self.params}, sort_keys=True) for it in self.iterations]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a labelled sub-task of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def draw_multisample(family: ConstraintFamily, N: int, seed) -> list:
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    return list(family.sampler(_rng(seed), int(N)))


def _names(family: ConstraintFamily, N: int, shared: bool) -> list[str] | None:
    if family.theta_names is None or (family.n_xi and family.xi_names is None):
        return None
    names = list(family.theta_names)
    if family.n_xi:
        copies = 1 if shared else N
        for i in range(copies):
            names += [f"{nm}[{i}]" for nm in family.xi_names]
    return names


def assemble_so(family: ConstraintFamily, samples: Sequence) -> SdpProblem:
    """Plain scenario program: the union of all sampled blocks over ``theta``."""
    if family.n_xi:
        raise ValueError("assemble_so needs a certificate-free family (n_xi = 0); use assemble_swc")
    blocks = [b for q in samples for b in family.blocks(q)]
    return SdpProblem(family.n_theta, family.objective.copy(), blocks, _names(family, len(samples), False))


def _shift_blocks(blocks: list[LmiBlock], n_theta: int, offset: int) -> list[LmiBlock]:
    out = []
    for b in blocks:
        coeffs = [(i if i < n_theta else i + offset, m) for i, m in b.coeffs]
        out.append(LmiBlock(b.constant, coeffs, b.sense, b.strict, b.margin, b.name))
    return out


def assemble_swc(family: ConstraintFamily, samples: Sequence, shared: bool = False) -> SdpProblem:
    """Scenario program with one certificate copy per sample.

    ``shared=True`` builds the common-certificate baseline instead: one ``xi``
    for all samples.
    """
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    if family.n_xi == 0:
        return assemble_so(family, samples)
    blocks = []
    for i, q in enumerate(samples):
        off = 0 if shared else i * family.n_xi
        blocks += _shift_blocks(family.blocks(q), family.n_theta, off)
    copies = 1 if shared else len(samples)
    n_vars = family.n_theta + copies * family.n_xi
    c = np.concatenate([family.objective, np.zeros(n_vars - family.n_theta)])
    return SdpProblem(n_vars, c, blocks, _names(family, len(samples), shared))


def solve_scenario(family: ConstraintFamily, samples: Sequence, tol: Tolerances | None = None,
                   shared: bool = False):
    """Assemble and solve; return ``(theta, objective, per-sample certificates, solution)``."""
    problem = assemble_swc(family, samples, shared)
    sol = solve(problem, tol)
    if not sol.ok:
        return None, math.inf, [], sol
    theta = sol.values[: family.n_theta].copy()
    certs = []
    if family.n_xi:
        rest = sol.values[family.n_theta:]
        certs = [rest[i * family.n_xi:(i + 1) * family.n_xi].copy() for i in range(len(rest) // family.n_xi)]
    return theta, float(family.objective @ theta), certs, sol


def certificate_exists(family: ConstraintFamily, theta: np.ndarray, q, tol: Tolerances | None = None) -> bool:
    """Whether sample ``q`` admits a certificate at the fixed design ``theta``.

    Numerical failures count as violations.
    """
    tol = tol or Tolerances()
    blocks = family.blocks(q)
    nt = family.n_theta
    fixed = {i: float(theta[i]) for i in range(nt)}
    remap = {nt + j: j for j in range(family.n_xi)}
    reduced = restrict(blocks, fixed, remap, tol.margin_rel)
    # blocks that no longer involve any certificate are plain checks
    free = [b for b in reduced if b.coeffs]
    for b in reduced:
        if not b.coeffs and b.slack(np.zeros(0)) - b.strict_margin() < -tol.feasibility:
            return False
    if not free:
        return True
    sol = solve(SdpProblem(family.n_xi, np.zeros(family.n_xi), free), tol)
    if sol.status is SolveStatus.NUMERICAL_FAILURE:
        log.warning("validation solve failed numerically (%s); counted as violation", sol.message)
    return sol.ok


def _check_samples(family, theta, samples, tol, workers, stop_early):
    """Per-sample feasibility flags, ordered by sample index."""

    def run(q):
        return certificate_exists(family, theta, q, tol)

    flags: list[bool] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    try:
        for start in range(0, len(samples), VALIDATION_CHUNK):
            chunk = samples[start:start + VALIDATION_CHUNK]
            res = list(pool.map(run, chunk)) if pool else [run(q) for q in chunk]
            flags += res
            if stop_early and not all(res):
                break
    finally:
        if pool:
            pool.shutdown()
    return flags


def estimate_violation(family: ConstraintFamily, theta, M: int, seed, tol: Tolerances | None = None,
                       workers: int = 1) -> tuple[float, list[int]]:
    """Empirical violation over ``M`` fresh samples and the indices that failed."""
    if int(M) != M or M < 1:
        raise ValueError(f"M must be a positive integer, got {M!r}")
    samples = draw_multisample(family, M, seed)
    flags = _check_samples(family, np.asarray(theta, dtype=float), samples, tol, workers, False)
    failures = [i for i, ok in enumerate(flags) if not ok]
    return len(failures) / M, failures


def sequential_swc(family: ConstraintFamily, levels: pb.ProbLevels, seq: pb.SequentialParams | None = None,
                   seed: int = 0, tol: Tolerances | None = None, n_theta: int | None = None,
                   sample_rule: str = "exact", N: int | None = None, workers: int = 1,
                   on_iteration: Callable[[IterationLog], None] | None = None) -> SwcResult:
    """Sequential design/validation loop for scenario programs with certificates.

    ``N`` defaults to the smallest count with ``B(N, eps, n_theta) <= delta/2``
    (``sample_rule="bound"`` uses the closed form instead). ``n_theta``
    overrides the family's design-variable count in that computation only.
    Design and validation samples come from disjoint seeded substreams, fresh
    at every iteration.
    """
    seq = seq or pb.SequentialParams()
    nt = family.n_theta if n_theta is None else int(n_theta)
    if N is None:
        N = pb.full_sample_count(levels, nt, sample_rule, halve_delta=True)
    params = {"epsilon": levels.epsilon, "delta": levels.delta, "k_t": seq.k_t, "alpha": seq.alpha,
              "n_theta": nt, "N": N, "seed": seed, "sample_rule": sample_rule}
    logs: list[IterationLog] = []
    theta = None
    for k in range(1, seq.k_t + 1):
        t0 = time.perf_counter()
        N_k = pb.design_schedule(N, seq, k)
        design = list(family.sampler(substream(seed, k, 0), N_k))
        theta, obj, certs, sol = solve_scenario(family, design, tol)
        if theta is None:
            ctx = {"k": k, "N_k": N_k, "status": sol.status.value, "message": sol.message, **params}
            raise ScenarioError(f"design solve at iteration {k} (N_k={N_k}) ended {sol.status.value}: {sol.message}", ctx)
        if k == seq.k_t:
            entry = IterationLog(k, N_k, 0, obj, 0, 0, time.perf_counter() - t0)
            logs.append(entry)
            if on_iteration:
                on_iteration(entry)
            return SwcResult(theta, obj, N_k, logs, certs, False, N, params)
        M_k = pb.validation_samples(levels, seq, k)
        valid = list(family.sampler(substream(seed, k, 1), M_k))
        flags = _check_samples(family, theta, valid, tol, workers, True)
        bad = flags.count(False)
        entry = IterationLog(k, N_k, M_k, obj, bad, len(flags), time.perf_counter() - t0)
        logs.append(entry)
        log.info("iteration %d: N_k=%d M_k=%d objective=%.6g violations=%d", k, N_k, M_k, obj, bad)
        if on_iteration:
            on_iteration(entry)
        if bad == 0:
            return SwcResult(theta, obj, N_k, logs, certs, True, N, params)
    raise AssertionError("unreachable")


def one_shot_swc(family: ConstraintFamily, levels: pb.ProbLevels, seed: int = 0, tol: Tolerances | None = None,
                 n_theta: int | None = None, N: int | None = None, shared: bool = False) -> SwcResult:
    """Single scenario program with ``N = min_samples_exact(levels, n_theta)`` samples."""
    nt = family.n_theta if n_theta is None else int(n_theta)
    if N is None:
        N = pb.min_samples_exact(levels, nt)
    t0 = time.perf_counter()
    samples = draw_multisample(family, N, substream(seed, 0, 0))
    theta, obj, certs, sol = solve_scenario(family, samples, tol, shared)
    params = {"epsilon": levels.epsilon, "delta": levels.delta, "n_theta": nt, "N": N, "seed": seed,
              "shared_certificates": shared}
    if theta is None:
        raise ScenarioError(f"scenario solve with N={N} ended {sol.status.value}: {sol.message}",
                            {"status": sol.status.value, **params})
    entry = IterationLog(1, N, 0, obj, 0, 0, time.perf_counter() - t0)
    return SwcResult(theta, obj, N, [entry], certs, False, N, params)
