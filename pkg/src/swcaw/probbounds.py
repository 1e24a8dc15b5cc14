"""Sample-complexity computations for scenario and sequential scenario designs."""

from __future__ import annotations

import math
from dataclasses import dataclass

# relative guard applied before every ceiling, see _guarded_ceil
_CEIL_GUARD = 1e-12


@dataclass(frozen=True)
class ProbLevels:
    """Accuracy ``epsilon`` and confidence ``delta`` of a probabilistic design."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta!r}")


@dataclass(frozen=True)
class SequentialParams:
    """Iteration budget ``k_t`` and hyperharmonic exponent ``alpha``."""

    k_t: int = 10
    alpha: float = 1.0

    def __post_init__(self):
        if int(self.k_t) != self.k_t or self.k_t < 2:
            raise ValueError(f"k_t must be an integer >= 2, got {self.k_t!r}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")


def _guarded_ceil(x: float) -> int:
    # values like 7564.9999999 or 61.0000000001 must not flip by one
    return int(math.ceil(x - abs(x) * _CEIL_GUARD))


def _check_count(name: str, value: int, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def binomial_tail(N: int, epsilon: float, n_theta: int) -> float:
    """Probability that a Binomial(N, epsilon) variable is below ``n_theta``.

    This is the bound on ``Pr{Viol > epsilon}`` for a scenario program with
    ``n_theta`` decision variables and ``N`` samples. Terms are accumulated in
    log space through the ratio recurrence, so ``N`` in the tens of thousands
    neither overflows the binomial coefficients nor underflows
    ``(1 - epsilon)**N`` to zero prematurely.
    """
    N = _check_count("N", N)
    n_theta = _check_count("n_theta", n_theta)
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    kmax = min(n_theta - 1, N)
    if kmax == N:
        return 1.0
    log_ratio = math.log(epsilon) - math.log1p(-epsilon)
    log_term = N * math.log1p(-epsilon)
    logs = [log_term]
    for k in range(kmax):
        log_term += math.log(N - k) - math.log(k + 1) + log_ratio
        logs.append(log_term)
    top = max(logs)
    total = math.fsum(math.exp(v - top) for v in logs)
    return min(1.0, math.exp(top + math.log(total)))


def min_samples_exact(levels: ProbLevels, n_theta: int) -> int:
    """Smallest ``N`` with ``binomial_tail(N, epsilon, n_theta) <= delta``."""
    n_theta = _check_count("n_theta", n_theta)
    eps, delta = levels.epsilon, levels.delta
    lo = n_theta  # B(N) = 1 for N < n_theta
    if binomial_tail(lo, eps, n_theta) <= delta:
        return lo
    hi = 2 * lo
    while binomial_tail(hi, eps, n_theta) > delta:
        lo, hi = hi, 2 * hi
    # invariant: B(lo) > delta >= B(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if binomial_tail(mid, eps, n_theta) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def min_samples_bound(levels: ProbLevels, n_theta: int) -> int:
    """Closed-form sufficient sample count ``e/(eps(e-1)) (ln 1/delta + n_theta - 1)``."""
    n_theta = _check_count("n_theta", n_theta)
    e = math.e
    value = e / (levels.epsilon * (e - 1.0)) * (math.log(1.0 / levels.delta) + n_theta - 1)
    return _guarded_ceil(value)


def hyperharmonic(m: int, alpha: float) -> float:
    """Finite hyperharmonic sum ``sum_{j=1}^m j**-alpha``."""
    return math.fsum(j ** (-alpha) for j in range(1, m + 1))


def validation_samples(levels: ProbLevels, seq: SequentialParams, k: int) -> int:
    """Validation sample count ``M_k`` for iteration ``k`` of the sequential algorithm."""
    k = _check_count("k", k)
    if k > seq.k_t - 1:
        raise ValueError(f"k must lie in [1, {seq.k_t - 1}], got {k}")
    numer = (
        seq.alpha * math.log(k)
        + math.log(hyperharmonic(seq.k_t - 1, seq.alpha))
        + math.log(2.0 / levels.delta)
    )
    return _guarded_ceil(numer / -math.log1p(-levels.epsilon))


def design_schedule(N: int, seq: SequentialParams, k: int) -> int:
    """Design sample count ``N_k = ceil(N k / k_t)``, exact in integers."""
    N = _check_count("N", N)
    k = _check_count("k", k)
    if k > seq.k_t:
        raise ValueError(f"k must lie in [1, {seq.k_t}], got {k}")
    return -(-N * k // seq.k_t)


def full_sample_count(
    levels: ProbLevels, n_theta: int, rule: str = "exact", halve_delta: bool = True
) -> int:
    """Full sample count ``N`` feeding the sequential design schedule.

    ``rule="exact"`` searches the binomial tail, ``rule="bound"`` uses the
    closed form. ``halve_delta`` splits the confidence budget between design
    and validation, as the sequential algorithm requires; turning it off with
    ``rule="bound"`` reproduces the published 7565 / 2270 arithmetic.
    """
    delta = levels.delta / 2.0 if halve_delta else levels.delta
    lv = ProbLevels(levels.epsilon, delta)
    if rule == "exact":
        return min_samples_exact(lv, n_theta)
    if rule == "bound":
        return min_samples_bound(lv, n_theta)
    raise ValueError(f"unknown sample rule {rule!r}; expected 'exact' or 'bound'")


def complexity_table(
    levels: ProbLevels, n_theta: int, seq: SequentialParams | None = None
) -> dict:
    """Every sample count the toolkit derives from ``(levels, n_theta)``."""
    half = ProbLevels(levels.epsilon, levels.delta / 2.0)
    table = {
        "epsilon": levels.epsilon,
        "delta": levels.delta,
        "n_theta": n_theta,
        "exact_N": min_samples_exact(levels, n_theta),
        "exact_N_half_delta": min_samples_exact(half, n_theta),
        "bound_N": min_samples_bound(levels, n_theta),
        "bound_N_half_delta": min_samples_bound(half, n_theta),
    }
    if seq is not None:
        n_seq = table["exact_N_half_delta"]
        table["k_t"] = seq.k_t
        table["alpha"] = seq.alpha
        table["schedule"] = [
            {
                "k": k,
                "N_k": design_schedule(n_seq, seq, k),
                "N_k_bound": design_schedule(table["bound_N"], seq, k),
                "M_k": validation_samples(levels, seq, k) if k < seq.k_t else None,
            }
            for k in range(1, seq.k_t + 1)
        ]
    return table
