"""Closed-form throughput, access, overhead, pool-sizing and feedback-size formulas.

Everything here is a pure function of its arguments.  Scalars go in and plain
floats/ints come out, except :func:`access_probability`, which also accepts
numpy arrays so the simulator can call it on a whole block of slots.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

INV_E = math.exp(-1.0)


class OutOfRegimeWarning(UserWarning):
    """Raised (as a warning) when a formula is evaluated outside λ < M."""


@dataclass(frozen=True)
class LoadModel:
    """Poisson load of ``lam`` packets/slot spread over ``M`` channels."""

    lam: float
    M: int

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")

    @property
    def alpha(self) -> float:
        return self.lam / self.M


@dataclass(frozen=True)
class TimingProfile:
    """Preamble, data and feedback durations in symbols."""

    t_p: int
    t_d: int
    t_f: int

    def __post_init__(self):
        for name in ("t_p", "t_d", "t_f"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if not self.t_p < self.t_d:
            raise ValueError(f"need t_p < t_d, got t_p={self.t_p}, t_d={self.t_d}")


@dataclass(frozen=True)
class PoolSizing:
    """Target preamble-collision probability and the resulting pool size."""

    delta: float
    L_pool: int

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.L_pool < 1:
            raise ValueError(f"L_pool must be >= 1, got {self.L_pool}")


def _check_mode(mode):
    if mode not in ("exact", "approx"):
        raise ValueError(f"mode must be 'exact' or 'approx', got {mode!r}")


def _pow0(base, exp):
    # 0**0 == 1 by convention; math.pow already does this, but negative bases never occur.
    return 1.0 if exp == 0 else base**exp


def single_channel_throughput_known_k(K: int) -> float:
    """Success probability of one slot when all K contenders use p = 1/K."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return _pow0(1.0 - 1.0 / K, K - 1)


def single_channel_throughput_blind(p: float, lam: float) -> float:
    """Throughput ``p*lam*exp(-p*lam)`` under Poisson load with a blind access probability."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    return p * lam * math.exp(-p * lam)


def conventional_throughput(K: float, M: int, mode: str = "exact") -> float:
    """Mean number of collision-free packets when K users pick among M channels.

    ``exact`` gives ``K (1 - 1/M)^(K-1)``, ``approx`` gives ``K exp(-K/M)``.
    K may be real-valued (used for Poisson-mean reference curves).
    """
    _check_mode(mode)
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if K == 0:
        return 0.0
    if mode == "approx":
        return K * math.exp(-K / M)
    return K * _pow0(1.0 - 1.0 / M, K - 1)


def expected_group1(K: float, M: int) -> float:
    """Expected number of singleton channels after the preamble phase."""
    return conventional_throughput(K, M, "exact")


def ep_throughput_upper_bound(K: float, M: int) -> float:
    """Large-(K, M) bound ``M/e + S(K)(1 - 1/e)`` on exploration-phase throughput.

    The bound relies on ``(1 - p/L)^(W-1) ~ exp(-pW/L)``; for finite W the
    exact Group II term is slightly larger, so it is not a strict bound at
    small sizes (see :func:`ep_throughput_exact`).
    """
    return M * INV_E + expected_group1(K, M) * (1.0 - INV_E)


def exploration_gain() -> float:
    """Asymptotic ratio of maximum throughputs with and without exploration."""
    return 2.0 - INV_E


def access_probability(L_free, W):
    """Group II access probability ``min(1, L_free/W)``.

    ``L_free == 0`` gives 0 and ``W == 0`` gives 1.  Works elementwise on
    arrays; returns a float for scalar input.
    """
    L = np.asarray(L_free, dtype=np.float64)
    Wa = np.asarray(W, dtype=np.float64)
    if np.any(L < 0) or np.any(Wa < 0):
        raise ValueError("L_free and W must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(Wa == 0, 1.0, np.minimum(1.0, L / np.where(Wa == 0, 1.0, Wa)))
    p = np.where(L == 0, 0.0, p)
    return float(p) if p.ndim == 0 else p


def group2_expected_successes(W: int, L_free: int) -> float:
    """Expected collision-free Group II packets, ``p W (1 - p/L)^(W-1)``, given W and L."""
    if W == 0 or L_free == 0:
        return 0.0
    p = access_probability(L_free, W)
    return p * W * _pow0(1.0 - p / L_free, W - 1)


def exploration_overhead(t: TimingProfile) -> float:
    """Relative airtime overhead ``(t_p + t_f) / (t_d + t_f)``."""
    return (t.t_p + t.t_f) / (t.t_d + t.t_f)


def overhead_factor(t: TimingProfile) -> float:
    """Slot-length ratio ``(t_d + t_f) / (t_p + t_d + 2 t_f)`` discounting exploration."""
    return (t.t_d + t.t_f) / (t.t_p + t.t_d + 2 * t.t_f)


def no_preamble_collision_prob(k_m: int, L_pool: int, mode: str = "exact") -> float:
    """Probability that ``k_m`` users drawing from ``L_pool`` preambles all differ."""
    _check_mode(mode)
    if k_m < 0:
        raise ValueError(f"k_m must be >= 0, got {k_m}")
    if L_pool < 1:
        raise ValueError(f"L_pool must be >= 1, got {L_pool}")
    if mode == "approx":
        return math.exp(-k_m * (k_m - 1) / (2.0 * L_pool))
    if k_m > L_pool:
        return 0.0
    prob = 1.0
    for k in range(1, k_m):
        prob *= 1.0 - k / L_pool
    return prob


def avg_preamble_collision_prob(lam: float, M: int, L_pool: int) -> float:
    """First-order per-channel preamble-collision probability ``lam^2 / (2 L M^2)``.

    Evaluated for any load, with an :class:`OutOfRegimeWarning` when ``lam >= M``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if M < 1 or L_pool < 1:
        raise ValueError("M and L_pool must be >= 1")
    if lam >= M:
        warnings.warn(
            f"lambda/M = {lam / M:.3g} >= 1: collision approximation out of regime",
            OutOfRegimeWarning,
            stacklevel=2,
        )
    return lam**2 / (2.0 * L_pool * M**2)


def poisson_preamble_collision_prob(lam: float, M: int, L_pool: int, tol: float = 1e-16) -> float:
    """Per-channel collision probability with Poisson(lam/M) users, summed exactly."""
    a = lam / M
    if a == 0:
        return 0.0
    total = 0.0
    pk = math.exp(-a)
    k = 0
    while True:
        total += pk * (1.0 - no_preamble_collision_prob(k, L_pool))
        k += 1
        pk *= a / k
        if k > a and pk < tol:
            return total


def required_pool_size(lam: float, M: int, delta: float) -> int:
    """Smallest pool size keeping the first-order collision probability at or below delta."""
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    x = lam**2 / (2.0 * delta * M**2)
    # absorb float noise such as 0.8**2/0.02 == 32.00000000000001
    return max(1, math.ceil(x * (1.0 - 1e-12)))


def field_width(max_value: int) -> int:
    """Bits needed to carry integers ``0..max_value``."""
    if max_value < 1:
        raise ValueError(f"max_value must be >= 1, got {max_value}")
    return int(max_value).bit_length()


def feedback_bits(M: int, max_k: int, max_W: int) -> tuple[int, int]:
    """Sizes ``(full, reduced)`` of the two downlink feedback formats, in bits."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    return M * field_width(max_k), M + field_width(max_W)


@lru_cache(maxsize=None)
def _no_singleton_maps(n: int, b: int) -> int:
    # maps of n labelled users onto b labelled channels leaving no channel with exactly one user
    total = 0
    falling = 1  # n! / (n-j)!
    for j in range(min(n, b) + 1):
        if j:
            falling *= n - j + 1
        total += (-1) ** j * math.comb(b, j) * falling * (b - j) ** (n - j)
    return total


@lru_cache(maxsize=None)
def singleton_distribution(K: int, M: int) -> tuple[Fraction, ...]:
    """Exact law of the number of singleton channels when K users pick among M uniformly."""
    if K < 0 or M < 1:
        raise ValueError("need K >= 0 and M >= 1")
    denom = M**K
    out = []
    falling = 1
    for s in range(min(K, M) + 1):
        if s:
            falling *= K - s + 1
        out.append(Fraction(math.comb(M, s) * falling * _no_singleton_maps(K - s, M - s), denom))
    return tuple(out)


def ep_throughput_exact(K: int, M: int) -> float:
    """Exact mean successes per slot with exploration and ideal feedback, for fixed K.

    Sums the singleton-count law against ``S + p W (1 - p/L)^(W-1)``.
    """
    total = 0.0
    for s, prob in enumerate(singleton_distribution(K, M)):
        if prob:
            total += float(prob) * (s + group2_expected_successes(K - s, M - s))
    return total
