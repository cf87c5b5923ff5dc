"""Monte Carlo slots for conventional multichannel ALOHA and ALOHA with an exploration phase.

Trials are simulated in blocks of :data:`BLOCK_SIZE`.  Block ``b`` draws from
a Philox stream keyed by the run seed with the block index in the high
counter word, so a block's outcomes depend only on ``(seed, b)`` and its
length, and a run is bit-for-bit identical whatever the number of worker
threads.

Also provides exact enumeration oracles (:func:`brute_force_ep`,
:func:`brute_force_conventional`) that share no code with the simulator.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import analytic, feedback
from .preamble import (PreamblePool, complex_noise, default_k_max, default_threshold, detect_counts,
                       draw_rayleigh, power_controlled_gain)

BLOCK_SIZE = 4096


@dataclass(frozen=True)
class FixedK:
    K: int

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")

    @property
    def K_max(self) -> int:
        return self.K

    def draw(self, rng, n):
        return np.full(n, self.K, dtype=np.int64)


@dataclass(frozen=True)
class PoissonLoad:
    """Poisson arrivals with mean ``lam``, truncated at ``K_cap`` (default ``ceil(20*lam)``)."""

    lam: float
    K_cap: int | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.K_cap is not None and self.K_cap < 1:
            raise ValueError(f"K_cap must be >= 1, got {self.K_cap}")

    @property
    def K_max(self) -> int:
        return self.K_cap if self.K_cap is not None else max(1, math.ceil(20 * self.lam))

    def draw(self, rng, n):
        return np.minimum(rng.poisson(self.lam, n), self.K_max).astype(np.int64)


@dataclass(frozen=True)
class PhysicalFidelity:
    """Feedback built from detected preamble counts instead of the true ones.

    Users pick a preamble uniformly from ``pool``, apply power control to
    ``snr_db`` over Rayleigh fading, and the base station counts distinct
    preambles per channel with a residual threshold of ``tau_factor*t_p*n0``.
    """

    pool: PreamblePool
    snr_db: float = 20.0
    n0: float = 1.0
    tau_factor: float = 2.0
    k_max: int | None = None
    method: str = "beam"
    width: int = 32

    @property
    def tau(self) -> float:
        return default_threshold(self.pool.t_p, self.n0, self.tau_factor)

    @property
    def k_limit(self) -> int:
        return default_k_max(self.pool.t_p) if self.k_max is None else self.k_max


@dataclass(frozen=True)
class SlotConfig:
    M: int
    arrival: FixedK | PoissonLoad
    protocol: str = "ep"
    fidelity: PhysicalFidelity | None = None  # None means ideal feedback
    seed: int = 0
    roundtrip_feedback: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.protocol not in ("ep", "conventional"):
            raise ValueError(f"protocol must be 'ep' or 'conventional', got {self.protocol!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SlotOutcome:
    k_vec: tuple[int, ...]
    S: int
    W: int
    L_free: int
    U: int
    group1_success: int
    group2_success: int
    p_dtp: float
    k_hat: tuple[int, ...] = ()
    W_hat: int = 0

    @property
    def K(self) -> int:
        return sum(self.k_vec)

    @property
    def successes(self) -> int:
        return self.group1_success + self.group2_success


@dataclass(frozen=True)
class ThroughputEstimate:
    mean: float
    stderr: float
    n_trials: int
    effective_mean: float | None = None
    trials: dict | None = field(default=None, repr=False, compare=False)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Generator for trial block ``block`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(key=seed, counter=block << 192))


# -- slot kernels (vectorised over a block of trials) ---------------------------------


def _conventional_block(M, K, rng):
    n = K.size
    trial = np.repeat(np.arange(n), K)
    ch = rng.integers(0, M, size=trial.size)
    counts = np.bincount(trial * M + ch, minlength=n * M).reshape(n, M)
    return {"K": K, "successes": (counts == 1).sum(axis=1)}


def _roundtrip(bitmap, W_b, max_W):
    M = bitmap.shape[1]
    out_map = np.empty_like(bitmap)
    out_W = np.empty_like(W_b)
    for i in range(bitmap.shape[0]):
        bits = feedback.encode_reduced(bitmap[i].astype(int).tolist(), int(W_b[i]), max_W)
        wire = feedback.pack_bits(bits)
        fb = feedback.decode_reduced(feedback.unpack_bits(wire, len(bits)), M, max_W)
        out_map[i] = np.array(fb.bitmap, dtype=bool)
        out_W[i] = fb.W
    return out_map, out_W


def _ep_block(cfg: SlotConfig, K, rng, channels=None, keep_vectors=False):
    M = cfg.M
    n = K.size
    trial = np.repeat(np.arange(n), K)
    N = trial.size
    ch = rng.integers(0, M, size=N) if channels is None else np.asarray(channels, dtype=np.int64)
    cell = trial * M + ch
    counts = np.bincount(cell, minlength=n * M).reshape(n, M)
    S = (counts == 1).sum(axis=1)

    phys = cfg.fidelity
    if phys is None:
        k_hat = counts
    else:
        pool = phys.pool
        pre = rng.integers(0, pool.L_pool, size=N)
        amp = power_controlled_gain(draw_rayleigh(rng, N), phys.snr_db, phys.n0)
        Y = complex_noise(rng, (n * M, pool.t_p), phys.n0)
        np.add.at(Y, cell, amp[:, None] * pool.C[:, pre].T)
        k_hat = detect_counts(pool, Y, phys.tau, phys.k_limit, phys.method, phys.width).reshape(n, M)

    # what is broadcast: singleton bitmap and the number of users in contention
    bitmap = k_hat == 1
    W_b = k_hat.sum(axis=1) - bitmap.sum(axis=1)
    if cfg.roundtrip_feedback:
        max_W = max(1, cfg.arrival.K_max if phys is None else M * phys.k_limit)
        bitmap, W_b = _roundtrip(bitmap, W_b, max_W)
    L_hat = M - bitmap.sum(axis=1)
    p = analytic.access_probability(L_hat, W_b)
    p = np.atleast_1d(p)

    g1 = bitmap[trial, ch]
    g2 = ~g1
    t2 = trial[g2]
    send2 = rng.random(t2.size) < p[t2]
    pick = rng.integers(0, np.maximum(L_hat[t2], 1), size=t2.size)
    free_first = np.argsort(bitmap, axis=1, kind="stable")
    data_ch = ch.copy()
    data_ch[g2] = free_first[t2, pick]
    sends = g1.copy()
    sends[g2] = send2

    dcell = trial[sends] * M + data_ch[sends]
    dcount = np.bincount(dcell, minlength=n * M)
    ok = np.zeros(N, dtype=bool)
    ok[sends] = dcount[dcell] == 1
    out = {
        "K": K,
        "S": S,
        "W": K - S,
        "L_free": M - S,
        "U": np.bincount(trial[g2 & sends], minlength=n),
        "group1_success": np.bincount(trial[ok & g1], minlength=n),
        "group2_success": np.bincount(trial[ok & g2], minlength=n),
        "p_dtp": p,
        "W_hat": W_b,
    }
    if keep_vectors:
        out["k_vec"] = counts
        out["k_hat"] = k_hat
    return out


def simulate_slot_conventional(M: int, K: int, rng: np.random.Generator) -> int:
    """Number of channels chosen by exactly one of K users."""
    if M < 1 or K < 0:
        raise ValueError("need M >= 1 and K >= 0")
    return int(_conventional_block(M, np.array([K]), rng)["successes"][0])


def simulate_slot_ep(cfg: SlotConfig, K: int, rng: np.random.Generator, channels=None) -> SlotOutcome:
    """One exploration-phase slot with K users.

    ``channels`` optionally fixes the users' preamble channels (0-based)
    instead of drawing them.
    """
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    if channels is not None and len(channels) != K:
        raise ValueError("need one channel per user")
    r = _ep_block(cfg, np.array([K]), rng, channels=channels, keep_vectors=True)
    return SlotOutcome(
        k_vec=tuple(int(v) for v in r["k_vec"][0]),
        S=int(r["S"][0]),
        W=int(r["W"][0]),
        L_free=int(r["L_free"][0]),
        U=int(r["U"][0]),
        group1_success=int(r["group1_success"][0]),
        group2_success=int(r["group2_success"][0]),
        p_dtp=float(r["p_dtp"][0]),
        k_hat=tuple(int(v) for v in r["k_hat"][0]),
        W_hat=int(r["W_hat"][0]),
    )


# -- runs ------------------------------------------------------------------------------


def _run_block(cfg: SlotConfig, n_trials: int, b: int):
    rng = block_rng(cfg.seed, b)
    n = min(BLOCK_SIZE, n_trials - b * BLOCK_SIZE)
    K = cfg.arrival.draw(rng, n)
    if cfg.protocol == "conventional":
        return _conventional_block(cfg.M, K, rng)
    return _ep_block(cfg, K, rng)


def run_trials(cfg: SlotConfig, n_trials: int, threads: int = 1) -> dict[str, np.ndarray]:
    """Per-trial records, in trial order, for ``n_trials`` slots."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    n_blocks = -(-n_trials // BLOCK_SIZE)
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _run_block(cfg, n_trials, b), range(n_blocks)))
    else:
        parts = [_run_block(cfg, n_trials, b) for b in range(n_blocks)]
    rec = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
    if cfg.protocol == "ep":
        rec["successes"] = rec["group1_success"] + rec["group2_success"]
    return rec


def summarize(values) -> tuple[float, float]:
    """Sample mean and its standard error."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def run_experiment(cfg: SlotConfig, n_trials: int, timing: analytic.TimingProfile | None = None,
                   threads: int = 1, keep_trials: bool = False) -> ThroughputEstimate:
    """Mean successes per slot over ``n_trials`` independent slots.

    With ``timing``, exploration runs also report the overhead-discounted
    mean; conventional slots carry no exploration overhead, so their
    effective mean equals the mean.
    """
    rec = run_trials(cfg, n_trials, threads)
    mean, se = summarize(rec["successes"])
    eff = None
    if timing is not None:
        eff = mean * analytic.overhead_factor(timing) if cfg.protocol == "ep" else mean
    return ThroughputEstimate(mean, se, n_trials, eff, rec if keep_trials else None)


EP_TRIAL_COLUMNS = ("trial", "K", "S", "W", "L_free", "U", "group1_success", "group2_success")
CONVENTIONAL_TRIAL_COLUMNS = ("trial", "K", "successes")


def write_trial_records(rec: dict[str, np.ndarray], fh) -> None:
    """Write per-trial records as CSV (columns per :data:`EP_TRIAL_COLUMNS` or the conventional set)."""
    cols = EP_TRIAL_COLUMNS if "S" in rec else CONVENTIONAL_TRIAL_COLUMNS
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    n = rec["K"].size
    data = [np.arange(n)] + [rec[c] for c in cols[1:]]
    for row in zip(*data):
        w.writerow([int(v) for v in row])


# -- exact enumeration oracles ------------------------------------------------------


def _singletons(assignment, M):
    counts = [0] * M
    for c in assignment:
        counts[c] += 1
    return counts


@lru_cache(maxsize=None)
def _group2_exact(W: int, L: int) -> Fraction:
    # every user stays silent (prob 1-p) or sends on one of L free channels (prob p/L each)
    if W == 0 or L == 0:
        return Fraction(0)
    p = min(Fraction(1), Fraction(L, W))
    choices = [(None, 1 - p)] + [(c, p / L) for c in range(L)]
    total = Fraction(0)
    for combo in itertools.product(choices, repeat=W):
        weight = Fraction(1)
        load = [0] * L
        for c, w in combo:
            weight *= w
            if c is not None:
                load[c] += 1
        if weight:
            total += weight * load.count(1)
    return total


def brute_force_ep(K: int, M: int) -> Fraction:
    """Exact mean successes per exploration slot, enumerating every random choice."""
    if not (0 <= K <= 6 and 1 <= M <= 4):
        raise ValueError(f"brute force limited to K <= 6, M <= 4, got K={K}, M={M}")
    total = Fraction(0)
    for assignment in itertools.product(range(M), repeat=K):
        counts = _singletons(assignment, M)
        S = counts.count(1)
        total += S + _group2_exact(K - S, M - S)
    return total / M**K


def brute_force_conventional(K: int, M: int) -> Fraction:
    """Exact mean successes per conventional slot, enumerating all channel picks."""
    if not (0 <= K <= 8 and 1 <= M <= 4):
        raise ValueError(f"brute force limited to K <= 8, M <= 4, got K={K}, M={M}")
    total = sum(_singletons(a, M).count(1) for a in itertools.product(range(M), repeat=K))
    return Fraction(total, M**K)
