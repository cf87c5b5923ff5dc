"""Common preamble pools, superposed channel observations and greedy sparse detection.

A base station sees, on each channel, ``y = C s + n`` where the columns of
``C`` are the pool preambles and ``s`` carries one faded coefficient per
preamble actually sent.  Counting the nonzeros of a sparse estimate of ``s``
gives the number of distinct preambles, which undercounts users whenever two
of them picked the same preamble.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# rows per OMP batch; keeps the (rows x L_pool) correlation matrix small
_OMP_CHUNK = 2048


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    for d in range(2, math.isqrt(n) + 1):
        if n % d == 0:
            return False
    return True


@dataclass(frozen=True, eq=False)
class PreamblePool:
    """``L_pool`` unit-norm preambles of length ``t_p``, stored as the columns of ``C``."""

    C: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        C = np.ascontiguousarray(self.C, dtype=np.complex128)
        if C.ndim != 2 or C.shape[1] < 1:
            raise ValueError(f"pool matrix must be (t_p, L_pool), got shape {C.shape}")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)

    @property
    def t_p(self) -> int:
        return self.C.shape[0]

    @property
    def L_pool(self) -> int:
        return self.C.shape[1]

    @property
    def sequences(self) -> np.ndarray:
        """Preambles as rows, shape ``(L_pool, t_p)``."""
        return self.C.T

    def gram(self) -> np.ndarray:
        return self.C.conj().T @ self.C

    def coherence(self) -> float:
        """Largest off-diagonal magnitude of the Gram matrix."""
        G = np.abs(self.gram())
        np.fill_diagonal(G, 0.0)
        return float(G.max()) if self.L_pool > 1 else 0.0

    def subset(self, L_pool: int) -> "PreamblePool":
        """The first ``L_pool`` preambles of this pool."""
        if not 1 <= L_pool <= self.L_pool:
            raise ValueError(f"L_pool must lie in 1..{self.L_pool}, got {L_pool}")
        return PreamblePool(self.C[:, :L_pool], self.kind)


def gen_alltop(t_p: int) -> PreamblePool:
    """Alltop pool: all time shifts and modulations of the cubic-phase chirp.

    Column ``k*t_p + l`` is ``exp(2j*pi*((n-k)^3 + l*n)/t_p) / sqrt(t_p)``,
    giving ``t_p**2`` preambles with pairwise coherence ``1/sqrt(t_p)``.
    """
    if not (t_p >= 5 and is_prime(t_p)):
        raise ValueError(f"Alltop pools need a prime length >= 5, got {t_p}")
    n = np.arange(t_p)
    k = np.repeat(np.arange(t_p), t_p)
    l = np.tile(np.arange(t_p), t_p)
    shifted = (n[:, None] - k[None, :]) % t_p
    phase = (shifted**3 + l[None, :] * n[:, None]) % t_p
    C = np.exp(2j * np.pi * phase / t_p) / math.sqrt(t_p)
    return PreamblePool(C, "alltop")


def gen_zadoff_chu(t_p: int) -> PreamblePool:
    """Zadoff-Chu pool: every root ``1..t_p-1`` with every cyclic shift.

    Same-root shifts are orthogonal, different roots correlate at ``1/sqrt(t_p)``.
    """
    if not (t_p >= 3 and is_prime(t_p)):
        raise ValueError(f"Zadoff-Chu pools need an odd prime length, got {t_p}")
    n = np.arange(t_p)
    cols = []
    for u in range(1, t_p):
        root = np.exp(-1j * np.pi * u * n * (n + 1) / t_p)
        for shift in range(t_p):
            cols.append(np.roll(root, shift))
    return PreamblePool(np.stack(cols, axis=1) / math.sqrt(t_p), "zadoff-chu")


# -- pool exchange format ------------------------------------------------------------
#
# text:   first line "t_p L_pool", then t_p lines, each holding L_pool complex
#         entries of that row of C as "re im" pairs (%.17g, round-trips exactly)
# binary: magic b"EPPL", uint32 t_p, uint32 L_pool (little endian), then
#         t_p*L_pool complex128 little-endian values, row-major

_MAGIC = b"EPPL"


def save_pool(pool: PreamblePool, path, fmt: str = "text") -> None:
    path = Path(path)
    if fmt == "binary":
        with path.open("wb") as fh:
            fh.write(_MAGIC + struct.pack("<II", pool.t_p, pool.L_pool))
            fh.write(pool.C.astype("<c16").tobytes(order="C"))
    elif fmt == "text":
        lines = [f"{pool.t_p} {pool.L_pool}"]
        for row in pool.C:
            lines.append(" ".join(f"{z.real:.17g} {z.imag:.17g}" for z in row))
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown pool format {fmt!r}")


def load_pool(path, fmt: str | None = None) -> PreamblePool:
    path = Path(path)
    raw = path.read_bytes()
    if fmt is None:
        fmt = "binary" if raw[:4] == _MAGIC else "text"
    if fmt == "binary":
        if raw[:4] != _MAGIC:
            raise ValueError("not a binary pool file")
        t_p, L_pool = struct.unpack("<II", raw[4:12])
        data = np.frombuffer(raw[12:], dtype="<c16")
        if data.size != t_p * L_pool:
            raise ValueError(f"expected {t_p * L_pool} entries, found {data.size}")
        return PreamblePool(data.reshape(t_p, L_pool).astype(np.complex128))
    lines = raw.decode().split("\n")
    t_p, L_pool = (int(v) for v in lines[0].split())
    rows = []
    for line in lines[1 : 1 + t_p]:
        vals = np.array(line.split(), dtype=np.float64)
        if vals.size != 2 * L_pool:
            raise ValueError(f"row has {vals.size // 2} entries, expected {L_pool}")
        rows.append(vals[0::2] + 1j * vals[1::2])
    if len(rows) != t_p:
        raise ValueError(f"expected {t_p} rows, found {len(rows)}")
    return PreamblePool(np.array(rows))


# -- observations ---------------------------------------------------------------------


@dataclass
class ChannelObservation:
    y: np.ndarray
    true_multiplicity: dict[int, int] = field(default_factory=dict)

    @property
    def true_support(self) -> frozenset[int]:
        return frozenset(self.true_multiplicity)


def power_controlled_gain(h, snr_db: float, n0: float = 1.0):
    """Received amplitude ``h*sqrt(P)`` with P chosen so that ``|h|^2 P / n0`` hits the target SNR."""
    h = np.asarray(h)
    P = 10.0 ** (snr_db / 10.0) * n0 / np.abs(h) ** 2
    return h * np.sqrt(P)


def draw_rayleigh(rng: np.random.Generator, size) -> np.ndarray:
    """Unit-variance circularly-symmetric complex Gaussian channel gains."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / math.sqrt(2.0)


def complex_noise(rng: np.random.Generator, shape, n0: float) -> np.ndarray:
    if n0 == 0:
        return np.zeros(shape, dtype=np.complex128)
    return math.sqrt(n0 / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize_observation(pool: PreamblePool, choices, n0: float, rng: np.random.Generator | None = None):
    """Received preamble-phase signal on one channel.

    ``choices`` is a sequence of ``(preamble_index, h, P)`` triples, one per
    user.  Noise is circularly-symmetric complex Gaussian with per-entry
    variance ``n0``; ``rng`` may be omitted when ``n0 == 0``.
    """
    y = np.zeros(pool.t_p, dtype=np.complex128)
    mult: dict[int, int] = {}
    for idx, h, P in choices:
        idx = int(idx)
        if not 0 <= idx < pool.L_pool:
            raise IndexError(f"preamble index {idx} outside pool of {pool.L_pool}")
        y += h * math.sqrt(P) * pool.C[:, idx]
        mult[idx] = mult.get(idx, 0) + 1
    if n0 > 0:
        if rng is None:
            raise ValueError("an rng is required when n0 > 0")
        y += complex_noise(rng, pool.t_p, n0)
    return ChannelObservation(y, mult)


# -- sparse recovery ------------------------------------------------------------------


@dataclass
class SparseEstimate:
    support: tuple[int, ...]
    coefficients: np.ndarray
    residual_energy: float
    trace: list[float]

    def as_dict(self) -> dict[int, complex]:
        return dict(zip(self.support, self.coefficients))


def default_threshold(t_p: int, n0: float = 1.0, factor: float = 2.0) -> float:
    return factor * t_p * n0


def default_k_max(t_p: int) -> int:
    return t_p // 2


def omp_batch(C: np.ndarray, Y: np.ndarray, tau: float, k_max: int):
    """Orthogonal matching pursuit on every row of ``Y`` at once.

    Returns ``(support, coefs, n_sel, trace)``: ``support`` is ``(B, k_max)``
    padded with -1, ``n_sel`` the support sizes and ``trace`` the residual
    energy after each iteration (NaN once a row has stopped).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.complex128))
    B, t_p = Y.shape
    if C.shape[0] != t_p:
        raise ValueError(f"observation length {t_p} does not match pool length {C.shape[0]}")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not 0 <= k_max <= t_p - 1:
        raise ValueError(f"k_max must lie in 0..{t_p - 1}, got {k_max}")
    support = np.full((B, k_max), -1, dtype=np.int64)
    coefs = np.zeros((B, k_max), dtype=np.complex128)
    n_sel = np.zeros(B, dtype=np.int64)
    trace = np.full((B, k_max + 1), np.nan)
    for start in range(0, B, _OMP_CHUNK):
        sl = slice(start, min(start + _OMP_CHUNK, B))
        _omp_chunk(C, Y[sl], tau, k_max, support[sl], coefs[sl], n_sel[sl], trace[sl])
    return support, coefs, n_sel, trace


def _omp_chunk(C, Y, tau, k_max, support, coefs, n_sel, trace):
    Ct = C.T
    Cc = C.conj()
    R = Y.copy()
    energy = np.sum(np.abs(R) ** 2, axis=1)
    trace[:, 0] = energy
    active = energy > tau
    for it in range(k_max):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        corr = np.abs(R[rows] @ Cc)
        if it:
            np.put_along_axis(corr, support[rows, :it], -1.0, axis=1)
        support[rows, it] = np.argmax(corr, axis=1)
        A = Ct[support[rows, : it + 1]].transpose(0, 2, 1)  # (rows, t_p, it+1)
        AH = A.conj().transpose(0, 2, 1)
        x = np.linalg.solve(AH @ A, AH @ Y[rows][:, :, None])
        R[rows] = Y[rows] - (A @ x)[:, :, 0]
        coefs[rows, : it + 1] = x[:, :, 0]
        n_sel[rows] = it + 1
        e = np.sum(np.abs(R[rows]) ** 2, axis=1)
        trace[rows, it + 1] = e
        active[rows] = e > tau


def beam_pursuit(C: np.ndarray, y: np.ndarray, tau: float, k_max: int, width: int = 32):
    """Multipath orthogonal least squares: a beam of the ``width`` best supports per size.

    Each support keeps an orthonormal basis of its span, so the residual energy
    after adding any atom is known exactly without refitting.  The search
    stops at the smallest size whose best support leaves at most ``tau``.
    Returns ``(support, trace)`` with trace the best energy per size.
    """
    y = np.asarray(y, dtype=np.complex128)
    t_p, L = C.shape
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not 0 <= k_max <= t_p - 1:
        raise ValueError(f"k_max must lie in 0..{t_p - 1}, got {k_max}")
    e0 = float(np.vdot(y, y).real)
    trace = [e0]
    if e0 <= tau or k_max == 0:
        return (), trace
    Cc = C.conj()
    supports = [()]
    Q = np.zeros((1, t_p, 0), dtype=np.complex128)
    R = y[None, :].copy()
    E = np.array([e0])
    for size in range(1, k_max + 1):
        corr2 = np.abs(R @ Cc) ** 2  # (B, L)
        proj = Q.conj().transpose(0, 2, 1) @ C  # (B, size-1, L)
        left = 1.0 - np.sum(np.abs(proj) ** 2, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            child = E[:, None] - np.where(left > 1e-10, corr2 / left, -np.inf)
        for b, sup in enumerate(supports):
            child[b, list(sup)] = np.inf
        flat = child.ravel()
        n_take = min(flat.size, width * size)
        cand = np.argpartition(flat, n_take - 1)[:n_take]
        cand = cand[np.argsort(flat[cand], kind="stable")]
        picked, seen = [], set()
        for f in cand:
            if not np.isfinite(flat[f]):
                break
            b, j = divmod(int(f), L)
            key = frozenset(supports[b]) | {j}
            if key in seen:
                continue
            seen.add(key)
            picked.append((b, j))
            if len(picked) == width:
                break
        if not picked:
            break
        pb = np.array([b for b, _ in picked])
        pj = np.array([j for _, j in picked])
        Qp = Q[pb]
        c = C[:, pj].T  # (B', t_p)
        q = c - (Qp @ (Qp.conj().transpose(0, 2, 1) @ c[:, :, None]))[:, :, 0]
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        Rp = R[pb]
        Rp = Rp - q * np.sum(q.conj() * Rp, axis=1, keepdims=True)
        supports = [supports[b] + (j,) for b, j in picked]
        Q = np.concatenate([Qp, q[:, :, None]], axis=2)
        R = Rp
        E = np.sum(np.abs(R) ** 2, axis=1)
        best = int(np.argmin(E))
        trace.append(float(E[best]))
        if E[best] <= tau:
            return supports[best], trace
    best = int(np.argmin(E))
    return supports[best], trace


def estimate_sparse(pool: PreamblePool, y, tau: float, k_max: int | None = None,
                    method: str = "omp", width: int = 32) -> SparseEstimate:
    """Greedy support recovery with a least-squares refit after every selection.

    ``method="omp"`` runs orthogonal matching pursuit; ``method="beam"`` runs
    :func:`beam_pursuit`.  Both stop once the residual energy drops to ``tau``
    or the support reaches ``k_max``.
    """
    if k_max is None:
        k_max = default_k_max(pool.t_p)
    y = np.asarray(y, dtype=np.complex128)
    if method == "omp":
        support, coefs, n_sel, trace = omp_batch(pool.C, y[None, :], tau, k_max)
        k = int(n_sel[0])
        tr = [float(v) for v in trace[0, : k + 1]]
        return SparseEstimate(tuple(int(j) for j in support[0, :k]), coefs[0, :k].copy(), tr[-1], tr)
    if method != "beam":
        raise ValueError(f"unknown method {method!r}")
    sup, tr = beam_pursuit(pool.C, y, tau, k_max, width)
    sup = tuple(sorted(int(j) for j in sup))
    if sup:
        coefs = np.linalg.lstsq(pool.C[:, list(sup)], y, rcond=None)[0]
    else:
        coefs = np.zeros(0, dtype=np.complex128)
    return SparseEstimate(sup, coefs, tr[-1], tr)


def estimate_active_count(est: SparseEstimate) -> int:
    """Number of distinct preambles detected; blind to several users sharing one."""
    return len(est.support)


def detect_counts(pool: PreamblePool, Y, tau: float, k_max: int, method: str = "beam",
                  width: int = 32) -> np.ndarray:
    """Estimated active-user count for each row of ``Y``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.complex128))
    if method == "omp":
        return omp_batch(pool.C, Y, tau, k_max)[2]
    # a single atom is the same under both searches: best correlation == best energy drop
    counts = omp_batch(pool.C, Y, tau, k_max)[2]
    for i in np.flatnonzero(counts > 1):
        counts[i] = len(beam_pursuit(pool.C, Y[i], tau, k_max, width)[0])
    return counts


# -- preamble collision statistics ----------------------------------------------------


def _draw_users(K_dist, n_trials, rng):
    if isinstance(K_dist, (int, np.integer)):
        return np.full(n_trials, int(K_dist), dtype=np.int64)
    kind, value = K_dist
    if kind == "fixed":
        return np.full(n_trials, int(value), dtype=np.int64)
    if kind == "poisson":
        return rng.poisson(value, n_trials).astype(np.int64)
    raise ValueError(f"unknown user-count distribution {K_dist!r}")


def channel_collision_flags(K, M: int, L_pool: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(n, M)`` array: did two users share a preamble on that channel?"""
    K = np.asarray(K, dtype=np.int64)
    n = K.size
    trial = np.repeat(np.arange(n), K)
    ch = rng.integers(0, M, size=trial.size)
    pre = rng.integers(0, L_pool, size=trial.size)
    cell = trial * M + ch
    key = np.sort(cell * L_pool + pre)
    dup = key[1:][key[1:] == key[:-1]] // L_pool
    flags = np.zeros(n * M, dtype=bool)
    flags[dup] = True
    return flags.reshape(n, M)


def empirical_collision_rate(K_dist, M: int, L_pool: int, n_trials: int, rng: np.random.Generator,
                             block: int = 1 << 15) -> tuple[float, float]:
    """Fraction of (trial, channel) pairs with a preamble collision, and its standard error.

    ``K_dist`` is an integer (fixed users per slot), ``("fixed", K)`` or
    ``("poisson", lam)``.  The standard error treats trials as the
    independent unit, so within-slot correlation between channels is honoured.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    per_trial = np.empty(n_trials)
    for start in range(0, n_trials, block):
        n = min(block, n_trials - start)
        K = _draw_users(K_dist, n, rng)
        per_trial[start : start + n] = channel_collision_flags(K, M, L_pool, rng).mean(axis=1)
    mean = float(per_trial.mean())
    se = float(per_trial.std(ddof=1) / math.sqrt(n_trials)) if n_trials > 1 else 0.0
    return mean, se
