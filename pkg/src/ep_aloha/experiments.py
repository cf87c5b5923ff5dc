"""Experiment specs, grid sweeps and CSV/gnuplot output.

An experiment is a YAML mapping.  Keys common to every kind:

``name``      identifier used for output file names (required)
``kind``      one of :data:`KINDS` (required)
``seed``      64-bit integer (required for Monte Carlo kinds)
``trials``    Monte Carlo slots per grid point (default 10000)

Kind-specific keys:

``fig1``                            ``K``: grid of user counts
``pool_sizing``                     ``alpha``: grid, ``delta``, ``M``
``throughput_vs_M_fixed_lambda``    ``M``: grid, ``lambda``, optional ``fidelity``, ``physical``, ``timing``
``throughput_vs_M_fixed_alpha``     ``M``: grid, ``alpha``, optional ``fidelity``, ``physical``, ``timing``
``gain_sweep``                      ``M``, ``K``: grid
``custom``                          ``M``: grid, and ``lambda`` (Poisson) or ``K`` (fixed) grid,
                                    optional ``fidelity``, ``physical``, ``timing``

A grid is a list of numbers or ``{start, stop, step}`` (stop inclusive).
``fidelity`` is ``ideal`` (default) or ``physical``; ``physical`` takes
``t_p`` (prime, default 11), ``L_pool`` (default t_p**2), ``snr_db``
(default 20), ``tau_factor`` (default 2), ``width`` (default 32).
``timing`` takes ``t_p``, ``t_d``, ``t_f``.  Unknown keys are rejected.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analytic
from .mc_engine import FixedK, PhysicalFidelity, PoissonLoad, SlotConfig, run_experiment, summarize
from .preamble import channel_collision_flags, gen_alltop

KINDS = (
    "fig1",
    "pool_sizing",
    "throughput_vs_M_fixed_lambda",
    "throughput_vs_M_fixed_alpha",
    "gain_sweep",
    "custom",
)

_COMMON = {"name", "kind", "seed", "trials"}
_KIND_KEYS = {
    "fig1": {"K"},
    "pool_sizing": {"alpha", "delta", "M"},
    "throughput_vs_M_fixed_lambda": {"M", "lambda", "fidelity", "physical", "timing"},
    "throughput_vs_M_fixed_alpha": {"M", "alpha", "fidelity", "physical", "timing"},
    "gain_sweep": {"M", "K"},
    "custom": {"M", "lambda", "K", "fidelity", "physical", "timing"},
}
_REQUIRED = {
    "fig1": {"K"},
    "pool_sizing": {"alpha", "delta", "M", "seed"},
    "throughput_vs_M_fixed_lambda": {"M", "lambda", "seed"},
    "throughput_vs_M_fixed_alpha": {"M", "alpha", "seed"},
    "gain_sweep": {"M", "K", "seed"},
    "custom": {"M", "seed"},
}
_PHYSICAL_KEYS = {"t_p", "L_pool", "snr_db", "tau_factor", "width"}
_TIMING_KEYS = {"t_p", "t_d", "t_f"}

COLUMNS = {
    "fig1": ("K", "eta_sa", "inv_e"),
    "pool_sizing": ("alpha", "lambda", "M", "L_required", "collision_analytic", "collision_mc",
                    "collision_stderr"),
    "throughput": ("M", "lambda", "conv_mean", "conv_stderr", "ep_mean", "ep_stderr", "gap",
                   "gap_stderr", "conv_analytic", "ep_bound", "ep_effective_mean"),
    "gain_sweep": ("K", "conv_mean", "conv_stderr", "ep_mean", "ep_stderr", "ratio", "ratio_stderr"),
    "custom": ("M", "load_kind", "load", "conv_mean", "conv_stderr", "ep_mean", "ep_stderr"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    params: dict
    seed: int | None = None
    trials: int = 10_000

    @property
    def columns(self) -> tuple[str, ...]:
        key = "throughput" if self.kind.startswith("throughput_vs_M") else self.kind
        return COLUMNS[key]


@dataclass
class RunOptions:
    threads: int = 1
    fidelity: str | None = None  # overrides the spec when set


@dataclass
class ResultTable:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in self.columns])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


# -- config parsing ------------------------------------------------------------------


def parse_grid(value, what: str, integer: bool = False) -> list:
    if isinstance(value, dict):
        extra = set(value) - {"start", "stop", "step"}
        if extra or not {"start", "stop"} <= set(value):
            raise ConfigError(f"{what}: a range needs start, stop and optional step, got {sorted(value)}")
        start, stop, step = value["start"], value["stop"], value.get("step", 1)
        if step <= 0:
            raise ConfigError(f"{what}: step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        vals = [start + i * step for i in range(max(n, 0))]
        if not integer:
            vals = [round(v, 12) for v in vals]
    elif isinstance(value, (list, tuple)):
        vals = list(value)
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        vals = [value]
    else:
        raise ConfigError(f"{what}: expected a number, list or range, got {value!r}")
    if not vals:
        raise ConfigError(f"{what}: grid is empty")
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{what}: non-numeric grid entry {v!r}")
        if integer and int(v) != v:
            raise ConfigError(f"{what}: expected integers, got {v!r}")
    return [int(v) for v in vals] if integer else [float(v) for v in vals]


def spec_from_dict(d: dict) -> ExperimentSpec:
    if not isinstance(d, dict):
        raise ConfigError("experiment file must hold a mapping")
    kind = d.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {kind!r}")
    unknown = set(d) - _COMMON - _KIND_KEYS[kind]
    if unknown:
        raise ConfigError(f"unknown key(s) for kind {kind}: {', '.join(sorted(unknown))}")
    if "name" not in d or not str(d["name"]).strip():
        raise ConfigError("missing key: name")
    missing = _REQUIRED[kind] - set(d)
    if missing:
        raise ConfigError(f"missing key(s) for kind {kind}: {', '.join(sorted(missing))}")
    seed = d.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64):
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    trials = d.get("trials", 10_000)
    if not isinstance(trials, int) or isinstance(trials, bool) or trials < 1:
        raise ConfigError(f"trials must be an integer >= 1, got {trials!r}")
    params = {k: v for k, v in d.items() if k not in _COMMON}
    _validate_params(kind, params)
    return ExperimentSpec(str(d["name"]), kind, params, seed, trials)


def _validate_params(kind, p):
    if "M" in p:
        if kind in ("pool_sizing", "gain_sweep"):
            p["M"] = parse_grid(p["M"], "M", integer=True)
            if len(p["M"]) != 1:
                raise ConfigError("M must be a single integer for this kind")
            p["M"] = p["M"][0]
        else:
            p["M"] = parse_grid(p["M"], "M", integer=True)
        ms = p["M"] if isinstance(p["M"], list) else [p["M"]]
        if min(ms) < 1:
            raise ConfigError("M must be >= 1")
    if "K" in p:
        p["K"] = parse_grid(p["K"], "K", integer=True)
        if min(p["K"]) < (1 if kind == "fig1" else 0):
            raise ConfigError("K out of range")
        if kind == "fig1" and max(p["K"]) > 10**6:
            raise ConfigError("fig1: K must lie in 1..1e6")
    if "alpha" in p:
        if kind == "throughput_vs_M_fixed_alpha":
            p["alpha"] = _positive(p["alpha"], "alpha")
        else:
            p["alpha"] = parse_grid(p["alpha"], "alpha")
            if not all(0 < a <= 1 for a in p["alpha"]):
                raise ConfigError("alpha grid must lie in (0, 1]")
    if "lambda" in p:
        if kind == "custom":
            p["lambda"] = parse_grid(p["lambda"], "lambda")
            if min(p["lambda"]) <= 0:
                raise ConfigError("lambda must be > 0")
        else:
            p["lambda"] = _positive(p["lambda"], "lambda")
    if kind == "custom" and ("lambda" in p) == ("K" in p):
        raise ConfigError("custom: give exactly one of lambda or K")
    if "delta" in p:
        d = p["delta"]
        if not isinstance(d, (int, float)) or not 0 < d < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {d!r}")
    if "fidelity" in p and p["fidelity"] not in ("ideal", "physical"):
        raise ConfigError(f"fidelity must be ideal or physical, got {p['fidelity']!r}")
    if "physical" in p:
        if not isinstance(p["physical"], dict):
            raise ConfigError("physical must be a mapping")
        extra = set(p["physical"]) - _PHYSICAL_KEYS
        if extra:
            raise ConfigError(f"unknown key(s) in physical: {', '.join(sorted(extra))}")
    if "timing" in p:
        t = p["timing"]
        if not isinstance(t, dict) or set(t) != _TIMING_KEYS:
            raise ConfigError("timing needs exactly t_p, t_d, t_f")
        try:
            p["timing"] = analytic.TimingProfile(t["t_p"], t["t_d"], t["t_f"])
        except ValueError as exc:
            raise ConfigError(f"timing: {exc}") from None


def _positive(v, what):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
        raise ConfigError(f"{what} must be a positive number, got {v!r}")
    return float(v)


def load_spec(path) -> ExperimentSpec:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return spec_from_dict(data)


# -- seeds and fidelity ----------------------------------------------------------------


def point_seed(seed: int, *tags: int) -> int:
    """Independent 64-bit seed for one grid point and protocol."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, np.uint64)[0])


def make_fidelity(spec_params: dict, override: str | None):
    mode = override or spec_params.get("fidelity", "ideal")
    if mode == "ideal":
        return None
    if mode != "physical":
        raise ConfigError(f"fidelity must be ideal or physical, got {mode!r}")
    phys = dict(spec_params.get("physical") or {})
    t_p = phys.get("t_p", 11)
    try:
        pool = gen_alltop(t_p)
    except ValueError as exc:
        raise ConfigError(f"physical: {exc}") from None
    L_pool = phys.get("L_pool", pool.L_pool)
    if not isinstance(L_pool, int) or not 1 <= L_pool <= pool.L_pool:
        raise ConfigError(f"physical.L_pool must lie in 1..{pool.L_pool}")
    return PhysicalFidelity(pool.subset(L_pool), snr_db=float(phys.get("snr_db", 20.0)),
                            tau_factor=float(phys.get("tau_factor", 2.0)), width=int(phys.get("width", 32)))


# -- experiment kinds --------------------------------------------------------------------


def run_fig_gap_sa(Ks) -> ResultTable:
    table = ResultTable(COLUMNS["fig1"])
    for K in Ks:
        table.rows.append({"K": K, "eta_sa": analytic.single_channel_throughput_known_k(K),
                           "inv_e": analytic.INV_E})
    return table


def run_pool_sizing(alphas, delta: float, M: int, trials: int, seed: int) -> ResultTable:
    """Required pool size per load and the collision rate simulated at that size."""
    table = ResultTable(COLUMNS["pool_sizing"])
    for i, a in enumerate(alphas):
        lam = a * M
        L = analytic.required_pool_size(lam, M, delta)
        rng = np.random.Generator(np.random.Philox(key=point_seed(seed, i, 2)))
        per_trial = np.empty(trials)
        for start in range(0, trials, 1 << 15):
            n = min(1 << 15, trials - start)
            K = rng.poisson(lam, n)
            per_trial[start:start + n] = channel_collision_flags(K, M, L, rng).mean(axis=1)
        mean, se = summarize(per_trial)
        table.rows.append({"alpha": a, "lambda": lam, "M": M, "L_required": L,
                           "collision_analytic": analytic.avg_preamble_collision_prob(lam, M, L),
                           "collision_mc": mean, "collision_stderr": se})
    return table


def _pair(M, arrival, trials, seed, idx, fidelity=None, timing=None, threads=1):
    conv = run_experiment(SlotConfig(M, arrival, "conventional", None, point_seed(seed, idx, 0)),
                          trials, threads=threads)
    ep = run_experiment(SlotConfig(M, arrival, "ep", fidelity, point_seed(seed, idx, 1)),
                        trials, timing=timing, threads=threads)
    return conv, ep


def run_throughput_vs_M(Ms, trials: int, seed: int, lam: float | None = None, alpha: float | None = None,
                        fidelity=None, timing=None, threads: int = 1) -> ResultTable:
    """Both protocols under Poisson load across a grid of channel counts.

    Exactly one of ``lam`` (fixed load) or ``alpha`` (load per channel) is given.
    """
    if (lam is None) == (alpha is None):
        raise ValueError("give exactly one of lam or alpha")
    table = ResultTable(COLUMNS["throughput"])
    for i, M in enumerate(Ms):
        load = lam if lam is not None else alpha * M
        conv, ep = _pair(M, PoissonLoad(load), trials, seed, i, fidelity, timing, threads)
        table.rows.append({
            "M": M, "lambda": load,
            "conv_mean": conv.mean, "conv_stderr": conv.stderr,
            "ep_mean": ep.mean, "ep_stderr": ep.stderr,
            "gap": ep.mean - conv.mean, "gap_stderr": math.hypot(conv.stderr, ep.stderr),
            "conv_analytic": analytic.conventional_throughput(load, M, "approx"),
            "ep_bound": analytic.ep_throughput_upper_bound(load, M),
            "ep_effective_mean": ep.effective_mean,
        })
    return table


def run_gain_sweep(M: int, Ks, trials: int, seed: int, threads: int = 1) -> ResultTable:
    """Both protocols at fixed user counts; the footer row holds the ratio of the maxima."""
    table = ResultTable(COLUMNS["gain_sweep"])
    for i, K in enumerate(Ks):
        conv, ep = _pair(M, FixedK(K), trials, seed, i, threads=threads)
        table.rows.append({"K": K, "conv_mean": conv.mean, "conv_stderr": conv.stderr,
                           "ep_mean": ep.mean, "ep_stderr": ep.stderr})
    c = max(table.rows, key=lambda r: r["conv_mean"])
    e = max(table.rows, key=lambda r: r["ep_mean"])
    ratio = e["ep_mean"] / c["conv_mean"] if c["conv_mean"] > 0 else math.nan
    ratio_se = ratio * math.hypot(e["ep_stderr"] / e["ep_mean"], c["conv_stderr"] / c["conv_mean"]) \
        if c["conv_mean"] > 0 and e["ep_mean"] > 0 else math.nan
    table.rows.append({"K": "max", "conv_mean": c["conv_mean"], "conv_stderr": c["conv_stderr"],
                       "ep_mean": e["ep_mean"], "ep_stderr": e["ep_stderr"],
                       "ratio": ratio, "ratio_stderr": ratio_se})
    return table


def gain_footer(table: ResultTable) -> dict:
    return table.rows[-1]


def run_custom(Ms, trials, seed, lams=None, Ks=None, fidelity=None, threads=1) -> ResultTable:
    table = ResultTable(COLUMNS["custom"])
    loads = [("poisson", v) for v in lams] if lams is not None else [("fixed", v) for v in Ks]
    i = 0
    for M in Ms:
        for kind, v in loads:
            arrival = PoissonLoad(v) if kind == "poisson" else FixedK(v)
            conv, ep = _pair(M, arrival, trials, seed, i, fidelity, threads=threads)
            table.rows.append({"M": M, "load_kind": kind, "load": v, "conv_mean": conv.mean,
                               "conv_stderr": conv.stderr, "ep_mean": ep.mean, "ep_stderr": ep.stderr})
            i += 1
    return table


def run_spec(spec: ExperimentSpec, opts: RunOptions | None = None) -> ResultTable:
    opts = opts or RunOptions()
    p = spec.params
    if spec.kind == "fig1":
        return run_fig_gap_sa(p["K"])
    if spec.seed is None:
        raise ConfigError("missing key: seed")
    if spec.kind == "pool_sizing":
        return run_pool_sizing(p["alpha"], p["delta"], p["M"], spec.trials, spec.seed)
    if spec.kind == "gain_sweep":
        return run_gain_sweep(p["M"], p["K"], spec.trials, spec.seed, opts.threads)
    fid = make_fidelity(p, opts.fidelity)
    if spec.kind == "custom":
        return run_custom(p["M"], spec.trials, spec.seed, p.get("lambda"), p.get("K"), fid, opts.threads)
    key = "lam" if spec.kind.endswith("lambda") else "alpha"
    val = p["lambda"] if key == "lam" else p["alpha"]
    return run_throughput_vs_M(p["M"], spec.trials, spec.seed, fidelity=fid, timing=p.get("timing"),
                               threads=opts.threads, **{key: val})


# -- figures ------------------------------------------------------------------------------


def default_specs(trials: int, seed: int) -> list[ExperimentSpec]:
    """The experiments behind every figure, at ``trials`` slots per point."""
    raw = [
        {"name": "fig1_gap_sa", "kind": "fig1",
         "K": sorted({int(round(v)) for v in np.logspace(0, 6, 61)})},
        {"name": "fig3_pool_sizing", "kind": "pool_sizing", "alpha": {"start": 0.1, "stop": 1.0, "step": 0.1},
         "delta": 0.01, "M": 10},
        {"name": "fig4_fixed_lambda", "kind": "throughput_vs_M_fixed_lambda",
         "M": {"start": 20, "stop": 100, "step": 5}, "lambda": 20},
        {"name": "fig5_fixed_alpha", "kind": "throughput_vs_M_fixed_alpha",
         "M": {"start": 10, "stop": 100, "step": 10}, "alpha": 0.8},
        {"name": "gain_M50", "kind": "gain_sweep", "M": 50, "K": {"start": 25, "stop": 100, "step": 1}},
    ]
    specs = []
    for d in raw:
        if d["kind"] != "fig1":
            d = {**d, "trials": trials, "seed": seed}
        specs.append(spec_from_dict(d))
    return specs


_GNUPLOT = {
    "fig1": ('set logscale x\nset xlabel "K"\nset ylabel "throughput"\n'
             'plot "{csv}" using 1:2 with lines title "known K", "" using 1:3 with lines title "1/e"\n'),
    "pool_sizing": ('set xlabel "lambda/M"\nset ylabel "L"\nset y2label "collision probability"\n'
                    'set y2tics\nplot "{csv}" using 1:4 with linespoints title "L required", '
                    '"" using 1:6:7 axes x1y2 with yerrorbars title "collision (MC)"\n'),
    "throughput": ('set xlabel "M"\nset ylabel "throughput"\n'
                   'plot "{csv}" using 1:3:4 with yerrorlines title "conventional", '
                   '"" using 1:5:6 with yerrorlines title "with exploration", '
                   '"" using 1:10 with lines title "bound"\n'),
    "gain_sweep": ('set xlabel "K"\nset ylabel "throughput"\n'
                   'plot "< head -n -1 {csv}" using 1:2:3 with yerrorlines title "conventional", '
                   '"" using 1:4:5 with yerrorlines title "with exploration"\n'),
    "custom": ('set xlabel "M"\nset ylabel "throughput"\n'
               'plot "{csv}" using 1:4 title "conventional", "" using 1:6 title "with exploration"\n'),
}


def gnuplot_script(spec: ExperimentSpec, csv_name: str) -> str:
    key = "throughput" if spec.kind.startswith("throughput_vs_M") else spec.kind
    head = (f'set datafile separator ","\nset key autotitle columnhead\n'
            f'set terminal pngcairo size 800,600\nset output "{spec.name}.png"\n')
    return head + _GNUPLOT[key].format(csv=csv_name)


def write_outputs(spec: ExperimentSpec, table: ResultTable, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{spec.name}.csv"
    csv_path.write_text(table.to_csv())
    gp_path = out_dir / f"{spec.name}.gp"
    gp_path.write_text(gnuplot_script(spec, csv_path.name))
    return csv_path, gp_path
