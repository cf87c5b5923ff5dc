"""Command line entry point: ``ep-aloha {analytic,run,figures,oracle}``.

Flags ``--seed``, ``--trials``, ``--threads``, ``--fidelity`` and ``--format``
may also be set through ``EP_ALOHA_SEED``, ``EP_ALOHA_TRIALS``,
``EP_ALOHA_THREADS``, ``EP_ALOHA_FIDELITY`` and ``EP_ALOHA_FORMAT``; an
explicit flag wins over the environment, which wins over the experiment file.

Errors are reported as one JSON line on stderr, e.g.
``{"error": "config", "message": "unknown key(s) for kind fig1: foo"}``,
with exit status 2 (config) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import analytic
from .experiments import ConfigError, RunOptions, default_specs, load_spec, run_spec, write_outputs
from .mc_engine import brute_force_conventional, brute_force_ep

ENV_PREFIX = "EP_ALOHA_"

# name -> (function, [(arg, type)], optional mode flag)
_FORMULAS = {
    "known-k": (analytic.single_channel_throughput_known_k, [("K", int)], False),
    "blind": (analytic.single_channel_throughput_blind, [("p", float), ("lam", float)], False),
    "conventional": (analytic.conventional_throughput, [("K", float), ("M", int)], True),
    "group1": (analytic.expected_group1, [("K", float), ("M", int)], False),
    "bound": (analytic.ep_throughput_upper_bound, [("K", float), ("M", int)], False),
    "ep-exact": (analytic.ep_throughput_exact, [("K", int), ("M", int)], False),
    "gain": (analytic.exploration_gain, [], False),
    "access": (analytic.access_probability, [("L_free", int), ("W", int)], False),
    "overhead": (lambda t_p, t_d, t_f: analytic.overhead_factor(analytic.TimingProfile(t_p, t_d, t_f)),
                 [("t_p", int), ("t_d", int), ("t_f", int)], False),
    "no-collision": (analytic.no_preamble_collision_prob, [("k_m", int), ("L_pool", int)], True),
    "avg-collision": (analytic.avg_preamble_collision_prob, [("lam", float), ("M", int), ("L_pool", int)],
                      False),
    "pool-size": (analytic.required_pool_size, [("lam", float), ("M", int), ("delta", float)], False),
    "feedback-bits": (analytic.feedback_bits, [("M", int), ("max_k", int), ("max_W", int)], False),
}


def _env(name, cast):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return None
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"environment variable {ENV_PREFIX + name.upper()}={raw!r} is invalid") from None


def _resolve(args, name, cast):
    val = getattr(args, name, None)
    return val if val is not None else _env(name, cast)


def _add_run_flags(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--fidelity", choices=("ideal", "physical"))
    p.add_argument("--format", choices=("csv",))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ep-aloha",
                                     description="Multichannel ALOHA with an exploration phase.")
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analytic", help="evaluate one closed-form expression")
    fsub = pa.add_subparsers(dest="formula", required=True)
    for name, (_, params, has_mode) in _FORMULAS.items():
        fp = fsub.add_parser(name)
        for arg, typ in params:
            fp.add_argument(arg, type=typ)
        if has_mode:
            fp.add_argument("--mode", choices=("exact", "approx"), default="exact")

    pr = sub.add_parser("run", help="run an experiment file")
    pr.add_argument("spec_file")
    pr.add_argument("--out", help="output CSV path (default: stdout)")
    pr.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script next to --out")
    _add_run_flags(pr)

    pf = sub.add_parser("figures", help="regenerate every figure's data")
    pf.add_argument("which", choices=("all",))
    pf.add_argument("--out", required=True)
    _add_run_flags(pf)

    po = sub.add_parser("oracle", help="exact enumeration for small K, M")
    po.add_argument("K", type=int)
    po.add_argument("M", type=int)
    return parser


def _cmd_analytic(args):
    fn, params, has_mode = _FORMULAS[args.formula]
    vals = [getattr(args, a) for a, _ in params]
    kwargs = {"mode": args.mode} if has_mode else {}
    out = fn(*vals, **kwargs)
    if isinstance(out, tuple):
        print(" ".join(str(v) for v in out))
    else:
        print(repr(out))


def _options(args):
    threads = _resolve(args, "threads", int) or os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    fidelity = _resolve(args, "fidelity", str)
    if fidelity not in (None, "ideal", "physical"):
        raise ConfigError(f"fidelity must be ideal or physical, got {fidelity!r}")
    fmt = _resolve(args, "format", str) or "csv"
    if fmt != "csv":
        raise ConfigError(f"unsupported format {fmt!r}")
    return RunOptions(threads=threads, fidelity=fidelity)


def _apply_overrides(spec, args):
    seed = _resolve(args, "seed", int)
    trials = _resolve(args, "trials", int)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        spec.seed = seed
    if trials is not None:
        if trials < 1:
            raise ConfigError("trials must be >= 1")
        spec.trials = trials
    return spec


def _cmd_run(args):
    opts = _options(args)
    spec = _apply_overrides(load_spec(args.spec_file), args)
    table = run_spec(spec, opts)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table.to_csv())
        if args.gnuplot:
            from .experiments import gnuplot_script
            out.with_suffix(".gp").write_text(gnuplot_script(spec, out.name))
    else:
        sys.stdout.write(table.to_csv())


def _cmd_figures(args):
    opts = _options(args)
    seed = _resolve(args, "seed", int)
    trials = _resolve(args, "trials", int)
    for spec in default_specs(trials or 10_000, 1 if seed is None else seed):
        table = run_spec(spec, opts)
        csv_path, _ = write_outputs(spec, table, args.out)
        print(csv_path)


def _cmd_oracle(args):
    ep = brute_force_ep(args.K, args.M)
    conv = brute_force_conventional(args.K, args.M)
    print(f"K={args.K} M={args.M}")
    print(f"exploration   {ep} = {float(ep)!r}")
    print(f"conventional  {conv} = {float(conv)!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"analytic": _cmd_analytic, "run": _cmd_run, "figures": _cmd_figures, "oracle": _cmd_oracle}
    try:
        handlers[args.command](args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
