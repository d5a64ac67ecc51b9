"""``mbfsim`` command line.

Subcommands: ``simulate``, ``sweep``, ``occupancy``, ``analytic`` and
``mapek``.  Outputs go to ``--out`` (default stdout).  Exit status is 0 on
success and 2 on a validation error.
"""
from __future__ import annotations

import argparse
import json
import math
import secrets
import sys

from . import analytics as an
from . import io
from .chain import ChainSpec, SpecError, ThresholdPolicy, Variant
from .experiments import DEFAULT_AXIS, DESK, SweepGrid, occupancy, run_sweep
from .mapek import Scenario
from .simulator import SimBudget, TraceError, run_batch, run_one


class UsageError(Exception):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _chain_args(p: argparse.ArgumentParser, need_pq: bool = True) -> None:
    p.add_argument("--variant", default="dtmc", choices=[v.value for v in Variant])
    p.add_argument("--n", type=int)
    if need_pq:
        p.add_argument("--p", type=float, required=True, help="recovery parameter")
        p.add_argument("--q", type=float, required=True, help="infection parameter")
    p.add_argument("--r", type=float, default=None, help="DTMC laziness (default 1-p-q)")
    p.add_argument("--seed-rate", type=float, default=None)


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--start", type=int, default=0)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=int, help="f: states <= f are good")
    g.add_argument("--threshold-frac", type=float, help="f = floor(frac * (n-1))")
    b = p.add_mutually_exclusive_group()
    b.add_argument("--steps", type=int)
    b.add_argument("--time", type=float)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--entropy", action="store_true", help="draw a fresh base seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--preset", choices=["desk"])


def _out_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="-", help="output file ('-' for stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbfsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a batch and print aggregate JSON")
    _chain_args(s)
    _run_args(s)
    _out_arg(s)
    s.add_argument("--trace", help="write the event list of a single run as CSV")
    s.add_argument("--histogram", help="write the pooled occupancy histogram as CSV")

    w = sub.add_parser("sweep", help="p x q grid; CSV one row per cell")
    _chain_args(w, need_pq=False)
    _run_args(w)
    _out_arg(w)
    w.add_argument("--p-values", type=_float_list, default=DEFAULT_AXIS)
    w.add_argument("--q-values", type=_float_list, default=DEFAULT_AXIS)

    o = sub.add_parser("occupancy", help="empirical occupancy next to the stationary law")
    _chain_args(o)
    _run_args(o)
    _out_arg(o)

    a = sub.add_parser("analytic", help="evaluate an analytic formula; prints JSON")
    a.add_argument("op", choices=["hitting", "stationary", "regime", "scaling", "ruin",
                                  "recovery-bound", "infection-bound", "coordinated",
                                  "quantile"])
    a.add_argument("--variant", default="dtmc", choices=[v.value for v in Variant])
    a.add_argument("--n", type=int)
    a.add_argument("--p", type=float)
    a.add_argument("--q", type=float)
    a.add_argument("--r", type=float, default=None)
    a.add_argument("--seed-rate", type=float, default=None)
    a.add_argument("--target", type=int)
    a.add_argument("--start", type=int, default=0)
    a.add_argument("--m", type=int, help="ruin: distance to the upper barrier")
    a.add_argument("--f0", type=float, help="scaling: passage time at r=0")
    a.add_argument("--epsilon", type=float, default=0.01)
    _out_arg(a)

    m = sub.add_parser("mapek", help="run a closed-loop scenario file")
    m.add_argument("scenario", help="JSON scenario file ('-' for stdin)")
    m.add_argument("--seed", type=int, help="override the scenario seed")
    m.add_argument("--intervals", action="store_true", help="include per-interval records")
    _out_arg(m)
    return ap


# -- helpers ----------------------------------------------------------------

def _apply_preset(args) -> None:
    if getattr(args, "preset", None) == "desk":
        if args.n is None:
            args.n = DESK["n"]
        if args.steps is None and args.time is None:
            args.steps = DESK["steps"]
        if args.runs is None:
            args.runs = DESK["runs"]
    if args.runs is None:
        args.runs = 1


def _spec(args, p=None, q=None) -> ChainSpec:
    if args.n is None:
        raise UsageError("--n is required")
    p = args.p if p is None else p
    q = args.q if q is None else q
    variant = Variant.parse(args.variant)
    if variant is Variant.DTMC:
        if args.seed_rate is not None:
            raise UsageError("--seed-rate applies to continuous-time variants only")
        return ChainSpec.dtmc(args.n, p, q, r=args.r)
    if args.r not in (None, 0.0):
        raise UsageError("--r applies to the dtmc variant only")
    return ChainSpec(args.n, variant, p, q, seed_rate=args.seed_rate)


def _policy(args, n: int) -> ThresholdPolicy:
    if args.threshold is not None:
        return ThresholdPolicy(args.threshold).check(n)
    frac = 1 / 3 if args.threshold_frac is None else args.threshold_frac
    return ThresholdPolicy.from_fraction(n, frac).check(n)


def _seed(args) -> int:
    if args.seed is not None:
        if args.entropy:
            raise UsageError("--seed and --entropy are mutually exclusive")
        return args.seed
    if args.entropy:
        seed = secrets.randbits(63)
        print(f"mbfsim: using entropy seed {seed}", file=sys.stderr)
        return seed
    raise UsageError("--seed is required (or pass --entropy)")


def _budget(args, variant: Variant) -> SimBudget:
    seed = _seed(args)
    if variant is Variant.DTMC:
        if args.time is not None:
            raise UsageError("dtmc runs take --steps, not --time")
        if args.steps is None:
            raise UsageError("--steps is required")
        return SimBudget.steps(args.steps, args.runs, seed)
    if args.steps is not None:
        raise UsageError("continuous-time runs take --time, not --steps")
    if args.time is None:
        raise UsageError("--time is required")
    return SimBudget.time(args.time, args.runs, seed)


def _emit(text: str, dest: str) -> None:
    if dest in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(dest, "w", newline="") as fh:
            fh.write(text)


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> int:
    _apply_preset(args)
    spec = _spec(args)
    policy = _policy(args, spec.n)
    budget = _budget(args, spec.variant)
    if args.trace:
        if budget.runs != 1:
            raise UsageError("--trace needs --runs 1")
        trace, _ = run_one(spec, args.start, budget, budget.base_seed, policy=policy,
                           record_trace=True)
        _emit(io.trace_to_csv(trace), args.trace)
    agg = run_batch(spec, args.start, budget, policy=policy, jobs=args.jobs)
    doc = {"spec": spec.to_dict(), "start": args.start, "threshold": policy.f,
           "budget": {"mode": budget.mode, "limit": budget.limit, "runs": budget.runs,
                      "base_seed": budget.base_seed},
           "stats": io.aggregate_to_dict(agg)}
    if args.histogram:
        _emit(io.histogram_to_csv(agg.occupancy), args.histogram)
    _emit(io.dumps(doc), args.out)
    return 0


def cmd_sweep(args) -> int:
    _apply_preset(args)
    if args.n is None:
        raise UsageError("--n is required")
    variant = Variant.parse(args.variant)
    grid = SweepGrid(variant=variant, n=args.n, start=args.start,
                     policy=_policy(args, args.n), budget=_budget(args, variant),
                     p_values=args.p_values, q_values=args.q_values, r=args.r)
    _emit(io.sweep_to_csv(run_sweep(grid, jobs=args.jobs)), args.out)
    return 0


def cmd_occupancy(args) -> int:
    _apply_preset(args)
    spec = _spec(args)
    hist, pi = occupancy(spec, args.start, _budget(args, spec.variant), jobs=args.jobs)
    _emit(io.occupancy_to_csv(hist, pi), args.out)
    return 0


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.op} needs {', '.join(missing)}")


def cmd_analytic(args) -> int:
    op = args.op
    if op in ("hitting", "stationary", "quantile"):
        _need(args, "n", "p", "q")
        spec = _spec(args)
        doc = {"op": op, "spec": spec.to_dict()}
        if op == "hitting":
            target = spec.n // 3 if args.target is None else args.target
            sol = an.expected_hitting_time_exact(spec, target, partial=True)
            doc.update(target=target, f=[float(x) for x in sol.f_values],
                       f_start=float(sol[args.start]), start=args.start)
        elif op == "stationary":
            st = an.stationary_distribution(spec)
            doc.update(argmax=st.argmax(), pi=[float(x) for x in st.pi])
        else:
            target = spec.n // 3 if args.target is None else args.target
            t, truncated = an.hitting_time_quantile(spec, args.start, target, args.epsilon)
            doc.update(start=args.start, target=target, epsilon=args.epsilon,
                       quantile=t, truncated=truncated)
    elif op == "regime":
        _need(args, "p", "q")
        doc = {"op": op, "p": args.p, "q": args.q,
               "regime": an.internal_regime(args.p, args.q).value}
    elif op == "scaling":
        _need(args, "f0", "r")
        doc = {"op": op, "f0": args.f0, "r": args.r,
               "value": an.dtmc_lazy_scaling(args.f0, args.r)}
    elif op == "ruin":
        _need(args, "p", "q", "m")
        doc = {"op": op, "p": args.p, "q": args.q, "m": args.m,
               "value": an.gamblers_ruin_prob(args.p, args.q, args.m, symmetric_limit=True)}
    elif op == "recovery-bound":
        _need(args, "p", "q", "n")
        doc = {"op": op, "p": args.p, "q": args.q, "n": args.n,
               "value": an.recovery_bias_lower_bound(args.p, args.q, args.n)}
    elif op == "infection-bound":
        _need(args, "p", "n")
        doc = {"op": op, "p": args.p, "n": args.n,
               "value": an.infection_bias_lower_bound(args.p, args.n)}
    else:
        _need(args, "p", "q", "n")
        doc = {"op": op, "p": args.p, "q": args.q, "n": args.n,
               "closed_form": an.coordinated_f1_closed_form(args.p, args.q, args.n),
               "reconciled": an.coordinated_f1_reconciled(args.p, args.q, args.n)}
    _emit(io.dumps(_jsonable(doc)), args.out)
    return 0


def cmd_mapek(args) -> int:
    if args.scenario == "-":
        doc = json.load(sys.stdin)
    else:
        with open(args.scenario) as fh:
            doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    report = Scenario.from_dict(doc).run().to_dict()
    if not args.intervals:
        report.pop("intervals")
    _emit(io.dumps(_jsonable(report)), args.out)
    return 0


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "occupancy": cmd_occupancy,
            "analytic": cmd_analytic, "mapek": cmd_mapek}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, SpecError, TraceError, ValueError, KeyError, OSError) as exc:
        print(f"mbfsim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
