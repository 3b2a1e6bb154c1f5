"""Command-line entry point.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import warnings

import numpy as np

from . import algebra as alg
from . import estimators as est
from . import networks as nw
from .config import ConfigError, LoadedModel, load_model
from .ipa import PotentiallyBiasedWarning, UncertifiedModelError
from .models import NetworkModel, ReciprocalCost
from .optimize import Gain, NonFiniteGradientError, robbins_monro
from .streams import Streams

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _prepare(args) -> tuple[LoadedModel, object, str, np.ndarray]:
    """Apply command-line overrides to a loaded model file."""
    lm = load_model(args.model)
    net = lm.model.net
    if getattr(args, "K", None) is not None or getattr(args, "M", None) is not None:
        if not isinstance(net, nw.QueueingNetwork):
            raise UsageError("--K/--M only apply to queueing models")
        K = args.K if args.K is not None else net.target[0]
        M = args.M if args.M is not None else net.target[1]
        try:
            net = net.with_target(K, M)
        except nw.NetworkError as exc:
            raise UsageError(str(exc)) from None
    model = NetworkModel(net, lm.model.name)
    measure = getattr(args, "measure", None) or lm.measure
    if measure not in model.measures:
        raise UsageError(f"measure {measure!r} not available; choose from {model.measures}")
    theta = np.asarray(args.theta if getattr(args, "theta", None) is not None else lm.theta, dtype=float)
    if len(theta) != model.dim or not model.box.contains(theta):
        raise UsageError(f"theta {theta.tolist()} is not inside the parameter box")
    if lm.cost is not None:
        model = ReciprocalCost(model, lm.cost)
    return lm, model, measure, theta


def _seed(args, lm: LoadedModel) -> int:
    return args.seed if args.seed is not None else lm.seed


def _n(args, lm: LoadedModel) -> int:
    return args.N if args.N is not None else lm.N


def cmd_simulate(args) -> int:
    lm, model, measure, theta = _prepare(args)
    base = model.base if isinstance(model, ReciprocalCost) else model
    net, N, streams = base.net, _n(args, lm), Streams(_seed(args, lm))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(net, nw.QueueingNetwork):
        names = ("delta",) + nw.MEASURES
        w.writerow(["replication", "status"] + list(names))
        cols, starved = [], 0
        for r in range(N):
            trace = nw.simulate_queueing(net, theta, r, streams)
            if trace.completed:
                vals = nw.measures(trace)
                row = [vals[m] for m in names]
            else:
                starved += 1
                row = [math.nan] * len(names)
            cols.append(row)
            w.writerow([r, trace.status] + ["" if math.isnan(v) else repr(v) for v in row])
        values = np.array(cols, dtype=float).reshape(N, len(names))
    else:
        names = ("t",)
        t = base.values("t", theta, np.arange(N), streams)
        if isinstance(model, ReciprocalCost):
            t = t + model.cost(theta)
        w.writerow(["replication", "status", "t"])
        for r, v in enumerate(t):
            w.writerow([r, "completed", repr(float(v))])
        values, starved = t[:, None], 0
    if N >= 2:
        ok = values[~np.isnan(values).any(axis=1)]
        if len(ok) >= 2:
            w.writerow(["mean", ""] + [repr(float(x)) for x in ok.mean(axis=0)])
            w.writerow(["stderr", ""] + [repr(float(x)) for x in ok.std(axis=0, ddof=1) / math.sqrt(len(ok))])
    _emit(buf.getvalue(), args.out)
    print(f"replications={N} starved={starved}", file=sys.stderr)
    return EXIT_OK


def cmd_gradient(args) -> int:
    lm, model, measure, theta = _prepare(args)
    delta = args.delta if args.delta is not None else lm.delta
    if args.method != "ipa" and delta is None:
        raise UsageError(f"--method {args.method} needs --delta (or defaults.delta in the model file)")
    e = est.estimate(
        args.method,
        model,
        measure,
        theta,
        _n(args, lm),
        _seed(args, lm),
        delta=delta,
        workers=args.workers,
        allow_uncertified=args.allow_uncertified,
    )
    _emit(est.estimates_csv([e]), args.out)
    if args.json:
        _emit(est.estimates_json([e]) + "\n", args.json)
    if e.potentially_biased:
        print("warning: model is not certified; the estimate is potentially biased", file=sys.stderr)
    return EXIT_OK


def cmd_unroll(args) -> int:
    lm = load_model(args.model)
    net = lm.model.net
    if isinstance(net, nw.QueueingNetwork):
        if not isinstance(net.routing, nw.DeterministicRouting):
            raise UsageError("unrolling needs a deterministic routing table")
        K = args.K if args.K is not None else net.target[0]
        M = args.M if args.M is not None else net.target[1]
        if not 1 <= K <= net.L or M < 1:
            raise UsageError(f"target (K={K}, M={M}) invalid for {net.L} nodes")
        expr = nw.unroll_queueing(net, K, M, size_cap=args.size_cap)
    elif isinstance(net, nw.ReliabilityNetwork):
        expr = nw.unroll_reliability(net)
    else:
        expr = nw.unroll_activity(net)
    if expr.leaf_count() > args.size_cap:
        raise alg.SizeCapExceeded(f"expression has {expr.leaf_count()} leaves (cap {args.size_cap})")
    _emit(alg.to_sexpr(expr) + "\n", args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    lm, model, measure, theta = _prepare(args)
    if lm.oracle is None:
        raise UsageError("model file has no oracle gradient; cannot compute MSE")
    if not np.allclose(lm.oracle.theta, theta, rtol=0, atol=1e-12):
        raise UsageError(f"oracle is given at theta {lm.oracle.theta}, not at {theta.tolist()}")
    schedules = {m: est.StepSchedule(args.step_scale, est.DEFAULT_SCHEDULES[m].power) for m in ("cmc", "crn", "sd-crn")}
    study = est.mse_study(
        model,
        measure,
        theta,
        lm.oracle.gradient,
        methods=tuple(args.methods),
        n_grid=tuple(args.N_grid),
        macro_reps=args.macro_reps,
        seed=_seed(args, lm),
        schedules=schedules,
        allow_uncertified=args.allow_uncertified,
    )
    _emit(study.csv(), args.out)
    if len(args.N_grid) >= 2:
        if args.slopes_out:
            _emit(study.slopes_csv(), args.slopes_out)
        else:
            print(study.slopes_csv(), end="", file=sys.stderr)
    return EXIT_OK


def cmd_optimize(args) -> int:
    lm, model, measure, theta = _prepare(args)
    theta0 = np.asarray(args.theta0, dtype=float) if args.theta0 is not None else theta
    if len(theta0) != model.dim or not model.box.contains(theta0):
        raise UsageError(f"theta0 {theta0.tolist()} is not inside the parameter box")
    try:
        gain = Gain(args.gain_a, args.gain_s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = robbins_monro(
        model,
        measure,
        theta0,
        gain=gain,
        inner_n=args.inner_n,
        iterations=args.iterations,
        seed=_seed(args, lm),
        tol=args.tol,
        allow_uncertified=args.allow_uncertified,
        validate_n=args.validate_n,
    )
    _emit(run.csv(), args.out)
    print(f"final theta: {', '.join(f'{x:.6g}' for x in run.final)} ({run.stopped}, {run.projections} projections)", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochnet", description="Simulation and IPA gradient estimation for stochastic networks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, theta=True):
        sp.add_argument("model", help="JSON model file")
        sp.add_argument("--seed", type=int, help="experiment seed (default: the model file's)")
        sp.add_argument("--out", help="output file (default: stdout)")
        if theta:
            sp.add_argument("--theta", type=_floats, help="comma-separated parameter vector")
            sp.add_argument("--measure", help="measure: t for DAG models; delta, t, w, u, c or q for queues")
            sp.add_argument("--K", type=int, help="queueing target node")
            sp.add_argument("--M", type=int, help="queueing target departure count")

    s = sub.add_parser("simulate", help="per-replication measure values")
    common(s)
    s.add_argument("--N", type=int, help="replications")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gradient", help="gradient estimate")
    common(g)
    g.add_argument("--method", choices=est.METHODS, default="ipa")
    g.add_argument("--N", type=int, help="replications")
    g.add_argument("--delta", type=float, help="finite-difference step")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--json", help="also write a JSON summary here")
    g.add_argument("--allow-uncertified", action="store_true", help="run IPA on uncertified models (output flagged)")
    g.set_defaults(func=cmd_gradient)

    u = sub.add_parser("unroll", help="max/min/+ expression of the model's output")
    u.add_argument("model")
    u.add_argument("--K", type=int)
    u.add_argument("--M", type=int)
    u.add_argument("--out")
    u.add_argument("--size-cap", type=int, default=alg.DEFAULT_SIZE_CAP)
    u.set_defaults(func=cmd_unroll)

    c = sub.add_parser("compare", help="empirical MSE of the estimators against the model's oracle")
    common(c)
    c.add_argument("--N-grid", dest="N_grid", type=_ints, default=[100, 1000, 10000])
    c.add_argument("--macro-reps", type=int, default=200)
    c.add_argument("--methods", type=lambda t: t.split(","), default=["ipa", "crn", "cmc"])
    c.add_argument("--step-scale", type=float, default=1.0, help="finite-difference step constant c in c * N^-p")
    c.add_argument("--slopes-out", help="write log-log slopes here (default: stderr)")
    c.add_argument("--allow-uncertified", action="store_true")
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("optimize", help="projected Robbins-Monro with IPA gradients")
    common(o)
    o.add_argument("--theta0", type=_floats, help="starting point (default: the model's theta)")
    o.add_argument("--gain-a", type=float, default=1.0)
    o.add_argument("--gain-s", type=float, default=10.0)
    o.add_argument("--iterations", type=int, default=1000)
    o.add_argument("--inner-n", type=int, default=10)
    o.add_argument("--tol", type=float)
    o.add_argument("--validate-n", type=int, default=0, help="replications for before/after objective estimates")
    o.add_argument("--allow-uncertified", action="store_true")
    o.set_defaults(func=cmd_optimize)
    return p


USAGE_ERRORS = (ConfigError, UsageError, UncertifiedModelError, FileNotFoundError)
RUNTIME_ERRORS = (
    est.StarvationError,
    alg.SizeCapExceeded,
    nw.NoRepresentationError,
    nw.IncompleteTraceError,
    NonFiniteGradientError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PotentiallyBiasedWarning)
            return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
