"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

Statistical criteria use the seeds stored in the fixture files; they were
fixed before the first run and are not tuned.
"""

import random
import time

import numpy as np
import pytest

from stochnet import algebra as alg
from stochnet import cli
from stochnet import estimators as est
from stochnet import ipa
from stochnet import networks as nw
from stochnet import optimize as opt
from stochnet.config import fixture_path, load_fixture
from stochnet.streams import Streams
from helpers import dag_assignment, random_dag, random_expr, random_queue, service_assignment

FIGURE1 = "(+ t1 (max (+ (max t2 t3) t4) (+ t3 t5)) t6)"
FIGURE2 = "(min t1 (max (min t4 t6) (min (max t2 t3) t5)) t7)"
DELTA23 = "(+ (max (max t1_1 t3_1) (+ (max (min t1_1 t3_1) t2_1) t2_2)) t2_3)"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed=None, budget=None):
        timing = ""
        if elapsed is not None:
            timing = f" [{elapsed:.2f}s" + (f" / budget {budget:g}s]" if budget else "]")
            ok = ok and (budget is None or elapsed < budget)
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}{timing}")
        assert ok, detail

    return emit


def test_criterion_01_order_statistic(report):
    rng = random.Random(101)
    start = time.perf_counter()
    checked = bad = 0
    for _ in range(1000):
        n = rng.randint(1, 7)
        values = [rng.uniform(-100, 100) for _ in range(n)]
        names = [f"x{i}" for i in range(n)]
        assign = dict(zip(names, values))
        ordered = sorted(values)
        for k in range(1, n + 1):
            checked += 1
            bad += alg.evaluate(alg.order_statistic_expr(names, k), assign) != ordered[k - 1]
    elapsed = time.perf_counter() - start
    report(1, bad == 0, f"order statistic == sort on {checked} (set, k) pairs, {bad} mismatches", elapsed, 1.0)


def test_criterion_02_canonical_form(report):
    rng = random.Random(102)
    names = ("x1", "x2", "x3", "x4", "x5")
    start = time.perf_counter()
    bad = 0
    for _ in range(500):
        e = random_expr(rng, 12, names)
        form = alg.canonicalize(e)
        for _ in range(100):
            vals = {v: rng.randint(-50, 50) for v in names}
            bad += form.evaluate(vals) != alg.evaluate(e, vals)
    elapsed = time.perf_counter() - start
    report(2, bad == 0, f"canonical == source on 500 x 100 integer points, {bad} mismatches", elapsed, 10.0)


def test_criterion_03_worked_examples(report, capsys):
    start = time.perf_counter()
    f1 = alg.evaluate(alg.parse_sexpr(FIGURE1), {f"t{i}": i for i in range(1, 7)})
    f2 = alg.evaluate(alg.parse_sexpr(FIGURE2), dict(zip((f"t{i}" for i in range(1, 8)), (10, 2, 3, 4, 5, 6, 7))))
    # the same numbers through the simulators and the fixture files
    fig1 = load_fixture("figure1_fixed")
    fig2 = load_fixture("figure2_fixed")
    sim1 = fig1.model.values("t", fig1.theta, [0], Streams(0))[0]
    sim2 = fig2.model.values("t", fig2.theta, [0], Streams(0))[0]
    q = load_fixture("queue3_fixed")
    trace = nw.simulate_queueing(q.net, q.theta, 0, None)
    d23 = trace.departure(2, 3)
    code = cli.main(["unroll", str(fixture_path("queue3")), "--K", "2", "--M", "3"])
    text = capsys.readouterr().out
    unrolled, reference = alg.parse_sexpr(text), alg.parse_sexpr(DELTA23)
    # 1000 random points, evaluated column-wise
    rng = np.random.default_rng(103)
    vals = {v: rng.random(1000) for v in sorted(unrolled.variables() | reference.variables())}
    mismatches = int(np.sum(alg.evaluate(unrolled, vals) != alg.evaluate(reference, vals)))
    elapsed = time.perf_counter() - start
    ok = (f1, f2, sim1, sim2, d23, code, mismatches) == (15, 4, 15.0, 4.0, 12.0, 0, 0)
    detail = f"figure1 t={f1}/{sim1}, figure2 t={f2}/{sim2}, delta23={d23}, unroll vs formula mismatches={mismatches}"
    report(3, ok, detail, elapsed, 1.0)


def _dag_checks(rng, cls, streams, count):
    single = ipa.ipa_activity if cls is nw.ActivityNetwork else ipa.ipa_reliability
    unroll = nw.unroll_activity if cls is nw.ActivityNetwork else nw.unroll_reliability
    worst_v = worst_g = 0.0
    for r in range(count):
        net = random_dag(rng, cls)
        theta = np.array([rng.uniform(0.5, 2.0) for _ in range(net.dim)])
        res = single(net, theta, r, streams)
        vals, derivs = dag_assignment(net, theta, r, streams)
        e = unroll(net)
        worst_v = max(worst_v, abs(alg.evaluate(e, vals) - res.value))
        worst_g = max(worst_g, float(np.max(np.abs(alg.path_derivative(e, vals, derivs, net.dim) - res.gradient))))
    return worst_v, worst_g


def test_criterion_04_simulation_matches_expressions(report):
    rng = random.Random(104)
    streams = Streams(104)
    start = time.perf_counter()
    act = _dag_checks(rng, nw.ActivityNetwork, streams, 500)
    rel = _dag_checks(rng, nw.ReliabilityNetwork, streams, 500)
    checked = capped = starved = 0
    worst_v = worst_g = 0.0
    while checked < 500:
        net = random_queue(rng)
        theta = np.array([rng.uniform(0.5, 2.0) for _ in range(net.L)])
        try:
            e = nw.unroll_queueing(net, size_cap=2000)
        except alg.SizeCapExceeded:
            capped += 1
            continue
        except nw.NoRepresentationError:
            starved += 1
            continue
        r = checked
        res = ipa.ipa_queueing_delta(net, theta, r, streams)
        vals, derivs = service_assignment(net, theta, r, streams, e.variables())
        worst_v = max(worst_v, abs(alg.evaluate(e, vals) - res.value))
        worst_g = max(worst_g, float(np.max(np.abs(alg.path_derivative(e, vals, derivs, net.dim) - res.gradient))))
        checked += 1
    elapsed = time.perf_counter() - start
    worst = max(act + rel + (worst_v, worst_g))
    detail = (
        f"500 activity, 500 reliability, 500 queueing instances ({capped} over size cap, {starved} starved, skipped); "
        f"max |value diff| {max(act[0], rel[0], worst_v):.1e}, max |gradient diff| {max(act[1], rel[1], worst_g):.1e}"
    )
    report(4, worst <= 1e-12, detail, elapsed, 30.0)


def test_criterion_05_ipa_against_analytic_gradient(report):
    loaded = load_fixture("two_exp_max")
    start = time.perf_counter()
    e = est.estimate_ipa(loaded.model, "t", [1.0, 1.0], 1_000_000, seed=loaded.seed)
    elapsed = time.perf_counter() - start
    z = (e.value - 0.75) / e.stderr
    rel = np.abs(e.value - 0.75) / 0.75
    detail = f"IPA {np.round(e.value, 5).tolist()} +- {np.round(e.stderr, 5).tolist()} vs 0.75; z {np.round(z, 2).tolist()}, rel err {np.round(rel, 4).tolist()}"
    report(5, bool(np.all(np.abs(z) <= 4)), detail, elapsed, 30.0)


def test_criterion_06_ipa_against_symmetric_differences(report):
    start = time.perf_counter()
    fig = load_fixture("figure1")
    N, d = 100_000, 1e-3
    g = est.estimate_ipa(fig.model, "t", fig.theta, N, seed=fig.seed)
    ref = est.estimate_sd_crn(fig.model, "t", fig.theta, d, N, seed=fig.seed + 1000)
    z_fig = (g.value - ref.value) / np.hypot(g.stderr, ref.stderr)

    q = load_fixture("queue3")
    names = ("t", "w", "u", "c", "q")
    assert all(q.model.certificate(m).passed for m in names)
    gq = est.estimate_ipa(q.model, names, q.theta, N, seed=q.seed)
    rq = est.estimate_sd_crn(q.model, names, q.theta, d, N, seed=q.seed + 1000)
    z_q = {a.measure: (a.value - b.value) / np.hypot(a.stderr, b.stderr) for a, b in zip(gq, rq)}
    elapsed = time.perf_counter() - start
    worst = max([float(np.max(np.abs(z_fig)))] + [float(np.max(np.abs(z))) for z in z_q.values()])
    detail = f"figure1 max|z| {np.max(np.abs(z_fig)):.2f}; queue (K,M)={q.net.target} " + ", ".join(
        f"{m} max|z| {np.max(np.abs(z)):.2f}" for m, z in z_q.items()
    )
    report(6, worst <= 4, detail, elapsed, 120.0)


def test_criterion_07_mse_ordering(report):
    loaded = load_fixture("two_exp_max")
    start = time.perf_counter()
    study = est.mse_study(
        loaded.model, "t", [1.0, 1.0], loaded.oracle.gradient, n_grid=(100, 1000, 10000), macro_reps=200, seed=loaded.seed
    )
    elapsed = time.perf_counter() - start
    slope = study.slope("ipa")
    ok = study.ordered(("ipa", "crn", "cmc")) and -1.25 <= slope <= -0.75
    mses = "; ".join(
        f"N={n}: " + " ".join(f"{m} {study.mse[(m, n)]:.2e}" for m in ("ipa", "crn", "cmc")) for n in study.n_grid
    )
    slopes = ", ".join(f"{m} {study.slope(m):.2f}" for m in ("ipa", "crn", "cmc"))
    report(7, ok, f"{mses}; slopes {slopes}", elapsed, 180.0)


def test_criterion_08_condition_checker(report):
    start = time.perf_counter()
    ex3 = load_fixture("example3").model.certificate("t")
    ex4 = load_fixture("example4").model.certificate("t")
    verdicts = {
        "example3": {v.hypothesis for v in ex3.violations},
        "example4": {v.hypothesis for v in ex4.violations},
        "figure1": load_fixture("figure1").model.certificate("t").passed,
        "figure2": load_fixture("figure2").model.certificate("t").passed,
        "queue3": all(load_fixture("queue3").model.certificate(m).passed for m in ("delta", "t", "w", "u", "c", "q")),
    }
    elapsed = time.perf_counter() - start
    expected = {"example3": {"independence"}, "example4": {"continuity"}, "figure1": True, "figure2": True, "queue3": True}
    report(8, verdicts == expected, f"verdicts {verdicts}", elapsed, 1.0)


def test_criterion_09_robbins_monro(report):
    loaded = load_fixture("rm_benchmark")
    start = time.perf_counter()
    run = opt.robbins_monro(loaded.model, "t", loaded.theta, opt.Gain(), inner_n=10, iterations=10_000, seed=loaded.seed)
    elapsed = time.perf_counter() - start
    hit = np.flatnonzero(np.abs(run.theta[:, 0] - 1.0) <= 0.05)
    final = run.final[0]
    detail = f"theta0={loaded.theta[0]}, first within 0.05 at iteration {hit[0] if len(hit) else None}, final theta={final:.4f}"
    report(9, abs(final - 1.0) <= 0.05, detail, elapsed, 60.0)


def test_criterion_10_determinism_and_accounting(report, tmp_path, capsys):
    start = time.perf_counter()
    outputs = {}
    for name, method in (("figure1", "crn"), ("figure1", "ipa"), ("queue3", "sd-crn"), ("queue3", "ipa")):
        for workers in (1, 2, 3):
            path = tmp_path / f"{name}-{method}-{workers}.json"
            argv = ["gradient", str(fixture_path(name)), "--method", method, "--N", "400", "--seed", "11"]
            code = cli.main(argv + ["--workers", str(workers), "--json", str(path)])
            csv_out = capsys.readouterr().out
            outputs.setdefault((name, method), set()).add((code, csv_out, path.read_bytes()))
    identical = all(len(v) == 1 for v in outputs.values())
    again = cli.main(["gradient", str(fixture_path("figure1")), "--method", "crn", "--N", "400", "--seed", "11"])
    repeat = (again, capsys.readouterr().out) == next(iter(outputs[("figure1", "crn")]))[:2]

    N = 250
    scalar = load_fixture("single_node")
    fig = load_fixture("figure1")
    runs = {
        "crn scalar": est.estimate_crn(scalar.model, "t", scalar.theta, 1e-3, N).runs,
        "sd-crn n=6": est.estimate_sd_crn(fig.model, "t", fig.theta, 1e-3, N).runs,
        "ipa n=6": est.estimate_ipa(fig.model, "t", fig.theta, N).runs,
    }
    accounting = runs == {"crn scalar": 2 * N, "sd-crn n=6": 2 * 6 * N, "ipa n=6": N}
    elapsed = time.perf_counter() - start
    detail = f"worker counts 1/2/3 byte-identical: {identical}, rerun identical: {repeat}; runs at N={N}: {runs}"
    report(10, identical and repeat and accounting, detail, elapsed)
