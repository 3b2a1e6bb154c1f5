"""Finite-difference and IPA gradient estimators, MSE studies, unbiasedness tests.

Replication blocks: an estimate with N replications reads replication indices
``offset + b*N + i`` (i < N) of a :class:`Streams`, where block ``b`` is
0 for the base point and ``k + 1`` for the independent plus-runs of
coordinate k in the crude Monte Carlo estimator.  CRN, symmetric-difference
and IPA estimators only use block 0, so every perturbed run re-reads the
uniforms of its paired base run.

Starved queueing replications produce NaN and are dropped (pairwise for the
difference estimators); the count is reported on the estimate.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .ipa import PotentiallyBiasedWarning, UncertifiedModelError
from .streams import Streams, chunks, derive_seed

METHODS = ("cmc", "crn", "sd-crn", "ipa")
SCHEMA_VERSION = 1
DEFAULT_Z = 4.0
DEFAULT_STARVATION_LIMIT = 0.5


class StarvationError(RuntimeError):
    pass


@dataclass
class Estimate:
    method: str
    measure: str
    theta: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    n: int
    runs: int
    seed: int
    delta: float | None = None
    starved: int = 0
    potentially_biased: bool = False

    def rows(self) -> list[dict]:
        return [
            {
                "method": self.method,
                "measure": self.measure,
                "coordinate": k,
                "theta": float(self.theta[k]),
                "estimate": float(self.value[k]),
                "stderr": float(self.stderr[k]),
                "n": self.n,
                "runs": self.runs,
                "delta": "" if self.delta is None else self.delta,
                "seed": self.seed,
                "starved": self.starved,
                "potentially_biased": self.potentially_biased,
            }
            for k in range(len(self.value))
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("theta", "value", "stderr"):
            d[key] = [float(x) for x in d[key]]
        return d


CSV_FIELDS = ("method", "measure", "coordinate", "theta", "estimate", "stderr", "n", "runs", "delta", "seed", "starved", "potentially_biased")


def estimates_csv(estimates) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for est in estimates:
        for row in est.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def estimates_json(estimates) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, "estimates": [e.to_dict() for e in estimates]}, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# replication plumbing


def _names(measure) -> tuple[str, ...]:
    return (measure,) if isinstance(measure, str) else tuple(measure)


def _model_call(model, what, names, theta, reps, streams):
    """Values (N, m) or (values (N, m), gradients (N, m, dim)) for measures ``names``."""
    if getattr(model, "multi_measure", False):
        return getattr(model, what)(names, theta, reps, streams)
    parts = [getattr(model, what)(m, theta, reps, streams) for m in names]
    if what == "values":
        return np.stack(parts, axis=1)
    return np.stack([p[0] for p in parts], axis=1), np.stack([p[1] for p in parts], axis=1)


def _call(model, what, names, theta, reps, seed):
    return _model_call(model, what, names, theta, reps, Streams(seed))


def _evaluate(model, what, names, theta, reps, streams: Streams, workers: int):
    """Like :func:`_model_call`, split over worker processes and concatenated in index order."""
    reps = np.asarray(reps, dtype=np.int64)
    if workers <= 1 or len(reps) < 2 * workers:
        return _model_call(model, what, names, theta, reps, streams)
    parts = chunks(reps, workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_call, model, what, names, np.asarray(theta, dtype=float), p, streams.seed) for p in parts]
        results = [f.result() for f in futures]
    if what == "values":
        return np.concatenate(results)
    return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])


def _theta(model, theta) -> np.ndarray:
    return model.box.check(theta)


def _deltas(model, delta) -> np.ndarray:
    d = np.broadcast_to(np.asarray(delta, dtype=float), (model.dim,)).copy()
    if np.any(d <= 0):
        raise ValueError("finite-difference step must be positive")
    return d


def _shifted(model, theta, k, step):
    th = theta.copy()
    th[k] += step
    if not model.box.contains(th):
        raise ValueError(f"theta {th.tolist()} leaves the parameter box; reduce the step")
    return th


def _summarize(samples: np.ndarray, starved: int, total: int, limit: float):
    """Mean and standard error over the rows of ``samples``."""
    if total and starved / total > limit:
        raise StarvationError(f"{starved} of {total} replications starved (limit {limit:.0%})")
    n = len(samples)
    if n < 2:
        raise StarvationError("fewer than two complete replications")
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / math.sqrt(n), n


def _streams(seed) -> Streams:
    return seed if isinstance(seed, Streams) else Streams(int(seed))


def _finish(method, measure, theta, samples, ok, N, runs, streams, delta, limit, flag=False):
    """Per-measure estimates from ``samples`` (N, m, dim) over the complete rows ``ok``."""
    starved = int(np.sum(~ok))
    value, se, n = _summarize(samples[ok], starved, N, limit)
    out = [
        Estimate(method, name, theta, value[j], se[j], n, runs, streams.seed, delta, starved, flag)
        for j, name in enumerate(_names(measure))
    ]
    return out[0] if isinstance(measure, str) else out


def _complete(*arrays) -> np.ndarray:
    ok = np.ones(len(arrays[0]), dtype=bool)
    for a in arrays:
        ok &= ~np.isnan(a.reshape(len(a), -1)).any(axis=1)
    return ok


def estimate_cmc(model, measure, theta, delta, N, seed=0, offset=0, workers=1, starvation_limit=DEFAULT_STARVATION_LIMIT):
    """One-sided differences with independent replications at theta and theta + delta e_k.

    ``measure`` may be a tuple of names; then a list of estimates sharing the
    same runs is returned.
    """
    names, streams, theta, d = _names(measure), _streams(seed), _theta(model, theta), _deltas(model, delta)
    base_reps = offset + np.arange(N)
    base = _evaluate(model, "values", names, theta, base_reps, streams, workers)
    cols, runs = [], [base]
    for k in range(model.dim):
        plus = _evaluate(model, "values", names, _shifted(model, theta, k, d[k]), base_reps + (k + 1) * N, streams, workers)
        runs.append(plus)
        cols.append((plus - base) / d[k])
    samples = np.stack(cols, axis=2)
    return _finish("cmc", measure, theta, samples, _complete(*runs), N, (model.dim + 1) * N, streams, float(d[0]), starvation_limit)


def estimate_crn(model, measure, theta, delta, N, seed=0, offset=0, workers=1, starvation_limit=DEFAULT_STARVATION_LIMIT):
    """One-sided differences; theta and theta + delta e_k share replication i's uniforms."""
    names, streams, theta, d = _names(measure), _streams(seed), _theta(model, theta), _deltas(model, delta)
    reps = offset + np.arange(N)
    base = _evaluate(model, "values", names, theta, reps, streams, workers)
    cols, runs = [], [base]
    for k in range(model.dim):
        plus = _evaluate(model, "values", names, _shifted(model, theta, k, d[k]), reps, streams, workers)
        runs.append(plus)
        cols.append((plus - base) / d[k])
    samples = np.stack(cols, axis=2)
    return _finish("crn", measure, theta, samples, _complete(*runs), N, (model.dim + 1) * N, streams, float(d[0]), starvation_limit)


def estimate_sd_crn(model, measure, theta, delta, N, seed=0, offset=0, workers=1, starvation_limit=DEFAULT_STARVATION_LIMIT):
    """Symmetric differences (theta +- delta e_k) on common replications; 2 n N runs."""
    names, streams, theta, d = _names(measure), _streams(seed), _theta(model, theta), _deltas(model, delta)
    reps = offset + np.arange(N)
    cols, runs = [], []
    for k in range(model.dim):
        plus = _evaluate(model, "values", names, _shifted(model, theta, k, d[k]), reps, streams, workers)
        minus = _evaluate(model, "values", names, _shifted(model, theta, k, -d[k]), reps, streams, workers)
        runs += [plus, minus]
        cols.append((plus - minus) / (2 * d[k]))
    samples = np.stack(cols, axis=2)
    return _finish("sd-crn", measure, theta, samples, _complete(*runs), N, 2 * model.dim * N, streams, float(d[0]), starvation_limit)


def check_certificate(model, measure, allow_uncertified: bool) -> bool:
    """Raise for uncertified models unless overridden; True means 'potentially biased'."""
    flagged = False
    for name in _names(measure):
        cert = model.certificate(name)
        if cert.passed:
            continue
        if not allow_uncertified:
            raise UncertifiedModelError(cert)
        warnings.warn(f"potentially biased gradient: {cert.summary()}", PotentiallyBiasedWarning, stacklevel=3)
        flagged = True
    return flagged


def estimate_ipa(model, measure, theta, N, seed=0, offset=0, workers=1, allow_uncertified=False, starvation_limit=DEFAULT_STARVATION_LIMIT):
    """Mean of single-run sample gradients; N runs."""
    flag = check_certificate(model, measure, allow_uncertified)
    names, streams, theta = _names(measure), _streams(seed), _theta(model, theta)
    _, grads = _evaluate(model, "gradients", names, theta, offset + np.arange(N), streams, workers)
    return _finish("ipa", measure, theta, grads, _complete(grads), N, N, streams, None, starvation_limit, flag)


def estimate(method: str, model, measure, theta, N, seed=0, delta=None, **kw):
    if method == "ipa":
        return estimate_ipa(model, measure, theta, N, seed, **kw)
    kw.pop("allow_uncertified", None)
    if delta is None:
        raise ValueError(f"method {method!r} needs a finite-difference step")
    fn = {"cmc": estimate_cmc, "crn": estimate_crn, "sd-crn": estimate_sd_crn}.get(method)
    if fn is None:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return fn(model, measure, theta, delta, N, seed, **kw)


# --------------------------------------------------------------------------
# MSE study


@dataclass(frozen=True)
class StepSchedule:
    """delta(N) = scale * N ** -power."""

    scale: float
    power: float

    def __call__(self, N: int) -> float:
        return self.scale * N ** (-self.power)


DEFAULT_SCHEDULES = {
    "cmc": StepSchedule(1.0, 1 / 6),
    "crn": StepSchedule(1.0, 1 / 4),
    "sd-crn": StepSchedule(1.0, 1 / 4),
}


@dataclass
class MSEStudy:
    methods: tuple[str, ...]
    n_grid: tuple[int, ...]
    macro_reps: int
    oracle: np.ndarray
    mse: dict = field(default_factory=dict)  # (method, N) -> float
    steps: dict = field(default_factory=dict)  # (method, N) -> delta or None

    def slope(self, method: str) -> float:
        x = np.log([float(n) for n in self.n_grid])
        y = np.log([self.mse[(method, n)] for n in self.n_grid])
        return float(np.polyfit(x, y, 1)[0])

    def ordered(self, order=("ipa", "crn", "cmc")) -> bool:
        return all(
            self.mse[(a, n)] < self.mse[(b, n)] for n in self.n_grid for a, b in zip(order, order[1:])
        )

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "N", "delta", "mse", "macro_reps"])
        for m in self.methods:
            for n in self.n_grid:
                step = self.steps.get((m, n))
                w.writerow([m, n, "" if step is None else repr(step), repr(self.mse[(m, n)]), self.macro_reps])
        return buf.getvalue()

    def slopes_csv(self) -> str:
        lines = ["method,slope"] + [f"{m},{self.slope(m)!r}" for m in self.methods]
        return "\n".join(lines) + "\n"


def mse_study(
    model,
    measure,
    theta,
    oracle,
    methods=("ipa", "crn", "cmc"),
    n_grid=(100, 1000, 10000),
    macro_reps=200,
    seed=0,
    schedules=None,
    allow_uncertified=False,
) -> MSEStudy:
    """Empirical MSE (squared error summed over coordinates) per method and N.

    Macro-replication m at grid point N uses an independent stream family
    derived from (seed, N, m); all methods share it.
    """
    schedules = {**DEFAULT_SCHEDULES, **(schedules or {})}
    oracle = np.asarray(oracle, dtype=float)
    study = MSEStudy(tuple(methods), tuple(n_grid), macro_reps, oracle)
    for N in n_grid:
        errs = {m: [] for m in methods}
        for rep in range(macro_reps):
            streams = Streams(derive_seed(seed, N, rep))
            for m in methods:
                step = None if m == "ipa" else schedules[m](N)
                est = estimate(m, model, measure, theta, N, streams, delta=step, allow_uncertified=allow_uncertified)
                errs[m].append(float(np.sum((est.value - oracle) ** 2)))
                study.steps[(m, N)] = step
        for m in methods:
            study.mse[(m, N)] = float(np.mean(errs[m]))
    return study


# --------------------------------------------------------------------------
# unbiasedness test


@dataclass
class KinkReport:
    left: np.ndarray
    right: np.ndarray
    z: np.ndarray
    detected: bool


@dataclass
class UnbiasednessReport:
    certificate: object
    ipa: Estimate
    reference: Estimate
    z: np.ndarray
    threshold: float
    kink: KinkReport | None = None

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= self.threshold))

    def summary(self) -> str:
        lines = [
            f"certificate: {self.certificate.summary()}",
            f"ipa     {np.array2string(self.ipa.value, precision=6)} +- {np.array2string(self.ipa.stderr, precision=6)}",
            f"sd-crn  {np.array2string(self.reference.value, precision=6)} +- {np.array2string(self.reference.stderr, precision=6)}",
            f"z       {np.array2string(self.z, precision=3)}  ({'pass' if self.passed else 'FAIL'} at {self.threshold:g} sigma)",
        ]
        if self.kink is not None:
            lines.append(
                f"one-sided slopes left {np.array2string(self.kink.left, precision=4)} "
                f"right {np.array2string(self.kink.right, precision=4)}: "
                + ("kink detected" if self.kink.detected else "no kink detected")
            )
        return "\n".join(lines)


def one_sided_slopes(model, measure, theta, h, N, seed, threshold=DEFAULT_Z) -> KinkReport:
    """Backward and forward CRN slopes at theta; disagreement beyond the threshold flags a kink."""
    streams, theta = _streams(seed), _theta(model, theta)
    reps = np.arange(N)
    mid = model.values(measure, theta, reps, streams)
    left, right, z = [], [], []
    for k in range(model.dim):
        fwd = (model.values(measure, _shifted(model, theta, k, h), reps, streams) - mid) / h
        bwd = (mid - model.values(measure, _shifted(model, theta, k, -h), reps, streams)) / h
        diff = fwd - bwd
        se = diff.std(ddof=1) / math.sqrt(N)
        left.append(bwd.mean())
        right.append(fwd.mean())
        gap = diff.mean()
        z.append(0.0 if gap == 0 else (math.inf if se == 0 else gap / se))
    z = np.array(z)
    return KinkReport(np.array(left), np.array(right), z, bool(np.any(np.abs(z) > threshold)))


def unbiasedness_test(
    model,
    measure,
    theta,
    N,
    seed=0,
    delta=1e-3,
    threshold=DEFAULT_Z,
    kink_step=None,
    workers=1,
) -> UnbiasednessReport:
    """z-test of mean IPA gradient against an SD-CRN reference on independent streams.

    Runs even for uncertified models (that is the point of the test); the IPA
    estimate is then stamped potentially biased.  With ``kink_step`` the report
    also compares one-sided slopes of theta -> F(theta).
    """
    cert = model.certificate(measure)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PotentiallyBiasedWarning)
        g = estimate_ipa(model, measure, theta, N, seed, workers=workers, allow_uncertified=True)
    ref = estimate_sd_crn(model, measure, theta, delta, N, derive_seed(seed, 1), workers=workers)
    se = np.sqrt(g.stderr**2 + ref.stderr**2)
    diff = g.value - ref.value
    z = np.where(diff == 0, 0.0, diff / np.where(se > 0, se, np.nan))
    z = np.where(np.isnan(z), np.inf, z)
    kink = None
    if kink_step is not None:
        kink = one_sided_slopes(model, measure, theta, kink_step, N, derive_seed(seed, 2), threshold)
    return UnbiasednessReport(cert, g, ref, z, threshold, kink)
