"""Single-run sample gradients (infinitesimal perturbation analysis).

``ipa_activity`` and ``ipa_reliability`` replay one replication event by event
and keep one gradient register per node.  ``ipa_queueing_delta`` and
``ipa_queueing_measures`` ride on the queueing simulator's register hooks.
The ``*_batch`` functions give the same sample gradients vectorized over many
replications; estimators use those.
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .networks import (
    DagNetwork,
    EventTrace,
    IncompleteTraceError,
    QueueingNetwork,
    activity_times,
    measures,
    prefetch_services,
    reliability_times,
    run_queueing,
    sample_durations,
)
from .streams import Streams
from .variates import QUOTIENT_MEASURES


class UncertifiedModelError(RuntimeError):
    def __init__(self, certificate):
        super().__init__(f"model not certified for unbiased IPA: {certificate.summary()}")
        self.certificate = certificate


class PotentiallyBiasedWarning(UserWarning):
    pass


@dataclass
class SampleGradient:
    value: float
    gradient: np.ndarray
    potentially_biased: bool = False

    def __iter__(self):
        yield self.value
        yield self.gradient


def require_certificate(net, measure: str, allow_uncertified: bool) -> bool:
    """Raise unless certified; returns True when the result must be flagged."""
    cert = net.certificate(measure)
    if cert.passed:
        return False
    if not allow_uncertified:
        raise UncertifiedModelError(cert)
    warnings.warn(f"potentially biased gradient: {cert.summary()}", PotentiallyBiasedWarning, stacklevel=3)
    return True


def _draw(net: DagNetwork, theta, replication: int, streams: Streams):
    tau, dtau = sample_durations(net, theta, [replication], streams, derivatives=True)
    return {k: float(v[0]) for k, v in tau.items()}, {k: v[0] for k, v in dtau.items()}


def ipa_activity(net: DagNetwork, theta, replication: int, streams: Streams, allow_uncertified: bool = False) -> SampleGradient:
    """Completion time and its gradient by event-driven register propagation.

    Activities complete in time order.  On completion of activity i its
    register gains d tau_i; each daughter whose fathers are now all complete
    starts with a copy of that register (i is its critical father).
    """
    flag = require_certificate(net, "t", allow_uncertified)
    tau, dtau = _draw(net, theta, replication, streams)
    rank = {n: k for k, n in enumerate(net.nodes)}
    g = {n: np.zeros(net.dim) for n in net.nodes}
    pending = {n: len(net.fathers(n)) for n in net.nodes}
    heap = [(tau[net.variate_of(n)], rank[n], n) for n in net.sources]
    heapq.heapify(heap)
    done = 0
    while heap:
        now, _, i = heapq.heappop(heap)
        g[i] = g[i] + dtau[net.variate_of(i)]
        done += 1
        if done == len(net.nodes):
            return SampleGradient(now, g[i], flag)
        for j in net.daughters(i):
            pending[j] -= 1
            if pending[j] == 0:
                g[j] = g[i].copy()
                heapq.heappush(heap, (now + tau[net.variate_of(j)], rank[j], j))
    raise AssertionError("activity network finished without completing every node")


def ipa_reliability(net: DagNetwork, theta, replication: int, streams: Streams, allow_uncertified: bool = False) -> SampleGradient:
    """System lifetime and its gradient by processing failures in lifetime order.

    A failing element and every element left without a working supplier are
    removed; the element whose failure removes the last end element fixes
    the gradient.
    """
    flag = require_certificate(net, "t", allow_uncertified)
    tau, dtau = _draw(net, theta, replication, streams)
    rank = {n: k for k, n in enumerate(net.nodes)}
    alive = set(net.nodes)
    ends = set(net.ends)
    for _, _, i in sorted((tau[net.variate_of(n)], rank[n], n) for n in net.nodes):
        if i not in alive:
            continue
        stack = [i]
        while stack:
            n = stack.pop()
            if n not in alive:
                continue
            alive.discard(n)
            for d in net.daughters(n):
                if d in alive and not any(f in alive for f in net.fathers(d)):
                    stack.append(d)
        if not alive & ends:
            return SampleGradient(tau[net.variate_of(i)], np.array(dtau[net.variate_of(i)], dtype=float), flag)
    raise AssertionError("reliability network never lost its end elements")


def _dag_batch(net: DagNetwork, theta, reps, streams: Streams, reliability: bool):
    tau, dtau = sample_durations(net, theta, reps, streams, derivatives=True)
    times, grads = {}, {}
    for n in net.order:
        v = net.variate_of(n)
        fs = net.fathers(n)
        if not fs:
            times[n], grads[n] = tau[v], dtau[v]
            continue
        best_t, best_g = times[fs[0]], grads[fs[0]]
        for f in fs[1:]:
            take = times[f] > best_t
            best_t = np.where(take, times[f], best_t)
            best_g = np.where(take[:, None], grads[f], best_g)
        if reliability:
            own = tau[v] < best_t
            times[n] = np.where(own, tau[v], best_t)
            grads[n] = np.where(own[:, None], dtau[v], best_g)
        else:
            times[n] = best_t + tau[v]
            grads[n] = best_g + dtau[v]
    ends = net.ends
    t, g = times[ends[0]], grads[ends[0]]
    for e in ends[1:]:
        take = times[e] > t
        t = np.where(take, times[e], t)
        g = np.where(take[:, None], grads[e], g)
    return t, g


def activity_batch(net: DagNetwork, theta, reps, streams: Streams):
    """(t, dt/dtheta) for every replication in ``reps``; shapes (N,), (N, dim)."""
    return _dag_batch(net, theta, reps, streams, reliability=False)


def reliability_batch(net: DagNetwork, theta, reps, streams: Streams):
    return _dag_batch(net, theta, reps, streams, reliability=True)


def dag_values(net: DagNetwork, theta, reps, streams: Streams, reliability: bool) -> np.ndarray:
    tau = sample_durations(net, theta, reps, streams)
    t, _ = (reliability_times if reliability else activity_times)(net, tau)
    return np.asarray(t, dtype=float)


def _queue_run(net: QueueingNetwork, theta, replication, streams, K, M, allow_uncertified, measure):
    if K is not None:
        net = net.with_target(K, M if M is not None else net.target[1])
    flag = require_certificate(net, measure, allow_uncertified)
    trace = run_queueing(net, theta, replication, streams, gradient=True)
    if not trace.completed:
        raise IncompleteTraceError(trace)
    return net, trace, flag


def ipa_queueing_delta(
    net: QueueingNetwork,
    theta,
    replication: int,
    streams: Streams,
    K: int | None = None,
    M: int | None = None,
    allow_uncertified: bool = False,
) -> SampleGradient:
    """delta_KM and its gradient: the node-K register at the M-th completion."""
    net, trace, flag = _queue_run(net, theta, replication, streams, K, M, allow_uncertified, "t")
    K, M = net.target
    return SampleGradient(trace.delta[K - 1][M - 1], trace.registers[K - 1].copy(), flag)


def measure_gradients(trace: EventTrace) -> dict[str, np.ndarray]:
    """Gradients of delta_KM and the five measures from a gradient-tracked trace."""
    K, M = trace.target
    k = K - 1
    rec = trace.gradients
    da = np.array(rec["alpha"][:M])
    db = np.array(rec["beta"][:M])
    dd = np.array(rec["delta"][:M])
    a, b, d = trace.alpha[k][:M], trace.beta[k][:M], trace.delta[k][:M]
    h, g_k = float(d[-1]), dd[-1]
    # utilization: d accumulates d tau_Kj, t accumulates tau_Kj
    d_sum = np.add.reduce(dd - db, axis=0)
    t_sum = float(sum(trace.tau[k][:M]))
    total, dtotal = float(sum(y - x for x, y in zip(a, d))), np.add.reduce(dd - da, axis=0)
    wait, dwait = float(sum(y - x for x, y in zip(a, b))), np.add.reduce(db - da, axis=0)
    return {
        "delta": g_k.copy(),
        "t": dtotal / M,
        "w": dwait / M,
        "u": (d_sum * h - t_sum * g_k) / h**2,
        "c": (dtotal * h - total * g_k) / h**2,
        "q": (dwait * h - wait * g_k) / h**2,
    }


def ipa_queueing_measures(
    net: QueueingNetwork,
    theta,
    replication: int,
    streams: Streams,
    K: int | None = None,
    M: int | None = None,
    allow_uncertified: bool = False,
    which=("t", "w", "u", "c", "q"),
) -> dict[str, SampleGradient]:
    """Sample values and gradients of the requested node-K measures.

    The ratio measures (u, c, q) need the quotient condition on top of the
    basic certificate.
    """
    strictest = next((m for m in which if m in QUOTIENT_MEASURES), "t")
    net, trace, flag = _queue_run(net, theta, replication, streams, K, M, allow_uncertified, strictest)
    vals = measures(trace)
    grads = measure_gradients(trace)
    return {m: SampleGradient(vals[m], grads[m], flag) for m in which}


def queueing_batch(net: QueueingNetwork, measure, theta, reps, streams: Streams, gradient: bool = True, block: int = 2048):
    """Per-replication values (NaN when starved) and gradients.

    ``measure`` is a name, giving shapes (N,) and (N, dim), or a tuple of
    names, giving (N, m) and (N, m, dim) from the same runs.  Service times
    are prefetched for ``block`` replications at a time; the numbers are the
    same as with per-replication draws.
    """
    names = (measure,) if isinstance(measure, str) else tuple(measure)
    theta = net.variates.box.check(theta)
    reps = np.atleast_1d(np.asarray(reps, dtype=np.int64))
    vals = np.full((len(reps), len(names)), math.nan)
    grads = np.full((len(reps), len(names), net.dim), math.nan) if gradient else None
    length = max(8, 2 * net.target[1] + sum(net.initial))
    for lo in range(0, len(reps), block):
        chunk = reps[lo : lo + block]
        pre = None if net.replay is not None else prefetch_services(net, theta, chunk, streams, length, gradient)
        if pre is not None:
            pre = [(v.tolist(), d) for v, d in pre]
        for n, r in enumerate(chunk):
            rows = None if pre is None else [(v[n], None if d is None else d[n]) for v, d in pre]
            trace = run_queueing(net, theta, int(r), streams, gradient=gradient, prefetched=rows)
            if not trace.completed:
                continue
            m = measures(trace)
            vals[lo + n] = [m[x] for x in names]
            if gradient:
                g = measure_gradients(trace)
                grads[lo + n] = [g[x] for x in names]
    if isinstance(measure, str):
        return vals[:, 0], None if grads is None else grads[:, 0]
    return vals, grads
