"""Activity, reliability and queueing network models and their simulators.

Activity and reliability networks are DAGs evaluated by a topological sweep,
vectorized over replications.  The queueing network is an event-driven FCFS
simulation of single-server nodes with infinite buffers; it optionally carries
the per-node gradient registers used by the IPA algorithms, because the
gradient bookkeeping has to hook the same events.

Queueing nodes, service indices, K and M are 1-based throughout, as are the
destinations stored in routing tables.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from . import algebra as alg
from .streams import Streams
from .variates import VariateSpec, VariateTable, check_dclass, DClassCertificate

MEASURES = ("t", "w", "u", "c", "q")
DEFAULT_EVENT_CAP = 1_000_000


class NetworkError(ValueError):
    pass


class IncompleteTraceError(RuntimeError):
    """The (K, M) target was never reached in a queueing run."""

    def __init__(self, trace: "EventTrace"):
        super().__init__(f"queueing run ended with status {trace.status!r} before the target {trace.target}")
        self.trace = trace


class NoRepresentationError(RuntimeError):
    """The target service can never occur under the routing table."""


# --------------------------------------------------------------------------
# DAG networks


@dataclass(frozen=True)
class DagNetwork:
    nodes: tuple[str, ...]
    arcs: tuple[tuple[str, str], ...]
    durations: tuple[tuple[str, str], ...]  # (node, variate id)
    variates: VariateTable

    kind = "dag"

    def __post_init__(self):
        nodes = list(self.nodes)
        if not nodes:
            raise NetworkError("network has no nodes")
        if len(set(nodes)) != len(nodes):
            raise NetworkError("duplicate node labels")
        known = set(nodes)
        fathers: dict[str, list[str]] = {n: [] for n in nodes}
        daughters: dict[str, list[str]] = {n: [] for n in nodes}
        for a, b in self.arcs:
            if a not in known or b not in known:
                raise NetworkError(f"arc ({a}, {b}) refers to an unknown node")
            if b in daughters[a]:
                raise NetworkError(f"duplicate arc ({a}, {b})")
            daughters[a].append(b)
            fathers[b].append(a)
        dur = dict(self.durations)
        for n in nodes:
            if n not in dur:
                raise NetworkError(f"node {n} has no duration variate")
            if dur[n] not in self.variates:
                raise NetworkError(f"node {n} refers to undeclared variate {dur[n]!r}")
        # Kahn's algorithm; ties resolved by declaration order for reproducibility
        indeg = {n: len(fathers[n]) for n in nodes}
        ready = [n for n in nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for d in daughters[n]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    ready.append(d)
        if len(order) != len(nodes):
            raise NetworkError("network graph has a cycle")
        object.__setattr__(self, "_fathers", {n: tuple(v) for n, v in fathers.items()})
        object.__setattr__(self, "_daughters", {n: tuple(v) for n, v in daughters.items()})
        object.__setattr__(self, "_order", tuple(order))
        object.__setattr__(self, "_dur", dur)

    def fathers(self, node: str) -> tuple[str, ...]:
        return self._fathers[node]

    def daughters(self, node: str) -> tuple[str, ...]:
        return self._daughters[node]

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if not self._fathers[n])

    @property
    def ends(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if not self._daughters[n])

    @property
    def order(self) -> tuple[str, ...]:
        return self._order

    def variate_of(self, node: str) -> str:
        return self._dur[node]

    @property
    def dim(self) -> int:
        return self.variates.dim

    def certificate(self, measure: str = "t") -> DClassCertificate:
        return _certificate(self.variates, measure)


class ActivityNetwork(DagNetwork):
    kind = "activity"


class ReliabilityNetwork(DagNetwork):
    kind = "reliability"


def dag_network(cls, nodes, arcs, variates: VariateTable, durations: Mapping[str, str] | None = None):
    nodes = tuple(str(n) for n in nodes)
    arcs = tuple((str(a), str(b)) for a, b in arcs)
    durations = durations or {n: f"t{n}" for n in nodes}
    return cls(nodes, arcs, tuple((str(k), v) for k, v in durations.items()), variates)


_cert_cache: dict = {}


def _certificate(table: VariateTable, measure: str, denominator=(), declared=False) -> DClassCertificate:
    key = (table, measure, tuple(denominator), declared)
    try:
        return _cert_cache[key]
    except (KeyError, TypeError):
        pass
    cert = check_dclass(table, measure, denominator, declared)
    try:
        _cert_cache[key] = cert
    except TypeError:
        pass
    return cert


def sample_durations(net: DagNetwork, theta, reps, streams: Streams, derivatives: bool = False):
    """Per-variate sampled durations (and optionally d tau/d theta) for ``reps``."""
    theta = net.variates.box.check(theta)
    reps = np.atleast_1d(np.asarray(reps, dtype=np.int64))
    values, derivs = {}, {}
    for spec in net.variates.specs:
        u = streams.uniforms(reps, spec.stream_name, 0)
        values[spec.id] = np.asarray(spec.family.sample(theta, u), dtype=float)
        if derivatives:
            derivs[spec.id] = np.asarray(spec.family.derivative(theta, u, len(theta)), dtype=float)
    return (values, derivs) if derivatives else values


def activity_times(net: DagNetwork, tau: Mapping[str, object]):
    """Forward sweep: completion time of every activity and of the project."""
    times = {}
    for n in net.order:
        d = tau[net.variate_of(n)]
        fs = net.fathers(n)
        if fs:
            start = times[fs[0]]
            for f in fs[1:]:
                start = np.maximum(start, times[f])
            times[n] = start + d
        else:
            times[n] = d
    t = times[net.ends[0]]
    for e in net.ends[1:]:
        t = np.maximum(t, times[e])
    return t, times


def reliability_times(net: DagNetwork, tau: Mapping[str, object]):
    """Forward sweep: time each element stays in order, and the system lifetime."""
    times = {}
    for n in net.order:
        d = tau[net.variate_of(n)]
        fs = net.fathers(n)
        if fs:
            supply = times[fs[0]]
            for f in fs[1:]:
                supply = np.maximum(supply, times[f])
            times[n] = np.minimum(supply, d)
        else:
            times[n] = d
    t = times[net.ends[0]]
    for e in net.ends[1:]:
        t = np.maximum(t, times[e])
    return t, times


def _scalarize(t, times):
    return float(np.asarray(t).reshape(-1)[0]), {k: float(np.asarray(v).reshape(-1)[0]) for k, v in times.items()}


def simulate_activity(net: ActivityNetwork, theta, replication: int, streams: Streams):
    tau = sample_durations(net, theta, [replication], streams)
    return _scalarize(*activity_times(net, tau))


def simulate_reliability(net: ReliabilityNetwork, theta, replication: int, streams: Streams):
    tau = sample_durations(net, theta, [replication], streams)
    return _scalarize(*reliability_times(net, tau))


def unroll_activity(net: DagNetwork) -> alg.Expr:
    node_expr: dict[str, alg.Expr] = {}
    for n in net.order:
        own = alg.Var(net.variate_of(n))
        fs = net.fathers(n)
        node_expr[n] = alg.add(alg.maximum(*(node_expr[f] for f in fs)), own) if fs else own
    return alg.maximum(*(node_expr[e] for e in net.ends))


def unroll_reliability(net: DagNetwork) -> alg.Expr:
    node_expr: dict[str, alg.Expr] = {}
    for n in net.order:
        own = alg.Var(net.variate_of(n))
        fs = net.fathers(n)
        node_expr[n] = alg.minimum(alg.maximum(*(node_expr[f] for f in fs)), own) if fs else own
    return alg.maximum(*(node_expr[e] for e in net.ends))


# --------------------------------------------------------------------------
# routing


@dataclass(frozen=True)
class DeterministicRouting:
    """Routing table S; ``table[i-1][j-1]`` is where the j-th departure from node i goes.

    Rows are finite prefixes of the infinite table.  Past the prefix a row
    either repeats cyclically (``tail="cycle"``) or keeps its last entry
    (``tail="last"``).
    """

    table: tuple[tuple[int, ...], ...]
    tail: str = "cycle"

    def __post_init__(self):
        if self.tail not in ("cycle", "last"):
            raise NetworkError(f"unknown routing tail {self.tail!r}")
        for i, row in enumerate(self.table, 1):
            if not row:
                raise NetworkError(f"routing row {i} is empty")

    def destination(self, i: int, j: int) -> int:
        row = self.table[i - 1]
        if j <= len(row):
            return row[j - 1]
        return row[(j - 1) % len(row)] if self.tail == "cycle" else row[-1]

    def ever_routes(self, i: int, r: int) -> bool:
        return r in self.table[i - 1]

    def validate(self, L: int):
        if len(self.table) != L:
            raise NetworkError(f"routing table has {len(self.table)} rows for {L} nodes")
        for i, row in enumerate(self.table, 1):
            for j, s in enumerate(row, 1):
                if not 1 <= s <= L:
                    raise NetworkError(f"routing entry s[{i}][{j}] = {s} outside 1..{L}")

    def realize(self, replication: int, streams: Streams | None) -> Callable[[int, int], int]:
        return self.destination


@dataclass(frozen=True)
class StochasticRouting:
    """Independent routing draws: the j-th departure from node i goes to node
    r with probability ``probabilities[i-1][r-1]``.  Draws depend on the
    replication's uniform streams only, never on theta."""

    probabilities: tuple[tuple[float, ...], ...]

    def validate(self, L: int):
        if len(self.probabilities) != L:
            raise NetworkError(f"routing matrix has {len(self.probabilities)} rows for {L} nodes")
        for i, row in enumerate(self.probabilities, 1):
            if len(row) != L or any(p < 0 for p in row) or not math.isclose(sum(row), 1.0, abs_tol=1e-9):
                raise NetworkError(f"routing row {i} is not a probability vector over {L} nodes")

    def realize(self, replication: int, streams: Streams) -> Callable[[int, int], int]:
        cdfs = [np.cumsum(row) for row in self.probabilities]

        def route(i: int, j: int) -> int:
            u = streams.uniform(replication, f"route{i}", j - 1)
            cdf = cdfs[i - 1]
            return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1)) + 1

        return route


@dataclass(frozen=True)
class TableMixtureRouting:
    """One whole routing table drawn per replication with the given weights."""

    tables: tuple[DeterministicRouting, ...]
    weights: tuple[float, ...]

    def validate(self, L: int):
        if len(self.tables) != len(self.weights) or not self.tables:
            raise NetworkError("mixture needs one weight per table")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise NetworkError("mixture weights must be a probability vector")
        for t in self.tables:
            t.validate(L)

    def pick(self, replication: int, streams: Streams) -> int:
        u = streams.uniform(replication, "route_table", 0)
        cdf = np.cumsum(self.weights)
        return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1))

    def realize(self, replication: int, streams: Streams) -> Callable[[int, int], int]:
        return self.tables[self.pick(replication, streams)].destination


Routing = Union[DeterministicRouting, StochasticRouting, TableMixtureRouting]


# --------------------------------------------------------------------------
# queueing network


@dataclass(frozen=True)
class Replay:
    """Fixed service times: ``values[i-1][j-1]`` for the j-th service at node
    i, ``default`` beyond the listed ones."""

    values: tuple[tuple[float, ...], ...]
    default: float

    def __call__(self, i: int, j: int) -> float:
        row = self.values[i - 1] if i - 1 < len(self.values) else ()
        return row[j - 1] if j <= len(row) else self.default


@dataclass(frozen=True)
class QueueingNetwork:
    initial: tuple[int, ...]
    services: tuple[str, ...]  # service variate id per node
    variates: VariateTable
    routing: Routing
    target: tuple[int, int] = (1, 1)
    event_cap: int = DEFAULT_EVENT_CAP
    replay: Replay | None = None
    quotient_declared: bool = False

    kind = "queueing"

    def __post_init__(self):
        L = len(self.initial)
        if L < 1:
            raise NetworkError("queueing network needs at least one node")
        if any(n < 0 for n in self.initial):
            raise NetworkError("initial buffer contents must be >= 0")
        if sum(self.initial) < 1:
            raise NetworkError("no customers in the network; no event can ever occur")
        if len(self.services) != L:
            raise NetworkError(f"{len(self.services)} service variates for {L} nodes")
        for vid in self.services:
            if vid not in self.variates:
                raise NetworkError(f"service variate {vid!r} is not declared")
            # a service that may end before it starts breaks both the simulator and unrolling
            if self.replay is None and self.variates[vid].family.lower_bound(self.variates.box) < 0:
                raise NetworkError(f"service variate {vid!r} can be negative over the parameter box")
        if self.replay is not None and min([self.replay.default, *(v for row in self.replay.values for v in row)]) < 0:
            raise NetworkError("replayed service times must be >= 0")
        self.routing.validate(L)
        K, M = self.target
        if not 1 <= K <= L or M < 1:
            raise NetworkError(f"target (K={K}, M={M}) invalid for {L} nodes")
        if self.event_cap < 1:
            raise NetworkError("event cap must be positive")

    @property
    def L(self) -> int:
        return len(self.initial)

    @property
    def dim(self) -> int:
        return self.variates.dim

    def service_spec(self, i: int) -> VariateSpec:
        return self.variates[self.services[i - 1]]

    def with_target(self, K: int, M: int) -> "QueueingNetwork":
        return replace(self, target=(K, M))

    def with_routing(self, routing: Routing) -> "QueueingNetwork":
        return replace(self, routing=routing)

    @cached_property
    def starves(self) -> bool:
        """True when node K can never see M departures under a routing table.

        Customers reach K only along table entries from occupied nodes; if no
        such path exists, K serves just its initial customers.
        """
        if not isinstance(self.routing, DeterministicRouting):
            return False
        K, M = self.target
        if self.initial[K - 1] >= M:
            return False
        seen, todo = set(), [r for i, n in enumerate(self.initial, 1) if n for r in self.routing.table[i - 1]]
        while todo:
            r = todo.pop()
            if r not in seen:
                seen.add(r)
                todo.extend(self.routing.table[r - 1])
        return K not in seen

    def certificate(self, measure: str = "t") -> DClassCertificate:
        K = self.target[0]
        return _certificate(self.variates, measure, (self.service_spec(K),), self.quotient_declared)


@dataclass
class EventTrace:
    """One replication of the queueing network.

    ``alpha[i-1][j-1]`` etc. hold the j-th arrival / service start / departure at
    node i; ``routes[i-1][j-1]`` the realized destination of that departure.
    When gradients were requested, ``gradients`` holds the per-customer
    d alpha, d beta, d delta at the target node K.
    """

    alpha: list[list[float]]
    beta: list[list[float]]
    delta: list[list[float]]
    tau: list[list[float]]
    routes: list[list[int]]
    status: str
    target: tuple[int, int]
    events: int
    gradients: dict | None = None
    registers: np.ndarray | None = field(default=None, repr=False)

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    def departure(self, i: int, j: int) -> float:
        return self.delta[i - 1][j - 1]


def prefetch_services(net: QueueingNetwork, theta, reps, streams: Streams, length: int, gradient: bool):
    """The first ``length`` service times of every node for many replications at once.

    Returns one ``(values (N, length), derivatives (N, length, dim) or None)``
    pair per node; row n belongs to ``reps[n]``.
    """
    reps = np.asarray(reps, dtype=np.int64)
    out = []
    for i in range(1, net.L + 1):
        spec = net.service_spec(i)
        u = streams.uniforms(reps[:, None], spec.stream_name, np.arange(length)[None, :])
        vals = np.asarray(spec.family.sample(theta, u), dtype=float)
        der = np.asarray(spec.family.derivative(theta, u, len(theta)), dtype=float) if gradient else None
        out.append((vals, der))
    return out


def _service_sampler(net: QueueingNetwork, theta, replication: int, streams: Streams | None, gradient: bool, prefetched=None):
    if net.replay is not None:
        dim = net.dim

        def fixed(i, j):
            return float(net.replay(i, j)), (np.zeros(dim) if gradient else None)

        return fixed
    specs = [net.service_spec(i) for i in range(1, net.L + 1)]
    dim = len(theta)
    # service j of node i reads counter j - 1 of the node's stream; draws are
    # made in growing vectorized blocks, the values do not depend on the block size
    if prefetched is None:
        values: list[list[float]] = [[] for _ in specs]
        derivs: list[np.ndarray] = [np.zeros((0, dim)) for _ in specs]
    else:
        values = [list(v) for v, _ in prefetched]
        derivs = [d if d is not None else np.zeros((0, dim)) for _, d in prefetched]

    def refill(k: int):
        have = len(values[k])
        block = max(32, have)
        u = streams.uniforms(np.full(block, replication), specs[k].stream_name, np.arange(have, have + block))
        fam = specs[k].family
        values[k].extend(np.asarray(fam.sample(theta, u), dtype=float).tolist())
        if gradient:
            derivs[k] = np.concatenate([derivs[k], np.asarray(fam.derivative(theta, u, dim), dtype=float)])

    def draw(i, j):
        k = i - 1
        while j > len(values[k]):
            refill(k)
        return values[k][j - 1], (derivs[k][j - 1] if gradient else None)

    return draw


def run_queueing(
    net: QueueingNetwork,
    theta,
    replication: int,
    streams: Streams | None,
    gradient: bool = False,
    service_times: Callable[[int, int], float] | Mapping | None = None,
    router: Callable[[int, int], int] | None = None,
    prefetched=None,
) -> EventTrace:
    """Event-driven FCFS run until the M-th departure from node K.

    Simultaneous departures are processed by ascending node, then ascending
    service index.  A departure first lets the next queued customer at its own
    node start, then arrives (instantaneously) at its destination.

    With ``gradient=True`` one register per node is kept: on the j-th
    completion at node i the register ``g_i`` gains d tau_ij / d theta, and a
    customer reaching an idle server r copies ``g_i`` into ``g_r``.
    """
    if prefetched is None:
        theta = net.variates.box.check(theta)
    L, (K, M) = net.L, net.target
    if service_times is not None:
        table = service_times
        dim = len(theta)

        def sampler(i, j):
            val = table(i, j) if callable(table) else table[(i, j)]
            return float(val), (np.zeros(dim) if gradient else None)

    else:
        sampler = _service_sampler(net, theta, replication, streams, gradient, prefetched)
    route = router or net.routing.realize(replication, streams)
    if router is None and net.starves:
        return EventTrace([[0.0] * n for n in net.initial], *([[] for _ in range(L)] for _ in range(4)), "starved", (K, M), 0)

    alpha = [[0.0] * n for n in net.initial]
    beta: list[list[float]] = [[] for _ in range(L)]
    delta: list[list[float]] = [[] for _ in range(L)]
    tau: list[list[float]] = [[] for _ in range(L)]
    dtau: list[list[np.ndarray]] = [[] for _ in range(L)]
    routes: list[list[int]] = [[] for _ in range(L)]
    waiting = [deque(range(n)) for n in net.initial]
    busy = [False] * L
    heap: list[tuple[float, int, int]] = []

    g = np.zeros((L, len(theta))) if gradient else None
    kk = K - 1
    rec = {"alpha": [np.zeros(len(theta)) for _ in range(net.initial[kk])], "beta": [], "delta": []} if gradient else None

    def start(i: int, now: float):
        waiting[i].popleft()
        j = len(beta[i]) + 1
        beta[i].append(now)
        t, dt = sampler(i + 1, j)
        tau[i].append(t)
        if gradient:
            dtau[i].append(dt)
            if i == kk:
                rec["beta"].append(g[i].copy())
        busy[i] = True
        heapq.heappush(heap, (now + t, i, j))

    for i in range(L):
        if waiting[i]:
            start(i, 0.0)

    status, events = "starved", 0
    while heap:
        now, i, j = heapq.heappop(heap)
        events += 1
        if events > net.event_cap:
            status = "event-cap-hit"
            break
        delta[i].append(now)
        busy[i] = False
        if gradient:
            g[i] += dtau[i][j - 1]
            if i == kk:
                rec["delta"].append(g[i].copy())
        if i == kk and j == M:
            status = "completed"
            break
        r = route(i + 1, j) - 1
        if not 0 <= r < L:
            raise NetworkError(f"routing sent departure ({i + 1}, {j}) to node {r + 1}")
        routes[i].append(r + 1)
        if waiting[i]:
            start(i, now)
        alpha[r].append(now)
        waiting[r].append(len(alpha[r]) - 1)
        if gradient and r == kk:
            rec["alpha"].append(g[i].copy())
        if not busy[r]:
            if gradient:
                g[r] = g[i]
            start(r, now)

    return EventTrace(alpha, beta, delta, tau, routes, status, (K, M), events, rec, g)


def simulate_queueing(net: QueueingNetwork, theta, replication: int, streams: Streams | None, **kw) -> EventTrace:
    return run_queueing(net, theta, replication, streams, gradient=False, **kw)


def verify_trace(trace: EventTrace, tol: float = 1e-9) -> list[str]:
    """Ordering and conservation checks; returns the list of violations."""
    problems = []
    L = len(trace.delta)
    for i in range(L):
        d_prev = 0.0
        for j, (b, d, t) in enumerate(zip(trace.beta[i], trace.delta[i], trace.tau[i]), 1):
            a = trace.alpha[i][j - 1]
            if not a <= b + tol:
                problems.append(f"alpha > beta at ({i + 1},{j})")
            if abs(d - (b + t)) > tol * max(1.0, abs(d)):
                problems.append(f"delta != beta + tau at ({i + 1},{j})")
            if abs(b - max(a, d_prev)) > tol * max(1.0, abs(b)):
                problems.append(f"beta != max(alpha, previous delta) at ({i + 1},{j})")
            d_prev = d
    arrivals = [0] * L
    for i in range(L):
        for r in trace.routes[i]:
            arrivals[r - 1] += 1
    for i in range(L):
        initial = len(trace.alpha[i]) - arrivals[i]
        if initial < 0:
            problems.append(f"node {i + 1} has fewer arrivals than routed departures")
    return problems


def measures(trace: EventTrace, K: int | None = None, M: int | None = None) -> dict[str, float]:
    """The five node-K measures over the first M customers."""
    K, M = (K, M) if K is not None else trace.target
    if M is None:
        M = trace.target[1]
    k = K - 1
    if len(trace.delta[k]) < M:
        raise IncompleteTraceError(trace)
    a, b, d = trace.alpha[k][:M], trace.beta[k][:M], trace.delta[k][:M]
    h = float(d[-1])
    total = float(sum(y - x for x, y in zip(a, d)))
    wait = float(sum(y - x for x, y in zip(a, b)))
    return {
        "delta": h,
        "t": total / M,
        "w": wait / M,
        "u": float(sum(trace.tau[k][:M])) / h,
        "c": total / h,
        "q": wait / h,
    }


def stochastic_measure_value(net: QueueingNetwork, theta, replication: int, streams: Streams) -> dict[str, float]:
    """Measures of one replication under random routing (or NaN if starved)."""
    trace = simulate_queueing(net, theta, replication, streams)
    if not trace.completed:
        return {m: math.nan for m in ("delta",) + MEASURES}
    return measures(trace)


# --------------------------------------------------------------------------
# symbolic unrolling of the queueing recursion


def service_var(i: int, j: int) -> str:
    return f"t{i}_{j}"


def unroll_queueing(
    net: QueueingNetwork,
    K: int | None = None,
    M: int | None = None,
    size_cap: int = alg.DEFAULT_SIZE_CAP,
    max_index: int = 200,
) -> alg.Expr:
    """Expression of delta_KM over the service-time variates ``t{i}_{j}``.

    Arrival j > n_i at node i is the (j - n_i)-th smallest of the candidate
    departures routed to i: the first j - n_i such departures from every other
    node, and those from i itself with index below j.  Candidates that can only
    be reached through the event currently being resolved are cut; service
    times are taken to be non-negative.
    """
    if not isinstance(net.routing, DeterministicRouting):
        raise NetworkError("symbolic unrolling needs a deterministic routing table")
    K, M = (K, M) if K is not None else net.target
    if M is None:
        M = net.target[1]
    routing, n, L = net.routing, net.initial, net.L
    memo: dict[tuple[int, int], alg.Expr | None] = {}
    active: set[tuple[int, int]] = set()
    leaves = [0]

    def departure(i: int, j: int):
        key = (i, j)
        if key in memo:
            return memo[key], False
        if key in active:
            return None, True
        if j > max_index:
            raise alg.SizeCapExceeded(f"unrolling needs departure {j} of node {i} (index cap {max_index})")
        active.add(key)
        a, cut = arrival(i, j)
        result = None
        own = alg.Var(service_var(i, j))
        at_zero = isinstance(a, alg.Const) and a.value == 0
        if a is not None and j == 1:
            result = own if at_zero else alg.add(a, own)
        elif a is not None:
            prev, cut_prev = departure(i, j - 1)
            cut = cut or cut_prev
            if prev is not None:
                result = alg.add(prev if at_zero else alg.maximum(a, prev), own)
        active.discard(key)
        if not cut:
            memo[key] = result
        return result, cut

    def arrival(i: int, j: int):
        if j <= n[i - 1]:
            return alg.Const(0), False
        need = j - n[i - 1]
        candidates, cut = [], False
        for k in range(1, L + 1):
            if not routing.ever_routes(k, i):
                continue
            found, m = 0, 1
            while found < need:
                if k == i and m >= j:
                    break
                if m > max_index:
                    raise alg.SizeCapExceeded(f"routing scan of node {k} passed index cap {max_index}")
                if routing.destination(k, m) == i:
                    d, c = departure(k, m)
                    cut = cut or c
                    if d is None:
                        break
                    candidates.append(d)
                    found += 1
                m += 1
        if len(candidates) < need:
            return None, cut
        expr = alg.order_statistic_expr(candidates, need)
        leaves[0] += len(candidates)
        if leaves[0] > size_cap:
            raise alg.SizeCapExceeded(f"unrolled expression exceeds size cap {size_cap}")
        return expr, cut

    try:
        result, _ = departure(K, M)
    except RecursionError:
        raise alg.SizeCapExceeded("unrolling recursion too deep") from None
    if result is None:
        raise NoRepresentationError(f"departure {M} of node {K} never occurs under the routing table")
    return result
