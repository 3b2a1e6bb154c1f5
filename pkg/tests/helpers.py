"""Random instance generators shared by the test modules."""

from __future__ import annotations

import random

import numpy as np

from stochnet import algebra as alg
from stochnet import networks as nw
from stochnet import variates as vr


def random_expr(rng: random.Random, max_leaves: int, names=("x1", "x2", "x3", "x4", "x5"), consts=True) -> alg.Expr:
    """Random max/min/+ tree with at most ``max_leaves`` leaves."""
    if max_leaves <= 1 or rng.random() < 0.25:
        if consts and rng.random() < 0.15:
            return alg.Const(rng.randint(-3, 3))
        return alg.Var(rng.choice(names))
    k = rng.randint(2, min(3, max_leaves))
    budget = max_leaves
    children = []
    for slot in range(k):
        share = max(1, budget // (k - slot))
        children.append(random_expr(rng, share, names, consts))
        budget -= children[-1].leaf_count()
        if budget < 1:
            break
    if len(children) == 1:
        return children[0]
    op = rng.choice((alg.maximum, alg.minimum, alg.add))
    return op(*children)


def random_dag(rng: random.Random, cls, max_nodes: int = 8, scale_params: bool = True):
    """Random DAG network over nodes 1..n with exponential scale durations."""
    n = rng.randint(1, max_nodes)
    arcs = [(a, b) for b in range(2, n + 1) for a in range(1, b) if rng.random() < 0.35]
    # make every non-first node reachable from some source
    heads = {b for _, b in arcs}
    for b in range(2, n + 1):
        if b not in heads and rng.random() < 0.5:
            arcs.append((rng.randint(1, b - 1), b))
    dim = n if scale_params else 1
    specs = [vr.exponential_scale(f"t{i}", i - 1 if scale_params else 0) for i in range(1, n + 1)]
    table = vr.table_from(specs, [0.5] * dim, [2.0] * dim)
    return nw.dag_network(cls, range(1, n + 1), arcs, table)


def random_queue(rng: random.Random, max_nodes: int = 3, max_m: int = 5, event_cap: int = 10_000):
    """Random small queueing network with a deterministic cyclic routing table."""
    L = rng.randint(1, max_nodes)
    initial = [rng.randint(0, 2) for _ in range(L)]
    if sum(initial) == 0:
        initial[rng.randrange(L)] = 1
    rows = tuple(tuple(rng.randint(1, L) for _ in range(rng.randint(1, 4))) for _ in range(L))
    K, M = rng.randint(1, L), rng.randint(1, max_m)
    specs = [vr.exponential_scale(f"s{i}", i - 1) for i in range(1, L + 1)]
    table = vr.table_from(specs, [0.5] * L, [2.0] * L)
    return nw.QueueingNetwork(
        tuple(initial), tuple(f"s{i}" for i in range(1, L + 1)), table, nw.DeterministicRouting(rows), (K, M), event_cap
    )


def service_assignment(net: nw.QueueingNetwork, theta, replication, streams, names):
    """Sampled values and derivatives of the service variates ``t{i}_{j}`` in ``names``."""
    values, derivs = {}, {}
    for name in names:
        i, j = map(int, name[1:].split("_"))
        spec = net.service_spec(i)
        u = streams.uniform(replication, spec.stream_name, j - 1)
        values[name] = float(spec.family.sample(theta, u))
        derivs[name] = np.asarray(spec.family.derivative(theta, u, len(theta)), dtype=float)
    return values, derivs


def dag_assignment(net: nw.DagNetwork, theta, replication, streams):
    tau, dtau = nw.sample_durations(net, theta, [replication], streams, derivatives=True)
    return {k: float(v[0]) for k, v in tau.items()}, {k: v[0] for k, v in dtau.items()}
