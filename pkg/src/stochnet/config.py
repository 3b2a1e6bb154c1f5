"""Model files: a strict JSON schema and its translation into model objects.

Unknown fields are rejected.  Every problem is reported as a
:class:`ConfigError` carrying the dotted field path, e.g.
``network.routing.table[1][2]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import networks as nw
from . import variates as vr
from .models import NetworkModel

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AffineSpec(_Strict):
    """``const + sum(coef * theta[index])``; ``{"param": k}`` is shorthand for theta[k]."""

    const: float = 0.0
    terms: list[tuple[int, float]] = []
    param: Optional[int] = None

    def build(self) -> vr.Affine:
        terms = list(self.terms) + ([(self.param, 1.0)] if self.param is not None else [])
        return vr.Affine(0.0).combine(0.0, vr.Affine(self.const, tuple(terms)), 1.0)


Scalar = Union[float, AffineSpec]


def _affine(x: Scalar) -> vr.Affine:
    return x.build() if isinstance(x, AffineSpec) else vr.Affine(float(x))


class LocationScaleSpec(_Strict):
    id: str
    family: Literal["location-scale"]
    base: Literal["exponential", "uniform", "normal", "truncnorm"] = "exponential"
    lo: Optional[float] = None
    hi: Optional[float] = None
    scale: Scalar = 1.0
    loc: Scalar = 0.0
    stream: Optional[str] = None

    @model_validator(mode="after")
    def _bounds(self):
        if self.base == "truncnorm":
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError("truncnorm needs lo < hi")
        elif self.lo is not None or self.hi is not None:
            raise ValueError("lo/hi only apply to the truncnorm base")
        return self

    def build(self) -> vr.VariateSpec:
        base = vr.truncated_normal(self.lo, self.hi) if self.base == "truncnorm" else vr.BASES[self.base]
        return vr.VariateSpec(self.id, vr.LocationScale(base, _affine(self.scale), _affine(self.loc)), self.stream)


class InverseTransformSpec(_Strict):
    id: str
    family: Literal["inverse-transform"]
    name: str
    params: list[int]
    stream: Optional[str] = None

    def build(self) -> vr.VariateSpec:
        return vr.VariateSpec(self.id, vr.InverseTransform(self.name, tuple(self.params)), self.stream)


class AtomMixtureSpec(_Strict):
    id: str
    family: Literal["atom-mixture"]
    p_atom: float = Field(gt=0.0, lt=1.0)
    atom: float
    param: int
    coef: float = 1.0
    power: float = 1.0
    stream: Optional[str] = None

    def build(self) -> vr.VariateSpec:
        return vr.VariateSpec(self.id, vr.AtomMixture(self.p_atom, self.atom, self.param, self.coef, self.power), self.stream)


class ConstantSpec(_Strict):
    id: str
    family: Literal["constant"]
    value: Scalar

    def build(self) -> vr.VariateSpec:
        return vr.VariateSpec(self.id, vr.Constant(_affine(self.value)))


VariateEntry = Annotated[
    Union[LocationScaleSpec, InverseTransformSpec, AtomMixtureSpec, ConstantSpec],
    Field(discriminator="family"),
]


class DagSpec(_Strict):
    kind: Literal["activity", "reliability"]
    nodes: list[Union[int, str]]
    arcs: list[tuple[Union[int, str], Union[int, str]]] = []
    durations: Optional[dict[str, str]] = None


class TableRouting(_Strict):
    policy: Literal["table"]
    table: list[list[int]]
    tail: Literal["cycle", "last"] = "cycle"


class StochasticRoutingSpec(_Strict):
    policy: Literal["stochastic"]
    probabilities: list[list[float]]


class MixtureRouting(_Strict):
    policy: Literal["mixture"]
    tables: list[list[list[int]]]
    weights: list[float]
    tail: Literal["cycle", "last"] = "cycle"


RoutingEntry = Annotated[Union[TableRouting, StochasticRoutingSpec, MixtureRouting], Field(discriminator="policy")]


class ReplaySpec(_Strict):
    values: list[list[float]]
    default: float


class QueueSpec(_Strict):
    kind: Literal["queueing"]
    initial: list[int]
    services: list[str]
    routing: RoutingEntry
    replay: Optional[ReplaySpec] = None
    event_cap: int = Field(default=nw.DEFAULT_EVENT_CAP, ge=1)
    quotient_declared: bool = False


class ThetaSpec(_Strict):
    lower: list[float]
    upper: list[float]
    default: Optional[list[float]] = None


class TargetSpec(_Strict):
    K: Optional[int] = None
    M: Optional[int] = None
    measure: Optional[str] = None


class DefaultsSpec(_Strict):
    seed: int = 0
    N: int = Field(default=1000, ge=1)
    delta: Optional[float] = Field(default=None, gt=0.0)


class OracleSpec(_Strict):
    theta: list[float]
    gradient: list[float]
    source: str = ""


class CostSpec(_Strict):
    reciprocal: list[float]


class ModelFile(_Strict):
    schema_version: Literal[1] = Field(alias="schema")
    description: str = ""
    network: Annotated[Union[DagSpec, QueueSpec], Field(discriminator="kind")]
    variates: list[VariateEntry]
    theta: ThetaSpec
    target: TargetSpec = TargetSpec()
    defaults: DefaultsSpec = DefaultsSpec()
    oracle: Optional[OracleSpec] = None
    cost: Optional[CostSpec] = None


@dataclass(frozen=True)
class LoadedModel:
    model: NetworkModel
    measure: str
    theta: np.ndarray
    seed: int
    N: int
    delta: float | None
    oracle: OracleSpec | None
    cost: tuple[float, ...] | None
    spec: ModelFile

    @property
    def net(self):
        return self.model.net


# pydantic inserts the chosen union member's tag into error locations
_TAGS = {
    "location-scale", "inverse-transform", "atom-mixture", "constant",
    "activity", "reliability", "queueing", "table", "stochastic", "mixture",
}


def _path(loc) -> str:
    out = ""
    for part in loc:
        if part in _TAGS:
            continue
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def _check_table(table, L: int, where: str):
    if len(table) != L:
        raise ConfigError(where, f"{len(table)} rows for {L} nodes")
    for i, row in enumerate(table):
        if not row:
            raise ConfigError(f"{where}[{i}]", "empty routing row")
        for j, s in enumerate(row):
            if not 1 <= s <= L:
                raise ConfigError(f"{where}[{i}][{j}]", f"destination {s} outside 1..{L}")


def _routing(spec, L: int) -> nw.Routing:
    if isinstance(spec, TableRouting):
        _check_table(spec.table, L, "network.routing.table")
        return nw.DeterministicRouting(tuple(map(tuple, spec.table)), spec.tail)
    if isinstance(spec, MixtureRouting):
        for k, t in enumerate(spec.tables):
            _check_table(t, L, f"network.routing.tables[{k}]")
        tables = tuple(nw.DeterministicRouting(tuple(map(tuple, t)), spec.tail) for t in spec.tables)
        return nw.TableMixtureRouting(tables, tuple(spec.weights))
    return nw.StochasticRouting(tuple(map(tuple, spec.probabilities)))


def _build(cfg: ModelFile) -> LoadedModel:
    try:
        box = vr.Box(tuple(cfg.theta.lower), tuple(cfg.theta.upper))
    except ValueError as exc:
        raise ConfigError("theta", str(exc)) from None
    specs = []
    for k, v in enumerate(cfg.variates):
        try:
            specs.append(v.build())
        except ValueError as exc:
            raise ConfigError(f"variates[{k}]", str(exc)) from None
    try:
        table = vr.VariateTable(tuple(specs), box)
    except ValueError as exc:
        raise ConfigError("variates", str(exc)) from None

    net_spec, target = cfg.network, cfg.target
    try:
        if isinstance(net_spec, DagSpec):
            cls = nw.ActivityNetwork if net_spec.kind == "activity" else nw.ReliabilityNetwork
            net = nw.dag_network(cls, net_spec.nodes, net_spec.arcs, table, net_spec.durations)
            measure = target.measure or "t"
            if target.K is not None or target.M is not None:
                raise ConfigError("target", "K and M only apply to queueing networks")
        else:
            L = len(net_spec.initial)
            routing = _routing(net_spec.routing, L)
            replay = nw.Replay(tuple(map(tuple, net_spec.replay.values)), net_spec.replay.default) if net_spec.replay else None
            K, M = target.K or 1, target.M or 1
            net = nw.QueueingNetwork(
                tuple(net_spec.initial),
                tuple(net_spec.services),
                table,
                routing,
                (K, M),
                net_spec.event_cap,
                replay,
                net_spec.quotient_declared,
            )
            measure = target.measure or "delta"
    except nw.NetworkError as exc:
        raise ConfigError("network", str(exc)) from None

    model = NetworkModel(net, cfg.description or net.kind)
    if measure not in model.measures:
        raise ConfigError("target.measure", f"{measure!r} is not one of {model.measures}")
    theta = np.asarray(cfg.theta.default if cfg.theta.default is not None else box.lower, dtype=float)
    if len(theta) != box.dim or not box.contains(theta):
        raise ConfigError("theta.default", f"{theta.tolist()} is not inside the box")
    if cfg.oracle is not None and (len(cfg.oracle.theta) != box.dim or len(cfg.oracle.gradient) != box.dim):
        raise ConfigError("oracle", f"theta and gradient need {box.dim} entries")
    cost = None
    if cfg.cost is not None:
        if len(cfg.cost.reciprocal) != box.dim:
            raise ConfigError("cost.reciprocal", f"need {box.dim} weights")
        cost = tuple(cfg.cost.reciprocal)
    d = cfg.defaults
    return LoadedModel(model, measure, theta, d.seed, d.N, d.delta, cfg.oracle, cost, cfg)


def parse_model(data: dict) -> LoadedModel:
    try:
        cfg = ModelFile.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_path(err["loc"]), err["msg"]) from None
    return _build(cfg)


def load_model(path: str | Path) -> LoadedModel:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}", exc.msg) from None
    if not isinstance(data, dict):
        raise ConfigError("", "model file must hold a JSON object")
    return parse_model(data)


FIXTURES = Path(__file__).with_name("fixtures")


def fixture_path(name: str) -> Path:
    return FIXTURES / (name if name.endswith(".json") else name + ".json")


def load_fixture(name: str) -> LoadedModel:
    return load_model(fixture_path(name))
