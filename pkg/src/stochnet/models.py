"""Model adapters seen by the estimators and the optimizer.

A model maps ``(measure, theta, replication indices, streams)`` to one sample
value per replication, and optionally to one sample gradient per replication.
Replication ``r`` always reads the same uniforms, whatever theta is, which is
what makes CRN pairing and single-run IPA exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ipa
from .networks import MEASURES, DagNetwork, QueueingNetwork, ReliabilityNetwork
from .streams import Streams
from .variates import Box, DClassCertificate, VariateCertificate, Violation


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkModel:
    """Activity / reliability / queueing network with a chosen default measure."""

    net: DagNetwork | QueueingNetwork
    name: str = "network"

    # values/gradients accept a tuple of measures and return a measure axis
    multi_measure = True

    @property
    def dim(self) -> int:
        return self.net.dim

    @property
    def box(self) -> Box:
        return self.net.variates.box

    @property
    def kind(self) -> str:
        return self.net.kind

    @property
    def measures(self) -> tuple[str, ...]:
        if isinstance(self.net, QueueingNetwork):
            return ("delta",) + MEASURES
        return ("t",)

    def _check(self, measure):
        for m in (measure,) if isinstance(measure, str) else measure:
            if m not in self.measures:
                raise MeasureError(f"{self.kind} network has no measure {m!r}; choose from {self.measures}")

    def certificate(self, measure: str) -> DClassCertificate:
        self._check(measure)
        return self.net.certificate("t" if measure == "delta" else measure)

    def values(self, measure, theta, reps, streams: Streams) -> np.ndarray:
        self._check(measure)
        if isinstance(self.net, QueueingNetwork):
            return ipa.queueing_batch(self.net, measure, theta, reps, streams, gradient=False)[0]
        v = ipa.dag_values(self.net, theta, reps, streams, isinstance(self.net, ReliabilityNetwork))
        return v if isinstance(measure, str) else v[:, None]

    def gradients(self, measure, theta, reps, streams: Streams):
        self._check(measure)
        if isinstance(self.net, QueueingNetwork):
            return ipa.queueing_batch(self.net, measure, theta, reps, streams, gradient=True)
        if isinstance(self.net, ReliabilityNetwork):
            v, g = ipa.reliability_batch(self.net, theta, reps, streams)
        else:
            v, g = ipa.activity_batch(self.net, theta, reps, streams)
        return (v, g) if isinstance(measure, str) else (v[:, None], g[:, None, :])


@dataclass(frozen=True)
class FunctionModel:
    """A closed-form sample function ``f(theta, U)`` of ``n_uniforms`` uniforms.

    ``value_fn(theta, U)`` and ``grad_fn(theta, U)`` take ``U`` of shape
    (N, n_uniforms) and return shapes (N,) and (N, dim).  Use module-level
    functions so the model pickles for process workers.
    """

    name: str
    value_fn: Callable
    grad_fn: Callable | None
    box: Box
    n_uniforms: int = 1
    certified: bool = True

    kind = "function"
    measures = ("f",)

    @property
    def dim(self) -> int:
        return self.box.dim

    def certificate(self, measure: str = "f") -> DClassCertificate:
        variates = tuple(VariateCertificate(f"w{k}", True, "declared", 0.0, True, True) for k in range(self.n_uniforms))
        bad = () if self.certified else (Violation("differentiability", (self.name,), "declared uncertified"),)
        return DClassCertificate(measure, variates, bad)

    def _uniforms(self, reps, streams: Streams) -> np.ndarray:
        reps = np.atleast_1d(np.asarray(reps, dtype=np.int64))
        return np.stack([streams.uniforms(reps, f"w{k}", 0) for k in range(self.n_uniforms)], axis=1)

    def values(self, measure: str, theta, reps, streams: Streams) -> np.ndarray:
        theta = self.box.check(theta)
        return np.asarray(self.value_fn(theta, self._uniforms(reps, streams)), dtype=float)

    def gradients(self, measure: str, theta, reps, streams: Streams):
        if self.grad_fn is None:
            raise MeasureError(f"model {self.name!r} has no sample gradient")
        theta = self.box.check(theta)
        U = self._uniforms(reps, streams)
        return np.asarray(self.value_fn(theta, U), dtype=float), np.asarray(self.grad_fn(theta, U), dtype=float)


@dataclass(frozen=True)
class ReciprocalCost:
    """``base measure + sum_k weights[k] / theta[k]``; a deterministic cost term."""

    base: NetworkModel | FunctionModel
    weights: tuple[float, ...] = field(default=())

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def box(self) -> Box:
        return self.base.box

    @property
    def kind(self) -> str:
        return self.base.kind

    @property
    def measures(self):
        return self.base.measures

    @property
    def multi_measure(self) -> bool:
        return getattr(self.base, "multi_measure", False)

    def certificate(self, measure: str) -> DClassCertificate:
        return self.base.certificate(measure)

    def _w(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.dim,):
            raise MeasureError(f"need {self.dim} cost weights, got {len(w)}")
        return w

    def cost(self, theta) -> float:
        return float(np.sum(self._w() / np.asarray(theta, dtype=float)))

    def values(self, measure: str, theta, reps, streams: Streams) -> np.ndarray:
        return self.base.values(measure, theta, reps, streams) + self.cost(theta)

    def gradients(self, measure: str, theta, reps, streams: Streams):
        v, g = self.base.gradients(measure, theta, reps, streams)
        th = np.asarray(theta, dtype=float)
        return v + self.cost(theta), g - self._w() / th**2


# closed-form sample functions used as estimator fixtures


def _identity(theta, U):
    return np.full(len(U), theta[0])


def _ones(theta, U):
    return np.ones((len(U), 1))


def _linear(theta, U):
    return theta[0] * U[:, 0]


def _linear_grad(theta, U):
    return U[:, :1].copy()


def _cubic(theta, U):
    return theta[0] ** 3 + (U[:, 0] - 0.5)


def _cubic_grad(theta, U):
    return np.full((len(U), 1), 3 * theta[0] ** 2)


def _quadratic(theta, U):
    return np.full(len(U), (theta[0] - 1.0) ** 2)


def _quadratic_grad(theta, U):
    return np.full((len(U), 1), 2 * (theta[0] - 1.0))


def _max_exp(theta, U):
    x, y = -np.log1p(-U[:, 0]), -np.log1p(-U[:, 1])
    return np.maximum(theta[0] * x, theta[1] * y)


def _max_exp_grad(theta, U):
    x, y = -np.log1p(-U[:, 0]), -np.log1p(-U[:, 1])
    first = theta[0] * x >= theta[1] * y
    return np.stack([np.where(first, x, 0.0), np.where(first, 0.0, y)], axis=1)


def identity_model(lower=-10.0, upper=10.0) -> FunctionModel:
    """f = theta, no noise."""
    return FunctionModel("identity", _identity, _ones, Box((lower,), (upper,)))


def linear_model(lower=-10.0, upper=10.0) -> FunctionModel:
    """f = theta * w with w uniform; F = theta / 2."""
    return FunctionModel("linear", _linear, _linear_grad, Box((lower,), (upper,)))


def cubic_model(lower=-10.0, upper=10.0) -> FunctionModel:
    """f = theta**3 + (w - 1/2); F' = 3 theta**2."""
    return FunctionModel("cubic", _cubic, _cubic_grad, Box((lower,), (upper,)))


def quadratic_model(lower=-10.0, upper=10.0) -> FunctionModel:
    """f = (theta - 1)**2, deterministic."""
    return FunctionModel("quadratic", _quadratic, _quadratic_grad, Box((lower,), (upper,)))


def max_exp_model(lower=(0.1, 0.1), upper=(10.0, 10.0)) -> FunctionModel:
    """max(theta1 X, theta2 Y) for independent standard exponentials X, Y."""
    return FunctionModel("max-exp", _max_exp, _max_exp_grad, Box(tuple(lower), tuple(upper)), n_uniforms=2)


def max_exp_mean(theta) -> float:
    a, b = float(theta[0]), float(theta[1])
    return a + b - a * b / (a + b)


def max_exp_gradient(theta) -> np.ndarray:
    a, b = float(theta[0]), float(theta[1])
    return np.array([1 - (b / (a + b)) ** 2, 1 - (a / (a + b)) ** 2])
