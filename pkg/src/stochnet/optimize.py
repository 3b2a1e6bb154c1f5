"""Projected Robbins-Monro iteration driven by IPA gradients."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import check_certificate
from .streams import Streams


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class Gain:
    """a_n = a / (n + s)."""

    a: float = 1.0
    s: float = 10.0

    def __post_init__(self):
        if self.a <= 0 or self.s <= 0:
            raise ValueError("gain needs a > 0 and s > 0 so that every a_n is positive")

    def __call__(self, n: int) -> float:
        return self.a / (n + self.s)


@dataclass
class OptimizationRun:
    theta: np.ndarray  # (iterations + 1, dim)
    gradients: np.ndarray  # (iterations, dim)
    gains: np.ndarray
    projections: int
    gain: Gain
    inner_n: int
    seed: int
    stopped: str
    potentially_biased: bool = False
    validation: dict = field(default_factory=dict)  # iteration -> (mean, stderr)

    @property
    def final(self) -> np.ndarray:
        return self.theta[-1]

    @property
    def iterations(self) -> int:
        return len(self.gradients)

    def csv(self) -> str:
        dim = self.theta.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n"] + [f"theta{k}" for k in range(dim)] + [f"grad{k}" for k in range(dim)] + ["gain", "objective", "objective_se"])
        for n in range(len(self.theta)):
            grad = self.gradients[n] if n < self.iterations else [math.nan] * dim
            gain = self.gains[n] if n < self.iterations else math.nan
            obj, se = self.validation.get(n, ("", ""))
            w.writerow([n] + [repr(float(x)) for x in self.theta[n]] + [repr(float(x)) for x in grad] + [repr(float(gain)), obj, se])
        return buf.getvalue()


def validate_objective(model, measure, theta, N, streams: Streams, offset: int) -> tuple[float, float]:
    vals = model.values(measure, theta, offset + np.arange(N), streams)
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def robbins_monro(
    model,
    measure,
    theta0,
    gain: Gain = Gain(),
    inner_n: int = 10,
    iterations: int = 1000,
    seed: int = 0,
    tol: float | None = None,
    allow_uncertified: bool = False,
    validate_n: int = 0,
) -> OptimizationRun:
    """Minimize E f(theta) over the model's box.

    theta_{n+1} = clip(theta_n - a_n G_n) where G_n averages ``inner_n`` sample
    gradients on replications ``n * inner_n + i``, so every iteration reads
    fresh uniforms.  With ``tol`` the loop stops once a step moves theta by
    less than ``tol`` (max norm).  With ``validate_n`` the objective is
    estimated at the first and last iterate on a separate stream family.
    """
    flag = check_certificate(model, measure, allow_uncertified)
    box = model.box
    theta = box.check(theta0).copy()
    streams = Streams(seed)
    history, grads, gains = [theta.copy()], [], []
    projections, stopped = 0, "iterations"
    base = np.arange(inner_n)
    for n in range(iterations):
        vals, g = model.gradients(measure, theta, n * inner_n + base, streams)
        G = np.nanmean(g, axis=0)
        if not np.all(np.isfinite(G)):
            raise NonFiniteGradientError(f"iteration {n}: gradient {G} is not finite (all inner replications starved?)")
        a = gain(n)
        step = theta - a * G
        new = box.project(step)
        projections += int(np.any(new != step))
        grads.append(G)
        gains.append(a)
        moved = float(np.max(np.abs(new - theta)))
        theta = new
        history.append(theta.copy())
        if tol is not None and moved < tol:
            stopped = "tolerance"
            break
    run = OptimizationRun(np.array(history), np.array(grads).reshape(-1, model.dim), np.array(gains), projections, gain, inner_n, seed, stopped, flag)
    if validate_n:
        check = Streams(seed ^ 0x5EED)
        for n in (0, len(history) - 1):
            run.validation[n] = validate_objective(model, measure, history[n], validate_n, check, 0)
    return run
