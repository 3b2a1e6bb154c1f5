"""Parameterized random variates and the unbiasedness certificate.

Every variate is an inverse transform of one uniform draw, ``tau = F(theta, u)``,
so fixing the uniform stream fixes the sample path.  Families carry their
parameter derivative and the analytic facts needed to certify that the IPA
estimator built from them is unbiased: pathwise differentiability, a Lipschitz
constant with finite mean, continuity of the distribution, and independence
(distinct uniform streams).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy import integrate, special

QUOTIENT_MEASURES = frozenset({"u", "c", "q"})


class ParameterError(ValueError):
    """theta outside the admissible box, or an inadmissible box."""


# --------------------------------------------------------------------------
# parameter box and affine parameter maps


@dataclass(frozen=True)
class Box:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ParameterError("box bounds differ in length")
        for lo, hi in zip(self.lower, self.upper):
            if not lo <= hi:
                raise ParameterError(f"empty box side [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, theta, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return theta.shape == (self.dim,) and bool(
            np.all(theta >= np.asarray(self.lower) - tol) and np.all(theta <= np.asarray(self.upper) + tol)
        )

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ParameterError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        if not self.contains(theta):
            raise ParameterError(f"theta={theta.tolist()} outside box {list(self.lower)}..{list(self.upper)}")
        return theta

    def project(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)


@dataclass(frozen=True)
class Affine:
    """``const + sum_k coeffs[k] * theta[k]``."""

    const: float = 0.0
    coeffs: tuple[tuple[int, float], ...] = ()

    @classmethod
    def param(cls, index: int, scale: float = 1.0, const: float = 0.0) -> "Affine":
        return cls(const, ((index, scale),))

    def __call__(self, theta) -> float:
        return self.const + sum(c * theta[k] for k, c in self.coeffs)

    def grad(self, dim: int) -> np.ndarray:
        g = np.zeros(dim)
        for k, c in self.coeffs:
            g[k] += c
        return g

    def norm(self) -> float:
        return math.sqrt(sum(c * c for _, c in self.coeffs))

    def min_over(self, box: Box) -> float:
        return self.const + sum(min(c * box.lower[k], c * box.upper[k]) for k, c in self.coeffs)

    def max_over(self, box: Box) -> float:
        return self.const + sum(max(c * box.lower[k], c * box.upper[k]) for k, c in self.coeffs)

    def combine(self, a: float, other: "Affine", b: float) -> "Affine":
        acc: dict[int, float] = {}
        for k, c in self.coeffs:
            acc[k] = acc.get(k, 0.0) + a * c
        for k, c in other.coeffs:
            acc[k] = acc.get(k, 0.0) + b * c
        return Affine(a * self.const + b * other.const, tuple(sorted(acc.items())))


# --------------------------------------------------------------------------
# standard base variables (quantile functions)


@dataclass(frozen=True)
class Base:
    name: str
    lo: float = -math.inf
    hi: float = math.inf

    def quantile(self, u):
        if self.name == "exponential":
            return -np.log1p(-u)
        if self.name == "uniform":
            return u
        if self.name == "normal":
            return special.ndtri(u)
        if self.name == "truncnorm":
            a, b = special.ndtr(self.lo), special.ndtr(self.hi)
            return special.ndtri(a + u * (b - a))
        raise ValueError(f"unknown base variable {self.name!r}")

    @property
    def support_lower(self) -> float:
        return {"exponential": 0.0, "uniform": 0.0, "normal": -math.inf}.get(self.name, self.lo)

    def mean_abs(self) -> float:
        if self.name == "exponential":
            return 1.0
        if self.name == "uniform":
            return 0.5
        if self.name == "normal":
            return math.sqrt(2.0 / math.pi)
        val, _ = integrate.quad(lambda u: abs(float(self.quantile(u))), 0.0, 1.0, limit=200)
        return val


BASES = {
    "exponential": Base("exponential"),
    "uniform": Base("uniform"),
    "normal": Base("normal"),
}


def truncated_normal(lo: float, hi: float) -> Base:
    if not lo < hi:
        raise ValueError("truncated normal needs lo < hi")
    return Base("truncnorm", float(lo), float(hi))


# --------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class LocationScale:
    """``scale(theta) * xi(u) + loc(theta)`` for a standard base variable xi."""

    base: Base
    scale: Affine = Affine(1.0)
    loc: Affine = Affine(0.0)

    def sample(self, theta, u):
        return self.scale(theta) * self.base.quantile(u) + self.loc(theta)

    def derivative(self, theta, u, dim: int):
        xi = np.asarray(self.base.quantile(u), dtype=float)
        return xi[..., None] * self.scale.grad(dim) + self.loc.grad(dim)

    continuous = True

    def lipschitz(self, box: Box) -> tuple[str, float]:
        s, l = self.scale.norm(), self.loc.norm()
        return f"|xi|*{s:g} + {l:g}", self.base.mean_abs() * s + l

    def lower_bound(self, box: Box) -> float:
        lo = self.base.support_lower
        if math.isinf(lo):
            return -math.inf
        return self.scale.combine(lo, self.loc, 1.0).min_over(box)


@dataclass(frozen=True)
class Transform:
    """A named inverse-transform family (registered below)."""

    value: Callable
    derivative: Callable
    continuous: bool
    lipschitz: Callable
    lower_bound: Callable


def _weibull_value(theta, u, p):
    e = -np.log1p(-u)
    return theta[p[0]] * e ** (1.0 / theta[p[1]])


def _weibull_derivative(theta, u, p, dim):
    a, b = theta[p[0]], theta[p[1]]
    e = np.asarray(-np.log1p(-u), dtype=float)
    pw = e ** (1.0 / b)
    out = np.zeros(e.shape + (dim,))
    out[..., p[0]] = pw
    with np.errstate(divide="ignore", invalid="ignore"):
        out[..., p[1]] = np.where(e > 0, -a * pw * np.log(e) / (b * b), 0.0)
    return out


def _weibull_lipschitz(box: Box, p):
    a_hi = box.upper[p[0]]
    b_lo, b_hi = box.lower[p[1]], box.upper[p[1]]

    def lam(u):
        e = -math.log1p(-u)
        pw = max(e ** (1.0 / b_lo), e ** (1.0 / b_hi))
        return pw + a_hi * pw * abs(math.log(e)) / (b_lo * b_lo) if e > 0 else 0.0

    val, _ = integrate.quad(lam, 0.0, 1.0, limit=200)
    return "sup_theta |dtau/dtheta| (weibull)", val


TRANSFORMS: dict[str, Transform] = {
    "weibull": Transform(
        _weibull_value, _weibull_derivative, True, _weibull_lipschitz, lambda box, p: 0.0
    ),
}


def register_transform(name: str, transform: Transform) -> None:
    TRANSFORMS[name] = transform


@dataclass(frozen=True)
class InverseTransform:
    name: str
    params: tuple[int, ...]

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.name!r}; known: {sorted(TRANSFORMS)}")

    @property
    def continuous(self) -> bool:
        return TRANSFORMS[self.name].continuous

    def sample(self, theta, u):
        return TRANSFORMS[self.name].value(theta, u, self.params)

    def derivative(self, theta, u, dim: int):
        return TRANSFORMS[self.name].derivative(theta, u, self.params, dim)

    def lipschitz(self, box: Box) -> tuple[str, float]:
        return TRANSFORMS[self.name].lipschitz(box, self.params)

    def lower_bound(self, box: Box) -> float:
        return TRANSFORMS[self.name].lower_bound(box, self.params)


@dataclass(frozen=True)
class AtomMixture:
    """``coef * theta[param]**power`` when ``u <= 1 - p_atom``, else the constant ``atom``.

    The atom makes the distribution discontinuous, which is exactly what the
    certificate has to catch.
    """

    p_atom: float
    atom: float
    param: int
    coef: float = 1.0
    power: float = 1.0

    continuous = False

    def _branch(self, u):
        return np.asarray(u) <= 1.0 - self.p_atom

    def sample(self, theta, u):
        val = np.where(self._branch(u), self.coef * theta[self.param] ** self.power, self.atom)
        return val if val.ndim else float(val)

    def derivative(self, theta, u, dim: int):
        b = self._branch(u)
        out = np.zeros(b.shape + (dim,))
        out[..., self.param] = np.where(b, self.coef * self.power * theta[self.param] ** (self.power - 1), 0.0)
        return out

    def lipschitz(self, box: Box) -> tuple[str, float]:
        lo, hi = box.lower[self.param], box.upper[self.param]
        grid = np.linspace(lo, hi, 257)
        bound = float(np.max(np.abs(self.coef * self.power * grid ** (self.power - 1))))
        return f"{bound:g} (deterministic)", bound

    def lower_bound(self, box: Box) -> float:
        grid = np.linspace(box.lower[self.param], box.upper[self.param], 257)
        return float(min(self.atom, np.min(self.coef * grid**self.power)))


@dataclass(frozen=True)
class Constant:
    """A degenerate variate ``value(theta)``; no randomness at all."""

    value: Affine

    continuous = False

    def sample(self, theta, u):
        v = self.value(theta)
        return np.full(np.shape(u), v) if np.ndim(u) else v

    def derivative(self, theta, u, dim: int):
        return np.broadcast_to(self.value.grad(dim), np.shape(u) + (dim,)).copy()

    def lipschitz(self, box: Box) -> tuple[str, float]:
        n = self.value.norm()
        return f"{n:g} (deterministic)", n

    def lower_bound(self, box: Box) -> float:
        return self.value.min_over(box)


Family = Union[LocationScale, InverseTransform, AtomMixture, Constant]


@dataclass(frozen=True)
class VariateSpec:
    """One random duration ``tau(theta, u)``.

    ``stream`` names the uniform stream the variate reads; variates sharing a
    stream are dependent.  Defaults to the variate id.
    """

    id: str
    family: Family
    stream: str | None = None

    @property
    def stream_name(self) -> str:
        return self.stream or self.id


def _check_u(u):
    arr = np.asarray(u)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("uniform argument must lie in the open interval (0, 1)")


def sample(spec: VariateSpec, theta, u, box: Box | None = None):
    """Value of the variate at parameter ``theta`` and uniform seed ``u``."""
    theta = box.check(theta) if box is not None else np.asarray(theta, dtype=float)
    _check_u(u)
    return spec.family.sample(theta, u)


def sample_derivative(spec: VariateSpec, theta, u, box: Box | None = None) -> np.ndarray:
    """d tau / d theta at fixed ``u``; shape ``u.shape + (dim,)``."""
    theta = box.check(theta) if box is not None else np.asarray(theta, dtype=float)
    _check_u(u)
    return spec.family.derivative(theta, u, len(theta))


@dataclass(frozen=True)
class VariateTable:
    """The variates of one model and the box Theta they are parameterized over."""

    specs: tuple[VariateSpec, ...]
    box: Box

    def __post_init__(self):
        ids = [s.id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate variate ids")
        for s in self.specs:
            fam = s.family
            if isinstance(fam, LocationScale):
                for k, _ in fam.scale.coeffs + fam.loc.coeffs:
                    if not 0 <= k < self.box.dim:
                        raise ParameterError(f"variate {s.id!r} refers to theta[{k}] outside dimension {self.box.dim}")
                if fam.scale.min_over(self.box) <= 0.0:
                    raise ParameterError(f"variate {s.id!r}: scale is not strictly positive over the box")
            elif isinstance(fam, InverseTransform):
                if any(not 0 <= k < self.box.dim for k in fam.params):
                    raise ParameterError(f"variate {s.id!r} refers to a parameter outside the box")
            elif isinstance(fam, AtomMixture) and not 0 <= fam.param < self.box.dim:
                raise ParameterError(f"variate {s.id!r} refers to a parameter outside the box")

    @property
    def dim(self) -> int:
        return self.box.dim

    def __getitem__(self, vid: str) -> VariateSpec:
        for s in self.specs:
            if s.id == vid:
                return s
        raise KeyError(vid)

    def __contains__(self, vid: str) -> bool:
        return any(s.id == vid for s in self.specs)

    def ids(self) -> list[str]:
        return [s.id for s in self.specs]


# --------------------------------------------------------------------------
# certificate


@dataclass(frozen=True)
class Violation:
    hypothesis: str  # differentiability | lipschitz | continuity | independence | quotient
    variates: tuple[str, ...]
    detail: str

    def __str__(self) -> str:
        return f"{self.hypothesis} violated by {', '.join(self.variates)}: {self.detail}"


@dataclass(frozen=True)
class VariateCertificate:
    id: str
    differentiable: bool
    lipschitz: str
    lipschitz_mean_bound: float
    continuous: bool
    independent: bool


@dataclass(frozen=True)
class DClassCertificate:
    measure: str
    variates: tuple[VariateCertificate, ...]
    violations: tuple[Violation, ...]
    quotient: dict | None = field(default=None, compare=False)

    @property
    def passed(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.passed

    def summary(self) -> str:
        if self.passed:
            return f"certified for measure {self.measure!r}"
        return "; ".join(str(v) for v in self.violations)


def check_dclass(
    table: VariateTable,
    measure: str = "t",
    denominator: Sequence[VariateSpec] = (),
    quotient_declared: bool = False,
) -> DClassCertificate:
    """Check the sufficient conditions for unbiased IPA gradients.

    Every variate must be pathwise differentiable and Lipschitz in theta with an
    integrable constant; all variates must be continuous and mutually
    independent.  For the ratio measures ``u``, ``c``, ``q`` the denominator's
    service times (``denominator``) must also admit a strictly positive
    deterministic lower bound over the box, unless the caller declares the
    moment condition satisfied.  The check is sound, not complete.
    """
    specs = sorted(table.specs, key=lambda s: s.id)
    by_stream: dict[str, list[str]] = {}
    for s in specs:
        by_stream.setdefault(s.stream_name, []).append(s.id)
    shared = {sid for ids in by_stream.values() if len(ids) > 1 for sid in ids}

    violations: list[Violation] = []
    per_variate = []
    for s in specs:
        desc, bound = s.family.lipschitz(table.box)
        finite = math.isfinite(bound)
        cont = bool(s.family.continuous)
        per_variate.append(VariateCertificate(s.id, True, desc, bound, cont, s.id not in shared))
        if not finite:
            violations.append(Violation("lipschitz", (s.id,), "Lipschitz constant has infinite mean"))
        if not cont:
            violations.append(Violation("continuity", (s.id,), f"{type(s.family).__name__} has an atom"))
    for stream_name, ids in sorted(by_stream.items()):
        if len(ids) > 1:
            violations.append(
                Violation("independence", tuple(ids), f"variates share the uniform stream {stream_name!r}")
            )

    quotient = None
    if measure in QUOTIENT_MEASURES:
        bounds = {s.id: s.family.lower_bound(table.box) for s in denominator}
        nu = min(bounds.values()) if bounds else -math.inf
        ok = quotient_declared or nu > 0.0
        quotient = {"lower_bound": nu, "declared": quotient_declared, "satisfied": ok}
        if not ok:
            violations.append(
                Violation(
                    "quotient",
                    tuple(sorted(bounds)) or ("<denominator>",),
                    "denominator has no positive lower bound over the box and the moment condition is not declared",
                )
            )
    return DClassCertificate(measure, tuple(per_variate), tuple(violations), quotient)


def location_scale(
    vid: str,
    base: str | Base = "exponential",
    scale: Affine | float | int = 1.0,
    loc: Affine | float | int = 0.0,
    stream: str | None = None,
) -> VariateSpec:
    """Shorthand; an int ``scale``/``loc`` is read as a parameter index."""
    b = BASES[base] if isinstance(base, str) else base

    def affine(x):
        if isinstance(x, Affine):
            return x
        if isinstance(x, int) and not isinstance(x, bool):
            return Affine.param(x)
        return Affine(float(x))

    return VariateSpec(vid, LocationScale(b, affine(scale), affine(loc)), stream)


def exponential_scale(vid: str, param: int, stream: str | None = None) -> VariateSpec:
    """``tau = -theta[param] * log(1 - u)``."""
    return location_scale(vid, "exponential", Affine.param(param), 0.0, stream)


def table_from(specs: Sequence[VariateSpec], lower, upper) -> VariateTable:
    return VariateTable(tuple(specs), Box(tuple(map(float, lower)), tuple(map(float, upper))))

