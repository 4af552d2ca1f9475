"""Hyperparameters on an internal (unconstrained) scale, with transforms and priors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

__all__ = [
    "Transform",
    "Prior",
    "HyperParam",
    "HyperVector",
    "TRANSFORMS",
    "log_prior",
]


@dataclass(frozen=True)
class Transform:
    """Smooth bijection between the internal scale and the natural scale."""

    name: str
    param: float = 0.0  # group count for the exchangeable correlation map

    def to_natural(self, t):
        t = np.asarray(t, dtype=float)
        if self.name == "log":
            return np.exp(t)
        if self.name == "fisher":
            return np.tanh(t / 2.0)
        if self.name == "exchangeable":
            # measured from the nearer end of (-1/(g-1), 1) so the inverse does not cancel
            g = self.param
            e = np.exp(-np.abs(t))
            upper = 1.0 - g * e / (1.0 + (g - 1.0) * e)
            lower = (g * e / (e + g - 1.0) - 1.0) / (g - 1.0)
            return np.where(t >= 0, upper, lower)
        if self.name == "identity":
            return t
        raise ValueError(f"unknown transform {self.name!r}")

    def to_internal(self, v):
        v = np.asarray(v, dtype=float)
        if self.name == "log":
            return np.log(v)
        if self.name == "fisher":
            return np.log1p(v) - np.log1p(-v)
        if self.name == "exchangeable":
            g = self.param
            return np.log1p((g - 1.0) * v) - np.log1p(-v)
        if self.name == "identity":
            return v
        raise ValueError(f"unknown transform {self.name!r}")

    def jacobian(self, t):
        """d(natural)/d(internal), always positive."""
        t = np.asarray(t, dtype=float)
        if self.name == "log":
            return np.exp(t)
        if self.name == "fisher":
            v = np.tanh(t / 2.0)
            return 0.5 * (1.0 - v * v)
        if self.name == "exchangeable":
            g = self.param
            e = np.exp(t)
            return g * e / (e + g - 1.0) ** 2
        if self.name == "identity":
            return np.ones_like(t)
        raise ValueError(f"unknown transform {self.name!r}")


TRANSFORMS = {name: Transform(name) for name in ("log", "fisher", "identity")}


@dataclass(frozen=True)
class Prior:
    """Prior on one hyperparameter.

    ``loggamma(a, b)`` is a Gamma(a, rate b) prior on the natural-scale precision,
    expressed on the log scale. ``gaussian(mean, prec)`` acts on the internal scale;
    ``prec == 0`` (or ``flat``) is an improper uniform prior contributing 0.
    """

    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("loggamma", "gaussian", "flat"):
            raise ValueError(f"unknown prior {self.kind!r}")
        if self.kind == "loggamma" and (len(self.params) != 2 or min(self.params) <= 0):
            raise ValueError("loggamma prior needs positive (shape, rate)")
        if self.kind == "gaussian" and (len(self.params) != 2 or self.params[1] < 0):
            raise ValueError("gaussian prior needs (mean, precision >= 0)")

    def logpdf(self, t: float, transform: Transform) -> float:
        if not np.isfinite(t):
            return -math.inf
        if self.kind == "flat":
            return 0.0
        if self.kind == "gaussian":
            mean, prec = self.params
            if prec == 0:
                return 0.0
            return 0.5 * math.log(prec / (2 * math.pi)) - 0.5 * prec * (t - mean) ** 2
        a, b = self.params
        if transform.name != "log":
            raise ValueError("loggamma prior requires a log-transformed precision")
        return a * math.log(b) - float(gammaln(a)) + a * t - b * math.exp(t)

    def to_dict(self):
        return {"prior": self.kind, "param": list(self.params)}


@dataclass(frozen=True)
class HyperParam:
    name: str
    transform: Transform
    prior: Prior
    initial: float = 0.0      # internal scale
    fixed: bool = False

    def natural(self, t):
        return self.transform.to_natural(t)


@dataclass(frozen=True)
class HyperVector:
    """Free hyperparameters (internal values) plus fixed ones kept at their initial value."""

    params: tuple[HyperParam, ...]
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            object.__setattr__(self, "values", np.array([p.initial for p in self.free], dtype=float))
        else:
            object.__setattr__(self, "values", np.asarray(self.values, dtype=float).copy())
        if self.values.shape != (len(self.free),):
            raise ValueError("value vector does not match the free hyperparameters")

    @property
    def free(self) -> tuple[HyperParam, ...]:
        return tuple(p for p in self.params if not p.fixed)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.free]

    @property
    def m(self) -> int:
        return len(self.free)

    def with_values(self, values) -> "HyperVector":
        return replace(self, values=np.asarray(values, dtype=float))

    def internal(self) -> dict[str, float]:
        out = {}
        it = iter(self.values)
        for p in self.params:
            out[p.name] = p.initial if p.fixed else float(next(it))
        return out

    def natural(self) -> dict[str, float]:
        lookup = {p.name: p for p in self.params}
        return {k: float(lookup[k].natural(v)) for k, v in self.internal().items()}


def log_prior(theta: HyperVector) -> float:
    """Sum of log prior densities of the free hyperparameters on the internal scale."""
    total = 0.0
    for p, t in zip(theta.free, theta.values):
        total += p.prior.logpdf(float(t), p.transform)
    return total
