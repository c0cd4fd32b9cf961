"""Popularity laws and per-object request processes.

Every object ``m`` of a catalog is requested according to an independent
renewal process of mean rate ``lambda_m = Lambda * p_m``.  Two inter-request
laws are supported: exponential (IRM / Poisson) and a two-branch
hyperexponential whose branches have rates ``z * lambda_m`` and
``lambda_m / z`` ("hyper-z").  The fast branch is taken with probability
``z / (1 + z)`` so that the mean inter-request time stays ``1 / lambda_m``
for every ``z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PopularityModel",
    "RequestProcess",
    "Traffic",
    "zipf_popularity",
    "explicit_popularity",
    "poisson_process",
    "hyperexp2_process",
    "process_cdf",
    "process_age_cdf",
    "process_mgf",
    "sample_interarrival",
]


@dataclass(frozen=True, eq=False)
class PopularityModel:
    """Per-object request probabilities, sorted by decreasing popularity.

    Object ``m`` (0-based) is the ``m+1``-th most popular object.
    """

    probabilities: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("popularity must be a non-empty 1-d vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {math.fsum(p)!r}, not 1")
        if np.any(np.diff(p) > 0):
            raise ValueError("probabilities must be sorted non-increasing")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @property
    def M(self) -> int:
        return self.probabilities.size

    def __len__(self):
        return self.M

    def top(self, C: int) -> float:
        """Probability mass of the ``C`` most popular objects."""
        return math.fsum(self.probabilities[:C])


def zipf_popularity(alpha: float, M: int) -> PopularityModel:
    """Zipf law ``p_i ∝ i**-alpha`` over a catalog of ``M`` objects."""
    if not math.isfinite(alpha) or alpha < 0:
        raise ValueError(f"alpha must be finite and >= 0, got {alpha!r}")
    if int(M) != M or M < 1:
        raise ValueError(f"catalog size must be a positive integer, got {M!r}")
    w = np.arange(1, int(M) + 1, dtype=float) ** -float(alpha)
    # sum smallest terms first, then renormalise once more for the 1e-12 check
    w /= math.fsum(w[::-1])
    w /= math.fsum(w)
    return PopularityModel(w, alpha=float(alpha))


def explicit_popularity(weights) -> PopularityModel:
    """Normalise arbitrary non-negative weights and sort them by popularity."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a non-empty vector of finite non-negative numbers")
    total = math.fsum(w)
    if total <= 0:
        raise ValueError("weights must not all be zero")
    w = np.sort(w)[::-1] / total
    w /= math.fsum(w)
    return PopularityModel(w)


@dataclass(frozen=True, eq=False)
class RequestProcess:
    """Inter-request law of one object, or of many objects at once.

    ``rate`` may be a scalar or an array of per-object mean rates; all
    methods broadcast over it.
    """

    rate: float | np.ndarray
    z: float = 1.0
    kind: str = "poisson"
    branch_prob: float = field(init=False)

    def __post_init__(self):
        rate = np.asarray(self.rate, dtype=float)
        if np.any(~np.isfinite(rate)) or np.any(rate <= 0):
            raise ValueError("request rates must be finite and > 0")
        if self.kind not in ("poisson", "hyperexp2"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if not math.isfinite(self.z) or self.z < 1:
            raise ValueError(f"locality z must be >= 1, got {self.z!r}")
        if self.kind == "poisson" and self.z != 1:
            raise ValueError("a Poisson process has z = 1")
        object.__setattr__(self, "rate", rate if rate.ndim else float(rate))
        object.__setattr__(self, "branch_prob", self.z / (1.0 + self.z))

    @property
    def is_poisson(self) -> bool:
        return self.z == 1.0

    @property
    def fast_rate(self):
        return self.rate * self.z

    @property
    def slow_rate(self):
        return self.rate / self.z

    @property
    def mean(self):
        return 1.0 / np.asarray(self.rate)

    def survival(self, t):
        """``1 - F_R(t)``, computed without cancellation."""
        t = np.asarray(t, dtype=float)
        if self.is_poisson:
            return np.exp(-self.rate * t)
        p = self.branch_prob
        return p * np.exp(-self.fast_rate * t) + (1 - p) * np.exp(-self.slow_rate * t)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        if self.is_poisson:
            return -np.expm1(-self.rate * t)
        p = self.branch_prob
        return p * -np.expm1(-self.fast_rate * t) + (1 - p) * -np.expm1(-self.slow_rate * t)

    def age_cdf(self, t):
        """``lambda * int_0^t (1 - F_R(u)) du``; equals the cdf for Poisson."""
        t = np.asarray(t, dtype=float)
        if self.is_poisson:
            return -np.expm1(-self.rate * t)
        z = self.z
        return (-np.expm1(-self.fast_rate * t) + z * -np.expm1(-self.slow_rate * t)) / (1 + z)

    def mgf(self, s):
        """``E[exp(s R)]``; ``s`` must lie strictly below every branch rate."""
        s = np.asarray(s, dtype=float)
        if np.any(s >= self.slow_rate):
            raise ValueError("MGF argument at or beyond the pole of the inter-request law")
        if self.is_poisson:
            return self.rate / (self.rate - s)
        p = self.branch_prob
        a, b = self.fast_rate, self.slow_rate
        return p * a / (a - s) + (1 - p) * b / (b - s)

    def sample(self, rng: np.random.Generator, size=None):
        """Draw inter-request times (scalar rate only)."""
        if np.ndim(self.rate):
            raise ValueError("sampling needs a single-object process")
        e = rng.standard_exponential(size)
        if self.is_poisson:
            return e / self.rate
        fast = rng.random(size) < self.branch_prob
        return e / np.where(fast, self.fast_rate, self.slow_rate)

    def sample_residual(self, rng: np.random.Generator, size=None):
        """Draw from the stationary residual-life law (density ``lambda (1 - F_R)``)."""
        if np.ndim(self.rate):
            raise ValueError("sampling needs a single-object process")
        e = rng.standard_exponential(size)
        if self.is_poisson:
            return e / self.rate
        fast = rng.random(size) < 1.0 / (1.0 + self.z)
        return e / np.where(fast, self.fast_rate, self.slow_rate)


def poisson_process(rate) -> RequestProcess:
    return RequestProcess(rate, 1.0, "poisson")


def hyperexp2_process(rate, z: float) -> RequestProcess:
    """Hyper-z law: branches ``z*rate`` (prob ``z/(1+z)``) and ``rate/z``."""
    return RequestProcess(rate, float(z), "hyperexp2")


def process_cdf(proc: RequestProcess, t):
    return proc.cdf(t)


def process_age_cdf(proc: RequestProcess, t):
    return proc.age_cdf(t)


def process_mgf(proc: RequestProcess, s):
    return proc.mgf(s)


def sample_interarrival(proc: RequestProcess, rng: np.random.Generator, size=None):
    return proc.sample(rng, size)


@dataclass(frozen=True)
class Traffic:
    """A traffic scenario: inter-request law shared by every object.

    ``kind`` is ``"irm"`` (Poisson) or ``"hyperexp"`` with locality ``z``.
    Per-object rates are ``total_rate * p_m``.
    """

    kind: str = "irm"
    z: float = 1.0
    total_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("irm", "hyperexp"):
            raise ValueError(f"unknown traffic kind {self.kind!r}")
        if self.kind == "irm" and self.z != 1.0:
            raise ValueError("IRM traffic has no locality parameter")
        if not math.isfinite(self.z) or self.z < 1:
            raise ValueError(f"locality z must be >= 1, got {self.z!r}")
        if not self.total_rate > 0:
            raise ValueError("total rate must be > 0")

    @classmethod
    def irm(cls, total_rate: float = 1.0) -> "Traffic":
        return cls("irm", 1.0, total_rate)

    @classmethod
    def hyperexp(cls, z: float, total_rate: float = 1.0) -> "Traffic":
        return cls("hyperexp", float(z), total_rate)

    @property
    def is_poisson(self) -> bool:
        return self.z == 1.0

    def rates(self, popularity: PopularityModel) -> np.ndarray:
        return self.total_rate * popularity.probabilities

    def process(self, rate) -> RequestProcess:
        if self.kind == "irm":
            return poisson_process(rate)
        return hyperexp2_process(rate, self.z)

    def label(self) -> str:
        return "irm" if self.kind == "irm" else f"hyperexp({self.z:g})"
