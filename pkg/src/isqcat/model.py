"""Domain types for infinite-server queues with catastrophes.

Everything here is an immutable value object. Numeric parameters are kept as
tuples so that specs hash and compare field by field; numpy views are built
lazily where evaluation needs them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import special

MASS_TOL = 1e-12

_SERVICE_KINDS = ("deterministic", "exponential", "erlang", "hyperexponential", "empirical")


@dataclass(frozen=True)
class ServiceDistribution:
    """A service-time law with evaluable CDF, survival function and mean.

    Build instances through the named constructors (``deterministic``,
    ``exponential``, ``erlang``, ``hyperexponential``, ``empirical``).

    For the empirical variant ``params`` holds the flattened CDF table
    ``(t0, p0, t1, p1, ...)``. The CDF is 0 below ``t0``, equals ``p0`` at
    ``t0``, is linear between table points and jumps to 1 at the last point.
    """

    kind: str
    params: tuple[float, ...]
    mean: float = field(init=False, compare=False)

    def __post_init__(self):
        if self.kind not in _SERVICE_KINDS:
            raise ValueError(f"unknown service kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        getattr(self, f"_check_{self.kind}")()
        object.__setattr__(self, "mean", self._mean())

    # -- constructors -----------------------------------------------------

    @classmethod
    def deterministic(cls, b: float) -> "ServiceDistribution":
        return cls("deterministic", (b,))

    @classmethod
    def exponential(cls, rate: float) -> "ServiceDistribution":
        return cls("exponential", (rate,))

    @classmethod
    def erlang(cls, shape: int, rate: float) -> "ServiceDistribution":
        return cls("erlang", (shape, rate))

    @classmethod
    def hyperexponential(cls, weights: Sequence[float], rates: Sequence[float]) -> "ServiceDistribution":
        if len(weights) != len(rates):
            raise ValueError("hyperexponential weights and rates differ in length")
        return cls("hyperexponential", tuple(weights) + tuple(rates))

    @classmethod
    def empirical(cls, table: Sequence[tuple[float, float]]) -> "ServiceDistribution":
        flat: list[float] = []
        for t, p in table:
            flat += [t, p]
        return cls("empirical", tuple(flat))

    # -- validation -------------------------------------------------------

    def _check_deterministic(self):
        (b,) = self.params
        if not (b > 0 and math.isfinite(b)):
            raise ValueError(f"deterministic service time must be positive and finite, got {b}")

    def _check_exponential(self):
        (rate,) = self.params
        if not (rate > 0 and math.isfinite(rate)):
            raise ValueError(f"exponential rate must be positive, got {rate}")

    def _check_erlang(self):
        shape, rate = self.params
        if shape < 1 or shape != int(shape):
            raise ValueError(f"erlang shape must be a positive integer, got {shape}")
        if not (rate > 0 and math.isfinite(rate)):
            raise ValueError(f"erlang rate must be positive, got {rate}")

    def _check_hyperexponential(self):
        w, r = self._hyper
        if len(w) == 0:
            raise ValueError("hyperexponential needs at least one phase")
        if np.any(w < 0) or abs(w.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"hyperexponential weights sum to {w.sum():.12g}")
        if np.any(r <= 0):
            raise ValueError("hyperexponential rates must be positive")

    def _check_empirical(self):
        t, p = self._table
        if len(t) == 0:
            raise ValueError("empirical table is empty")
        if t[0] < 0 or np.any(np.diff(t) <= 0):
            raise ValueError("empirical table times must be nonnegative and strictly increasing")
        if p[0] < 0 or p[-1] > 1 or np.any(np.diff(p) < 0):
            raise ValueError("empirical table probabilities must be nondecreasing within [0, 1]")
        if t[-1] <= 0:
            raise ValueError("empirical table must put mass at positive times")

    # -- derived data -----------------------------------------------------

    @cached_property
    def _hyper(self):
        n = len(self.params) // 2
        return np.array(self.params[:n]), np.array(self.params[n:])

    @cached_property
    def _table(self):
        arr = np.array(self.params).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def _mean(self) -> float:
        if self.kind == "deterministic":
            return self.params[0]
        if self.kind == "exponential":
            return 1.0 / self.params[0]
        if self.kind == "erlang":
            return self.params[0] / self.params[1]
        if self.kind == "hyperexponential":
            w, r = self._hyper
            return float(np.sum(w / r))
        t, p = self._table
        # survival is 1 on [0, t0), then linear pieces, then 0
        return float(t[0] + np.sum(np.diff(t) * (1.0 - 0.5 * (p[1:] + p[:-1]))))

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Points where the CDF has a jump or a kink."""
        if self.kind == "deterministic":
            return self.params[:1]
        if self.kind == "empirical":
            return tuple(self._table[0])
        return ()

    @property
    def atoms(self) -> tuple[tuple[float, float], ...]:
        """``(location, mass)`` pairs of the discrete part of the law."""
        if self.kind == "deterministic":
            return ((self.params[0], 1.0),)
        if self.kind == "empirical":
            t, p = self._table
            out: dict[float, float] = {}
            if p[0] > 0:
                out[float(t[0])] = float(p[0])
            if p[-1] < 1:
                out[float(t[-1])] = out.get(float(t[-1]), 0.0) + float(1 - p[-1])
            return tuple(out.items())
        return ()

    @property
    def support_end(self) -> float:
        """Smallest x with B(x) = 1 (``inf`` for unbounded laws)."""
        if self.kind == "deterministic":
            return self.params[0]
        if self.kind == "empirical":
            return float(self._table[0][-1])
        return math.inf

    # -- evaluation -------------------------------------------------------

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        xp = np.maximum(x, 0.0)
        if self.kind == "deterministic":
            out = (x >= self.params[0]).astype(float)
        elif self.kind == "exponential":
            out = -np.expm1(-self.params[0] * xp)
        elif self.kind == "erlang":
            shape, rate = self.params
            out = special.gammainc(shape, rate * xp)
        elif self.kind == "hyperexponential":
            w, r = self._hyper
            out = np.tensordot(-np.expm1(-np.multiply.outer(xp, r)), w, axes=1)
        else:
            t, p = self._table
            out = np.interp(x, t, p)
            out = np.where(x < t[0], 0.0, out)
            out = np.where(x >= t[-1], 1.0, out)
        out = np.where(x < 0, 0.0, out)
        return out if out.ndim else float(out)

    def survival(self, x):
        """1 - B(x); equals 1 for negative x."""
        return 1.0 - self.cdf(x)

    def cdf_left(self, x):
        """B(x-), the left limit of the CDF (differs from ``cdf`` at atoms)."""
        c = np.asarray(self.cdf(x), dtype=float)
        for loc, mass in self.atoms:
            c = np.where(np.asarray(x) == loc, c - mass, c)
        return c if c.ndim else float(c)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(size, self.params[0])
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.params[0], size)
        if self.kind == "erlang":
            shape, rate = self.params
            return rng.gamma(shape, 1.0 / rate, size)
        if self.kind == "hyperexponential":
            w, r = self._hyper
            phase = rng.choice(len(w), size=size, p=w)
            return rng.exponential(1.0, size) / r[phase]
        t, p = self._table
        u = rng.random(size)
        out = np.interp(u, p, t)
        out = np.where(u < p[0], t[0], out)
        return np.where(u >= p[-1], t[-1], out)


@dataclass(frozen=True)
class RateFunction:
    """Nonnegative piecewise-constant rate.

    ``starts[j]`` is the time from which ``values[j]`` applies; ``starts[0]``
    is always 0 and the last value holds forever. A constant rate is the
    one-piece case.
    """

    starts: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        starts = tuple(float(s) for s in self.starts)
        values = tuple(float(v) for v in self.values)
        if len(starts) != len(values) or not starts:
            raise ValueError("rate function needs one value per start time")
        if starts[0] != 0.0:
            raise ValueError("first rate piece must start at 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("rate breakpoints must be strictly increasing")
        if any(not (v >= 0 and math.isfinite(v)) for v in values):
            raise ValueError(f"rates must be finite and nonnegative, got {values}")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float) -> "RateFunction":
        return cls((0.0,), (value,))

    @classmethod
    def piecewise(cls, breakpoints: Sequence[float], values: Sequence[float]) -> "RateFunction":
        """``breakpoints`` are the change points after 0; one more value than breakpoints."""
        if len(values) != len(breakpoints) + 1:
            raise ValueError("piecewise rate needs len(values) == len(breakpoints) + 1")
        return cls((0.0, *breakpoints), tuple(values))

    @classmethod
    def coerce(cls, rate) -> "RateFunction":
        return rate if isinstance(rate, RateFunction) else cls.constant(float(rate))

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)

    @property
    def value(self) -> float:
        """The rate of a constant function."""
        if not self.is_constant:
            raise ValueError("rate function is not constant")
        return self.values[0]

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self.starts[1:]

    @cached_property
    def _arrays(self):
        s = np.array(self.starts)
        v = np.array(self.values)
        cum = np.concatenate([[0.0], np.cumsum(np.diff(s) * v[:-1])])
        return s, v, cum

    def __call__(self, t):
        s, v, _ = self._arrays
        idx = np.searchsorted(s, np.asarray(t, dtype=float), side="right") - 1
        out = v[np.clip(idx, 0, None)]
        return out if np.ndim(out) else float(out)

    def cumulative(self, t):
        """Integral of the rate over [0, t]."""
        s, v, cum = self._arrays
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(s, t, side="right") - 1, 0, None)
        out = cum[idx] + v[idx] * (np.maximum(t, 0.0) - s[idx])
        return out if out.ndim else float(out)

    def max_on(self, horizon: float) -> float:
        s, v, _ = self._arrays
        return float(v[s <= horizon].max())


@dataclass(frozen=True)
class BatchLaw:
    """Distribution of the batch composition.

    ``sizes`` lists support points as tuples of per-class counts (length 1
    for single and univariate laws) and ``masses`` their probabilities.
    Supports are finite; a truncated family records the mass it dropped in
    ``truncation_mass``.
    """

    kind: str
    sizes: tuple[tuple[int, ...], ...]
    masses: tuple[float, ...]
    truncation_mass: float = 0.0

    def __post_init__(self):
        if self.kind not in ("single", "univariate", "multivariate"):
            raise ValueError(f"unknown batch kind {self.kind!r}")
        sizes = tuple(tuple(int(n) for n in s) for s in self.sizes)
        masses = tuple(float(q) for q in self.masses)
        if len(sizes) != len(masses) or not sizes:
            raise ValueError("batch law needs one mass per support point")
        if len({len(s) for s in sizes}) != 1:
            raise ValueError("batch support vectors differ in dimension")
        if any(n < 0 for s in sizes for n in s) or any(sum(s) < 1 for s in sizes):
            raise ValueError("every batch must contain at least one customer")
        if len(set(sizes)) != len(sizes):
            raise ValueError("duplicate batch support points")
        if any(q < 0 for q in masses):
            raise ValueError("batch masses must be nonnegative")
        total = math.fsum(masses)
        if not (self.truncation_mass >= 0 and self.truncation_mass <= MASS_TOL):
            raise ValueError(f"truncation mass {self.truncation_mass:g} exceeds {MASS_TOL:g}")
        if abs(total - 1.0) > MASS_TOL + self.truncation_mass:
            raise ValueError(f"masses sum to {total:.12g}")
        if self.kind == "single" and sizes != ((1,),):
            raise ValueError("single batch law is the point mass at 1")
        if self.kind == "univariate" and len(sizes[0]) != 1:
            raise ValueError("univariate batch law has scalar sizes")
        object.__setattr__(self, "sizes", sizes)
        # renormalise only beyond round-off so that normalised laws are fixed points
        if abs(total - 1.0) > (len(masses) + 4) * np.finfo(float).eps:
            masses = tuple(q / total for q in masses)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def single(cls) -> "BatchLaw":
        return cls("single", ((1,),), (1.0,))

    @classmethod
    def univariate(cls, masses: dict[int, float]) -> "BatchLaw":
        items = sorted(masses.items())
        return cls("univariate", tuple((int(r),) for r, _ in items), tuple(q for _, q in items))

    @classmethod
    def multivariate(cls, masses: dict[tuple[int, ...], float]) -> "BatchLaw":
        items = sorted(masses.items())
        return cls("multivariate", tuple(tuple(n) for n, _ in items), tuple(q for _, q in items))

    @classmethod
    def truncated_geometric(cls, p: float, max_size: int) -> "BatchLaw":
        """Geometric law on {1, 2, ...} with success probability ``p``, cut at ``max_size``."""
        r = np.arange(1, max_size + 1)
        q = p * (1 - p) ** (r - 1)
        dropped = (1 - p) ** max_size
        return cls("univariate", tuple((int(n),) for n in r), tuple(q), truncation_mass=float(dropped))

    @property
    def dim(self) -> int:
        return len(self.sizes[0])

    @cached_property
    def _arrays(self):
        return np.array(self.sizes, dtype=float), np.array(self.masses)

    @cached_property
    def mean_sizes(self) -> np.ndarray:
        n, q = self._arrays
        return q @ n

    def pgf(self, arg):
        """sum_n q(n) prod_i arg_i^{n_i}; ``arg`` has trailing dimension ``dim``.

        A scalar argument is accepted for one-dimensional laws.
        """
        a = np.asarray(arg)
        if a.ndim == 0 or a.shape[-1] != self.dim:
            if self.dim == 1 and (a.ndim == 0 or a.shape[-1] != 1):
                a = a[..., None]
            else:
                raise ValueError(f"batch law has dimension {self.dim}, argument has shape {a.shape}")
        n, q = self._arrays
        if self.kind == "single":
            out = a[..., 0]
        else:
            terms = np.prod(a[..., None, :] ** n, axis=-1)
            out = terms @ q
            ones = np.all(a == 1, axis=-1)
            if np.any(ones):
                out = np.where(ones, 1.0, out)
        return out if np.ndim(out) else out.item()

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Batch compositions, shape ``(size, dim)``."""
        n, q = self._arrays
        if len(q) == 1:
            return np.repeat(n.astype(np.int64), size, axis=0)
        idx = rng.choice(len(q), size=size, p=q)
        return n[idx].astype(np.int64)


@dataclass(frozen=True)
class CustomerClass:
    service: ServiceDistribution
    arrival_rate: RateFunction | None = None
    batch: BatchLaw = field(default_factory=BatchLaw.single)

    def __post_init__(self):
        if self.arrival_rate is not None:
            object.__setattr__(self, "arrival_rate", RateFunction.coerce(self.arrival_rate))
        if self.batch.dim != 1:
            raise ValueError("per-class batch laws must be one-dimensional")


@dataclass(frozen=True)
class ModelSpec:
    """One model instance.

    Per-class mode: every class carries its own arrival rate and batch law.
    Shared mode: one multivariate ``shared_batch`` law with batches arriving
    at ``batch_rate``; classes then carry only their service law.
    """

    classes: tuple[CustomerClass, ...]
    catastrophe_rate: RateFunction = field(default_factory=lambda: RateFunction.constant(0.0))
    shared_batch: BatchLaw | None = None
    batch_rate: RateFunction | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "catastrophe_rate", RateFunction.coerce(self.catastrophe_rate))
        if self.batch_rate is not None:
            object.__setattr__(self, "batch_rate", RateFunction.coerce(self.batch_rate))
        if len(self.classes) < 1:
            raise ValueError("a model needs at least one customer class")
        if self.shared_batch is None:
            if self.batch_rate is not None:
                raise ValueError("batch_rate is only meaningful with a shared batch law")
            missing = [i for i, c in enumerate(self.classes) if c.arrival_rate is None]
            if missing:
                raise ValueError(f"classes {missing} have no arrival rate")
        else:
            if self.batch_rate is None:
                raise ValueError("shared batch mode requires one batch arrival rate")
            if self.shared_batch.dim != len(self.classes):
                raise ValueError(
                    f"shared batch law has dimension {self.shared_batch.dim} "
                    f"but the model has {len(self.classes)} classes")
            clash = [i for i, c in enumerate(self.classes)
                     if c.arrival_rate is not None or c.batch.kind != "single"]
            if clash:
                raise ValueError(
                    f"classes {clash} carry their own arrival rate or batch law; "
                    "per-class and shared batch modes are mutually exclusive")

    @classmethod
    def single_class(cls, arrival_rate, service: ServiceDistribution, catastrophe_rate=0.0,
                     batch: BatchLaw | None = None) -> "ModelSpec":
        return cls((CustomerClass(service, RateFunction.coerce(arrival_rate), batch or BatchLaw.single()),),
                   RateFunction.coerce(catastrophe_rate))

    @property
    def k(self) -> int:
        return len(self.classes)

    @property
    def shared(self) -> bool:
        return self.shared_batch is not None

    @property
    def is_simple(self) -> bool:
        """Single class with unit batches: the plain M|G|inf model with catastrophes."""
        return self.k == 1 and not self.shared and self.classes[0].batch.kind == "single"

    @property
    def arrival_rates(self) -> tuple[RateFunction, ...]:
        """Batch arrival streams: one per class, or the single shared stream."""
        if self.shared:
            return (self.batch_rate,)
        return tuple(c.arrival_rate for c in self.classes)

    @property
    def homogeneous_arrivals(self) -> bool:
        return all(r.is_constant for r in self.arrival_rates)

    @property
    def is_homogeneous(self) -> bool:
        return self.homogeneous_arrivals and self.catastrophe_rate.is_constant

    @property
    def total_batch_rate(self) -> float:
        """Rate at which batches (of any class) arrive; requires constant rates."""
        return float(sum(r.value for r in self.arrival_rates))

    def rate_breakpoints(self) -> tuple[float, ...]:
        pts = set(self.catastrophe_rate.breakpoints)
        for r in self.arrival_rates:
            pts.update(r.breakpoints)
        return tuple(sorted(pts))

    def service_breakpoints(self) -> tuple[float, ...]:
        return tuple(sorted({p for c in self.classes for p in c.service.breakpoints}))

    def mark_loss(self, u, age, z, y):
        """Batch arrival intensity at time ``u`` times the probability that a
        batch whose customers have been in service for ``age`` contains an
        unmarked customer.

        An in-system customer of class i carries the mark with probability
        ``z_i``, a served one with probability ``y_i``. ``u`` is a scalar or has
        the shape of ``age`` (``(n,)``); ``z`` and ``y`` have shape ``(m, k)``.
        Returns shape ``(n, m)``.
        """
        age = np.atleast_1d(np.asarray(age, dtype=float))
        u = np.broadcast_to(np.asarray(u, dtype=float), age.shape)
        z = np.asarray(z)
        y = np.asarray(y)
        served = np.stack([c.service.cdf(age) for c in self.classes], axis=-1)   # (n, k)
        w = y[None, :, :] * served[:, None, :] + z[None, :, :] * (1.0 - served[:, None, :])
        if self.shared:
            lam = np.asarray(self.batch_rate(u), dtype=float).reshape(-1, 1)
            return lam * (1.0 - self.shared_batch.pgf(w))
        out = np.zeros(w.shape[:2], dtype=np.result_type(w, float))
        for i, c in enumerate(self.classes):
            lam = np.asarray(c.arrival_rate(u), dtype=float).reshape(-1, 1)
            if np.all(lam == 0):
                continue
            out += lam * (1.0 - c.batch.pgf(w[..., i:i + 1]))
        return out


@dataclass(frozen=True)
class MarkVector:
    """Per-class marks: ``z`` for in-system customers, ``y`` for served ones."""

    z: tuple[complex, ...]
    y: tuple[complex, ...]

    def __post_init__(self):
        z = tuple(complex(v) if isinstance(v, complex) else float(v) for v in np.atleast_1d(self.z))
        y = tuple(complex(v) if isinstance(v, complex) else float(v) for v in np.atleast_1d(self.y))
        if len(z) != len(y):
            raise ValueError("z and y marks differ in dimension")
        if any(abs(v) > 1 for v in z + y):
            raise ValueError("marks must lie in the closed unit disk")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    @classmethod
    def ones(cls, k: int) -> "MarkVector":
        return cls((1.0,) * k, (1.0,) * k)

    @property
    def dim(self) -> int:
        return len(self.z)


def survival(dist: ServiceDistribution, x):
    """1 - B(x) of ``dist``; 1 for x < 0."""
    return dist.survival(x)


def batch_pgf(law: BatchLaw, arg):
    return law.pgf(arg)
