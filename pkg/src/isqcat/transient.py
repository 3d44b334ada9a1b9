"""Time-domain evaluation: joint PGFs, state probabilities and moments.

All variants go through one renewal argument on the last catastrophe before
the observation time. Between catastrophes the system evolves as the model
without catastrophes started empty, so with V the cumulative catastrophe
rate and Psi_t(x) the marked-customer PGF given that the last catastrophe
happened at x,

    P(y, z, t) = exp(-V(t)) Psi_t(0) + int_0^t nu(x) exp(-(V(t) - V(x))) Psi_t(x) dx.

A customer arriving at u is observed at t with age t - u. It counts as served
(mark y) when its service requirement has elapsed by t, whether or not a
catastrophe came first; otherwise it is in system (mark z) if it arrived
after the last catastrophe and lost (mark 1) if it arrived before. With the
served marks at 1 this is the plain renewal convolution of no-catastrophe
PGFs; with z at 1 it collapses to the catastrophe-free served-count PGF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats
from scipy.integrate import solve_ivp

from .model import MarkVector, ModelSpec
from .quadrature import CumulativeTable, QuadratureError, QuadratureResult, cumulative_table, integrate

DEFAULT_TOL = 1e-10
MAX_MOMENT_ORDER = 8


def _coerce_marks(spec: ModelSpec, marks):
    """Return ``(z, y)`` arrays of shape ``(m, k)`` and whether input was a single mark."""
    k = spec.k
    if marks is None:
        z = y = np.ones((1, k))
        return z, y, True
    if isinstance(marks, MarkVector):
        z, y = np.array(marks.z), np.array(marks.y)
    else:
        z, y = marks
        z, y = np.asarray(z), np.asarray(y)
    single = z.ndim <= 1
    z = np.atleast_2d(z) if z.ndim else np.full((1, k), z)
    y = np.atleast_2d(y) if y.ndim else np.full((1, k), y)
    if z.shape[-1] != k or y.shape[-1] != k:
        raise ValueError(f"marks have dimension {z.shape[-1]}/{y.shape[-1]}, model has {k} classes")
    z, y = np.broadcast_arrays(z, y)
    return z, y, single


def _squeeze(vals, single: bool):
    vals = np.asarray(vals)
    if np.iscomplexobj(vals) and np.all(vals.imag == 0):
        vals = vals.real
    if single:
        return vals[0].item()
    return vals


def _check_time(t):
    if not math.isfinite(t):
        raise ValueError("finite time required: no stationary distribution is computed here")
    if t < 0:
        raise ValueError("time must be nonnegative")


class TransientEvaluator:
    """Evaluates the marked PGF of one model; caches running-integral tables.

    With constant arrival rates the loss integrand depends only on customer
    age, so one age table per mark set serves every observation time.
    """

    def __init__(self, spec: ModelSpec, tol: float = DEFAULT_TOL):
        self.spec = spec
        self.tol = tol
        self._age_tables: dict[bytes, CumulativeTable] = {}

    # -- running integrals of the loss intensity ----------------------------------

    def _age_table(self, z, y, horizon: float) -> CumulativeTable:
        key = z.tobytes() + y.tobytes() + str(z.shape).encode()
        table = self._age_tables.get(key)
        if table is None or table.horizon < horizon:
            grow = horizon if table is None else max(horizon, 2 * table.horizon)
            spec = self.spec
            table = cumulative_table(lambda a: spec.mark_loss(0.0, a, z, y), grow,
                                     tol=0.1 * self.tol, breakpoints=spec.service_breakpoints())
            self._age_tables[key] = table
        return table

    def _time_table(self, t: float, z, y) -> CumulativeTable:
        spec = self.spec
        bps = set(spec.rate_breakpoints()) | {t - b for b in spec.service_breakpoints()}
        return cumulative_table(lambda u: spec.mark_loss(u, t - u, z, y), t,
                                tol=0.1 * self.tol, breakpoints=sorted(bps))

    def _outer_breakpoints(self, t: float):
        spec = self.spec
        bps = set(spec.rate_breakpoints()) | {t - b for b in spec.service_breakpoints()}
        return sorted(p for p in bps if 0 < p < t)

    def _log_psi(self, t: float, z, y):
        """Function x -> log Psi_t(x) (shape ``(n, m)``) and its error bound."""
        spec = self.spec
        ones = np.ones_like(y)
        track_served = not np.all(y == 1)
        if spec.homogeneous_arrivals:
            g = self._age_table(z, y, t)
            gy = self._age_table(ones, y, t) if track_served else None
            gy_t = gy(np.array([t]))[0] if track_served else 0.0
            err = g.error_estimate + (2 * gy.error_estimate if track_served else 0.0)

            def log_psi(x):
                x = np.asarray(x, dtype=float)
                age = np.clip(t - x, 0.0, t)
                out = -g(age)
                if track_served:
                    out = out - gy_t + gy(age)
                return out
            return log_psi, err
        tab = self._time_table(t, z, y)
        tab_t = tab(np.array([t]))[0]
        taby = self._time_table(t, ones, y) if track_served else None
        err = tab.error_estimate * 2 + (taby.error_estimate if track_served else 0.0)

        def log_psi(x):
            x = np.clip(np.asarray(x, dtype=float), 0.0, t)
            out = tab(x) - tab_t
            if track_served:
                out = out - taby(x)
            return out
        return log_psi, err

    # -- joint PGF ----------------------------------------------------------------

    def pgf(self, t: float, z, y) -> tuple[np.ndarray, float]:
        """Joint PGF at time ``t`` for marks ``z``, ``y`` of shape ``(m, k)``."""
        _check_time(t)
        m = z.shape[0]
        if t == 0 or np.all((z == 1) & (y == 1)) or all(r.is_zero for r in self.spec.arrival_rates):
            return np.ones(m), 0.0
        log_psi, err = self._log_psi(t, z, y)
        start = np.exp(log_psi(np.array([0.0]))[0])
        nu = self.spec.catastrophe_rate
        if nu.is_zero:
            return start, err
        v_t = nu.cumulative(t)

        def integrand(x):
            weight = nu(x) * np.exp(-(v_t - nu.cumulative(x)))
            return weight[:, None] * np.exp(log_psi(x))

        res = integrate(integrand, 0.0, t, tol=0.1 * self.tol, breakpoints=self._outer_breakpoints(t))
        return math.exp(-v_t) * start + res.value, err + res.error_estimate

    def pgf_literal(self, t: float, z) -> tuple[np.ndarray, float]:
        """Forward-kernel reading: survival evaluated at elapsed time since 0
        rather than at customer age, inside both exponents. Diagnostic only."""
        spec = self.spec
        m = z.shape[0]
        ones = np.ones_like(z)
        if t == 0 or np.all(z == 1):
            return np.ones(m), 0.0
        forward = self._forward_table(t, z, ones)
        nu = spec.catastrophe_rate
        f_t = forward(np.array([t]))[0]
        v_t = nu.cumulative(t)
        head = np.exp(-f_t - v_t)
        if nu.is_zero:
            return head, forward.error_estimate

        def integrand(u):
            w = nu(u) * np.exp(-(v_t - nu.cumulative(u)))
            return w[:, None] * np.exp(-(f_t - forward(u)))

        res = integrate(integrand, 0.0, t, tol=0.1 * self.tol,
                        breakpoints=sorted(set(spec.rate_breakpoints()) | set(spec.service_breakpoints())))
        return head + res.value, forward.error_estimate * 2 + res.error_estimate

    def _forward_table(self, t, z, y):
        spec = self.spec
        if spec.homogeneous_arrivals:
            return self._age_table(z, y, t)
        bps = sorted(set(spec.rate_breakpoints()) | set(spec.service_breakpoints()))
        return cumulative_table(lambda x: spec.mark_loss(x, x, z, y), t, tol=0.1 * self.tol, breakpoints=bps)

    # -- Poisson mixtures for the single-class model ---------------------------------

    def state_probs(self, t: float, n: np.ndarray, literal: bool = False) -> tuple[np.ndarray, float]:
        """P(N(t) = n) for the single-class unit-batch model."""
        n = np.asarray(n)
        if t == 0:
            return (n == 0).astype(float), 0.0
        spec = self.spec
        zero = np.zeros((1, 1))
        one = np.ones((1, 1))
        nu = spec.catastrophe_rate
        v_t = nu.cumulative(t)
        if literal:
            tab = self._forward_table(t, zero, one)
            f_t = tab(np.array([t]))[0, 0]

            def mean_since(x):
                return f_t - tab(x)[:, 0]
            bps = sorted(set(spec.rate_breakpoints()) | set(spec.service_breakpoints()))
            err = 2 * tab.error_estimate
        else:
            log_psi, err = self._log_psi(t, zero, one)

            def mean_since(x):
                return -log_psi(x)[:, 0]
            bps = self._outer_breakpoints(t)
        head = math.exp(-v_t) * stats.poisson.pmf(n, mean_since(np.array([0.0]))[0])
        if nu.is_zero:
            return head, err

        def integrand(x):
            w = nu(x) * np.exp(-(v_t - nu.cumulative(x)))
            return w[:, None] * stats.poisson.pmf(n[None, :], mean_since(x)[:, None])

        res = integrate(integrand, 0.0, t, tol=0.1 * self.tol, breakpoints=bps)
        return head + res.value, err + res.error_estimate


@lru_cache(maxsize=64)
def evaluator(spec: ModelSpec, tol: float = DEFAULT_TOL) -> TransientEvaluator:
    """Shared evaluator per (spec, tol); specs are immutable, tables read-only."""
    return TransientEvaluator(spec, tol)


# -- public operations -------------------------------------------------------------


def kernel_phi(spec: ModelSpec, start: float, t: float, marks=None, tol: float = DEFAULT_TOL):
    """Marked PGF at ``t`` of the catastrophe-free model started empty at ``start``."""
    if not 0 <= start <= t:
        raise ValueError("need 0 <= start <= t")
    z, y, single = _coerce_marks(spec, marks)
    trivial = np.all((z == 1) & (y == 1)) or all(r.is_zero for r in spec.arrival_rates)
    if start == t or trivial:
        return _squeeze(np.ones(z.shape[0]), single)
    # same running-integral tables as the PGF, so the two agree bit for bit without catastrophes
    log_psi, _ = evaluator(spec, tol)._log_psi(t, z, y)
    return _squeeze(np.exp(log_psi(np.array([float(start)]))[0]), single)


def pgf_joint(spec: ModelSpec, t: float, marks=None, tol: float = DEFAULT_TOL, literal: bool = False):
    """Joint PGF of in-system (z) and served (y) counts at time ``t``.

    ``marks`` is a MarkVector or a ``(z, y)`` pair of arrays of shape ``(k,)``
    or ``(m, k)``; arrays may leave the unit disk (the PGF is entire for finite
    batch supports). ``literal=True`` evaluates the forward-kernel reading
    instead, which only supports in-system marks.
    """
    z, y, single = _coerce_marks(spec, marks)
    ev = evaluator(spec, tol)
    if literal:
        if not np.all(y == 1):
            raise ValueError("literal mode supports in-system marks only")
        vals, _ = ev.pgf_literal(t, z)
    else:
        vals, _ = ev.pgf(t, z, y)
    return _squeeze(vals, single)


def _require_simple(spec: ModelSpec, what: str):
    if not spec.is_simple:
        raise ValueError(f"{what} needs a single-class model with unit batches")


def state_prob(spec: ModelSpec, n, t: float, tol: float = DEFAULT_TOL, literal: bool = False):
    """P(N(t) = n) as a Poisson mixture over the time of the last catastrophe.

    ``n`` may be an integer or an array of integers.
    """
    _require_simple(spec, "state_prob")
    _check_time(t)
    if np.any(np.asarray(n) < 0):
        raise ValueError("need n >= 0")
    arr = np.atleast_1d(np.asarray(n, dtype=int))
    vals, _ = evaluator(spec, tol).state_probs(t, arr, literal=literal)
    vals = np.clip(vals, 0.0, 1.0)
    return vals if np.ndim(n) else float(vals[0])


@dataclass
class PMFResult:
    """Probability table from coefficient extraction.

    ``probabilities`` is indexed by count per tracked coordinate (in-system
    counts per class, then served counts per class unless served marks are
    fixed; a single total-count axis when aggregated).
    """

    probabilities: np.ndarray
    truncation_mass: float
    aliasing_bound: float
    points: tuple[int, ...]
    error_estimate: float
    flagged: bool


def _chernoff_points(pgf_along, minimum: int, target: float, cap: int) -> tuple[int, float]:
    """Smallest number of DFT points L >= minimum with P(count >= L) <= target,
    using the bound P(count >= L) <= G(r) / r^L for r > 1."""
    radii = []
    vals = []
    # stop at the first radius where the PGF overflows (large batches grow like r^size)
    with np.errstate(over="ignore", invalid="ignore"):
        for r in (1.25, 1.5, 2.0, 3.0, 5.0, 8.0):
            try:
                v = float(np.real(pgf_along(np.array([r]))[0]))
            except (ValueError, QuadratureError):
                break
            if not math.isfinite(v):
                break
            radii.append(r)
            vals.append(v)
    if not radii:
        return cap, math.inf
    radii = np.array(radii)
    logs = np.log(np.maximum(np.array(vals), 1e-300))
    for L in range(minimum, cap + 1):
        bound = float(np.exp(np.min(logs - L * np.log(radii))))
        if bound <= target:
            return L, bound
    return cap, bound


def state_pmf(spec: ModelSpec, t: float, cutoff: int, marks_fixed_served: bool = True,
              aggregate: bool = False, tol: float = 1e-9) -> PMFResult:
    """Joint probabilities up to ``cutoff`` per coordinate by DFT of the PGF on
    the unit circle.

    Each coordinate gets at least ``cutoff + 1`` points and more when needed
    to push the aliased tail mass below ``tol / 100``.
    """
    _check_time(t)
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    k = spec.k
    ev = evaluator(spec, min(DEFAULT_TOL, tol * 1e-2))
    if aggregate:
        if not marks_fixed_served:
            raise ValueError("aggregated counts track in-system customers only")
        dims = 1
    else:
        dims = k if marks_fixed_served else 2 * k
    if t == 0:
        probs = np.zeros((cutoff + 1,) * dims)
        probs[(0,) * dims] = 1.0
        return PMFResult(probs, 0.0, 0.0, (cutoff + 1,) * dims, 0.0, False)

    def marks_for(coord_values: np.ndarray):
        # coord_values: (m, dims) -> z, y of shape (m, k)
        m = coord_values.shape[0]
        if aggregate:
            z = np.repeat(coord_values[:, :1], k, axis=1)
            return z, np.ones((m, k))
        z = coord_values[:, :k]
        y = coord_values[:, k:] if not marks_fixed_served else np.ones((m, k))
        return z, y

    target = tol * 1e-2 / dims
    points = []
    alias = 0.0
    for c in range(dims):
        def along(r, c=c):
            cv = np.ones((len(r), dims), dtype=float)
            cv[:, c] = r
            return ev.pgf(t, *marks_for(cv))[0]
        L, bound = _chernoff_points(along, cutoff + 1, target, cutoff + 1 + 512)
        points.append(L)
        alias += bound
    grids = np.meshgrid(*[np.exp(2j * np.pi * np.arange(L) / L) for L in points], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=-1)
    vals, err = ev.pgf(t, *marks_for(coords))
    coef = np.fft.fftn(vals.reshape(points)).real / np.prod(points)
    probs = coef[tuple(slice(0, cutoff + 1) for _ in range(dims))]
    probs = np.where(np.abs(probs) < 1e-15, 0.0, probs)
    trunc = max(0.0, 1.0 - float(probs.sum()))
    return PMFResult(probs, trunc, alias, tuple(points), err + alias, trunc > tol)


def moment(spec: ModelSpec, order: int, t: float, tol: float = 1e-10) -> float:
    """Factorial moment E[N(t)(N(t)-1)...(N(t)-order+1)].

    Integrates the triangular system m_n' = -nu m_n + n lambda Sbar(t - tau) m_{n-1},
    m_0 = 1, over tau in [0, t]; Sbar is taken at the age the customer will
    have at the observation time.
    """
    _require_simple(spec, "moment")
    if order < 1:
        raise ValueError("moment order starts at 1")
    if order > MAX_MOMENT_ORDER:
        raise ValueError(f"moment order above {MAX_MOMENT_ORDER} is not supported")
    _check_time(t)
    if t == 0:
        return 0.0
    cls = spec.classes[0]
    lam, nu, service = cls.arrival_rate, spec.catastrophe_rate, cls.service
    n = np.arange(1, order + 1)

    def rhs(tau, m):
        prev = np.concatenate([[1.0], m[:-1]])
        return -nu(tau) * m + n * lam(tau) * service.survival(t - tau) * prev

    cuts = set(spec.rate_breakpoints()) | {t - b for b in service.breakpoints}
    edges = [0.0] + sorted(p for p in cuts if 0 < p < t) + [t]
    state = np.zeros(order)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sol = solve_ivp(rhs, (lo, hi), state, method="DOP853", rtol=tol, atol=tol * 1e-2)
        if not sol.success:
            raise RuntimeError(f"moment integration failed: {sol.message}")
        state = sol.y[:, -1]
    return float(state[-1])


def moment_convolution(spec: ModelSpec, t: float, tol: float = 1e-11) -> QuadratureResult:
    """Mean number in system, lambda(u) Sbar(t - u) exp(-(V(t) - V(u))) integrated over [0, t]."""
    _require_simple(spec, "moment_convolution")
    cls = spec.classes[0]
    lam, nu = cls.arrival_rate, spec.catastrophe_rate
    v_t = nu.cumulative(t)
    bps = set(spec.rate_breakpoints()) | {t - b for b in cls.service.breakpoints}
    return integrate(lambda u: lam(u) * cls.service.survival(t - u) * np.exp(-(v_t - nu.cumulative(u))),
                     0.0, t, tol=tol, breakpoints=sorted(bps))


def mean_forward_kernel(spec: ModelSpec, t: float, tol: float = 1e-11) -> QuadratureResult:
    """lambda int_0^t Sbar(x) exp(-(V(t) - V(x))) dx: survival at elapsed time x
    paired with the catastrophe weight of an arrival at x. Agrees with the
    mean only without catastrophes; kept as a diagnostic."""
    _require_simple(spec, "mean_forward_kernel")
    cls = spec.classes[0]
    lam, nu = cls.arrival_rate, spec.catastrophe_rate
    v_t = nu.cumulative(t)
    bps = set(spec.rate_breakpoints()) | set(cls.service.breakpoints)
    return integrate(lambda x: lam(x) * cls.service.survival(x) * np.exp(-(v_t - nu.cumulative(x))),
                     0.0, t, tol=tol, breakpoints=sorted(bps))


def md_moments_literal(spec: ModelSpec, t: float) -> tuple[float, float]:
    """Closed-form first two factorial moments for deterministic service as
    printed piecewise in t, including the zero branch for t past the service
    time. Kept for comparison against ``moment``; requires nu > 0."""
    _require_simple(spec, "md_moments_literal")
    cls = spec.classes[0]
    if cls.service.kind != "deterministic" or not spec.is_homogeneous:
        raise ValueError("needs deterministic service and constant rates")
    lam = cls.arrival_rate.value
    nu = spec.catastrophe_rate.value
    b = cls.service.mean
    if t > b:
        return 0.0, 0.0
    m1 = lam / nu * (1 - math.exp(-nu * t))
    m2 = 2 * lam ** 2 * ((1 - math.exp(-nu * t)) / nu ** 2 - t / nu * math.exp(-nu * t))
    return m1, m2


def served_pgf(spec: ModelSpec, t: float, y, tol: float = DEFAULT_TOL):
    """PGF of served counts by ``t``; catastrophes do not enter."""
    k = spec.k
    y = np.asarray(y)
    single = y.ndim <= 1
    y = np.atleast_2d(y) if y.ndim else np.full((1, k), y)
    if y.shape[-1] != k:
        raise ValueError("served marks must have one entry per class")
    if t == 0:
        return _squeeze(np.ones(y.shape[0]), single)
    ones = np.ones_like(y, dtype=float)
    bps = set(spec.rate_breakpoints()) | {t - b for b in spec.service_breakpoints()}
    res = integrate(lambda u: spec.mark_loss(u, t - u, ones, y), 0.0, t, tol=tol, breakpoints=sorted(bps))
    return _squeeze(np.exp(-np.asarray(res.value)), single)


def idle_prob(spec: ModelSpec, t, tol: float = DEFAULT_TOL):
    """P(N(t) = 0); ``t`` may be an array."""
    ev = evaluator(spec, tol)
    z = np.zeros((1, spec.k))
    y = np.ones((1, spec.k))
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.array([ev.pgf(float(tt), z, y)[0][0] for tt in ts]).real
    out = np.clip(out, 0.0, 1.0)
    return out if np.ndim(t) else float(out[0])


def factorization_check(spec: ModelSpec, t: float, z: float, y: float, tol: float = DEFAULT_TOL) -> float:
    """|P(y, z, t) - P(1, z, t) P(y, 1, t)| for the single-class model."""
    _require_simple(spec, "factorization_check")
    joint = pgf_joint(spec, t, ([z], [y]), tol=tol)
    busy = pgf_joint(spec, t, ([z], [1.0]), tol=tol)
    served = pgf_joint(spec, t, ([1.0], [y]), tol=tol)
    return abs(joint - busy * served)


# -- query / result bundle ---------------------------------------------------------


@dataclass(frozen=True)
class TransientQuery:
    spec: ModelSpec
    times: tuple[float, ...]
    marks: MarkVector | None = None
    state_cutoff: int = 20
    tol: float = 1e-9
    max_moment_order: int = 2

    def __post_init__(self):
        times = tuple(float(x) for x in self.times)
        for x in times:
            _check_time(x)
        if list(times) != sorted(times):
            raise ValueError("query times must be ascending")
        if self.state_cutoff < 0 or not self.tol > 0:
            raise ValueError("need state_cutoff >= 0 and tol > 0")
        object.__setattr__(self, "times", times)


@dataclass
class TransientPoint:
    t: float
    pmf: np.ndarray
    truncation_mass: float
    pmf_error: float
    moments: dict[int, float]
    moment_source: str
    pgf: complex | float | None = None
    pgf_error: float = 0.0
    flagged: bool = False


@dataclass
class TransientResult:
    query: TransientQuery
    points: list[TransientPoint] = field(default_factory=list)


def solve(query: TransientQuery) -> TransientResult:
    """Evaluate every requested quantity at every query time.

    The pmf is over the total number in system. Moments come from the moment
    ODE for the single-class unit-batch model and from the extracted pmf
    otherwise.
    """
    spec = query.spec
    out = TransientResult(query)
    ev = evaluator(spec, min(DEFAULT_TOL, query.tol))
    for t in query.times:
        if spec.is_simple:
            n = np.arange(query.state_cutoff + 1)
            pmf, err = ev.state_probs(t, n)
            trunc = max(0.0, 1.0 - float(pmf.sum()))
            flagged = trunc > query.tol
            moments = {r: moment(spec, r, t) for r in range(1, query.max_moment_order + 1)}
            source = "moment ODE"
        else:
            res = state_pmf(spec, t, query.state_cutoff, aggregate=True, tol=query.tol)
            pmf, err, trunc, flagged = res.probabilities, res.error_estimate, res.truncation_mass, res.flagged
            n = np.arange(len(pmf))
            moments = {}
            for r in range(1, query.max_moment_order + 1):
                falling = np.prod([n - j for j in range(r)], axis=0)
                moments[r] = float(falling @ pmf)
            source = "extracted pmf"
        point = TransientPoint(t, pmf, trunc, err, moments, source, flagged=flagged)
        if query.marks is not None:
            z, y, _ = _coerce_marks(spec, query.marks)
            vals, perr = ev.pgf(t, z, y)
            point.pgf = _squeeze(vals, True)
            point.pgf_error = perr
        out.points.append(point)
    return out
