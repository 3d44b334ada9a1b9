"""Busy period and busy cycle in the Laplace domain.

Everything rests on the Laplace transform of the idle probability. With
constant catastrophe rate nu, conditioning on the last catastrophe gives
s P0~(s) = (nu + s) p0~(nu + s), where p0 is the idle probability of the
catastrophe-free model. The regenerative (conservative-system) relation then
yields the busy-period LST

    pi(s) = 1 + s / lam - 1 / (lam P0~(s)),

lam being the rate at which batches leave the empty state, and the busy
cycle adds an independent exponential(lam) idle period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.special import comb

from .model import ModelSpec
from .quadrature import CumulativeTable, cumulative_table, integrate, laplace_cutoff

TRANSFORM_TOL = 1e-13
RICHARDSON_STEPS = (1e-2, 5e-3, 2.5e-3)
MOMENT_FLAG_RTOL = 1e-4


@dataclass(frozen=True)
class LSTValue:
    s: complex | float
    value: complex | float
    error_estimate: float
    flagged: bool = False


def _require_homogeneous(spec: ModelSpec):
    if not spec.is_homogeneous:
        raise ValueError("homogeneity required: busy-period analysis needs constant arrival and catastrophe rates")


def _check_s(s):
    s_arr = np.asarray(s)
    if np.any(np.real(s_arr) <= 0):
        raise ValueError(f"transform argument must have positive real part, got {s}")


# -- idle probability without catastrophes ------------------------------------------


def _tail_horizon(spec: ModelSpec) -> float:
    """Age past which no customer can plausibly still be in service."""
    ends = [c.service.support_end for c in spec.classes]
    if all(math.isfinite(e) for e in ends):
        return max(max(ends), 1e-12)
    h = max(c.service.mean for c in spec.classes)
    while max(float(c.service.survival(h)) for c in spec.classes) > 1e-17:
        h *= 2.0
        if h > 1e7:
            raise ValueError("service law tail too heavy for the idle-probability table")
    return h


@dataclass
class _IdleTable:
    spec: ModelSpec
    horizon: float
    loss: CumulativeTable

    def p0(self, a):
        a = np.minimum(np.asarray(a, dtype=float), self.horizon)
        return np.exp(-self.loss(a)[:, 0])


@lru_cache(maxsize=64)
def _idle_table(spec: ModelSpec) -> _IdleTable:
    h = _tail_horizon(spec)
    z = np.zeros((1, spec.k))
    y = np.ones((1, spec.k))
    loss = cumulative_table(lambda a: spec.mark_loss(0.0, a, z, y), h,
                            tol=1e-14, breakpoints=spec.service_breakpoints())
    return _IdleTable(spec, h, loss)


def idle_transform_free(spec: ModelSpec, sigma) -> tuple[np.ndarray, float]:
    """Laplace transform of the catastrophe-free idle probability at one or
    more complex arguments (positive real part)."""
    _require_homogeneous(spec)
    sig = np.atleast_1d(np.asarray(sigma, dtype=complex))
    _check_s(sig)
    table = _idle_table(spec)
    re_min = float(np.min(sig.real))
    cut = min(table.horizon, laplace_cutoff(re_min, 1e-17, 1.0))
    bps = [p for p in spec.service_breakpoints() if p < cut]
    # split long ranges so the exponential damping is resolved from the start
    pieces = int(min(256, max(1, re_min * cut / 2)))
    bps = sorted(set(bps) | set(np.linspace(0.0, cut, pieces + 1)[1:-1]))

    def f(a):
        return np.exp(-np.multiply.outer(a, sig)) * table.p0(a)[:, None]

    res = integrate(f, 0.0, cut, tol=TRANSFORM_TOL, breakpoints=bps, rtol=TRANSFORM_TOL)
    p_end = table.p0(np.array([cut]))[0]
    tail = p_end * np.exp(-sig * cut) / sig
    vals = np.asarray(res.value) + tail
    # beyond the table horizon p0 is constant to working precision; beyond the
    # Laplace cutoff the damped remainder is below 1e-17
    err = res.error_estimate + table.loss.error_estimate * float(np.max(np.abs(vals))) + 1e-16
    return vals, err


def _idle_values(spec: ModelSpec, s) -> tuple[np.ndarray, float]:
    s = np.atleast_1d(np.asarray(s, dtype=complex))
    _check_s(s)
    nu = spec.catastrophe_rate.value
    p, err = idle_transform_free(spec, nu + s)
    factor = 1.0 + nu / s
    return factor * p, err * float(np.max(np.abs(factor)))


def _real_if(v):
    v = complex(v)
    return v.real if v.imag == 0 else v


def lt_idle(spec: ModelSpec, s) -> LSTValue:
    """Laplace transform of P(N(t) = 0) with catastrophes."""
    _require_homogeneous(spec)
    vals, err = _idle_values(spec, s)
    return LSTValue(_real_if(s), _real_if(vals[0]), err)


def _batch_rate(spec: ModelSpec) -> float:
    lam = spec.total_batch_rate
    if lam <= 0:
        raise ValueError("busy periods need a positive arrival rate")
    return lam


def _busy_values(spec: ModelSpec, s):
    lam = _batch_rate(spec)
    s = np.atleast_1d(np.asarray(s, dtype=complex))
    idle, err = _idle_values(spec, s)
    vals = 1.0 + s / lam - 1.0 / (lam * idle)
    errs = err / (lam * np.abs(idle) ** 2)
    return vals, errs


def _as_lst(s, value, err) -> LSTValue:
    value = _real_if(value)
    flagged = False
    if isinstance(value, float):
        excess = max(value - 1.0, -value, 0.0)
        if excess > 0:
            flagged = excess > err
            value = min(max(value, 0.0), 1.0)
    return LSTValue(_real_if(s), value, float(err), flagged)


def lst_busy_period(spec: ModelSpec, s) -> LSTValue:
    """E[exp(-s pi)] for any constant-rate model variant.

    Values outside [0, 1] are clamped; the result is flagged when the excess
    is larger than the error estimate.
    """
    _require_homogeneous(spec)
    vals, errs = _busy_values(spec, s)
    return _as_lst(s, vals[0], errs[0])


def lst_busy_cycle(spec: ModelSpec, s) -> LSTValue:
    """E[exp(-s omega)]: busy period followed by an exponential idle period."""
    _require_homogeneous(spec)
    lam = _batch_rate(spec)
    vals, errs = _busy_values(spec, s)
    factor = lam / (lam + complex(s))
    return _as_lst(s, factor * vals[0], abs(factor) * errs[0])


def lst_busy_batch(spec: ModelSpec, s) -> LSTValue:
    """Busy-period LST for a single-class model with batch arrivals; the
    prefactor rate is the batch arrival rate."""
    if spec.k != 1 or spec.shared:
        raise ValueError("lst_busy_batch needs a single-class per-class-batch model")
    return lst_busy_period(spec, s)


def lst_busy_multiclass(spec: ModelSpec, s) -> LSTValue:
    """Busy-period LST for several classes; the prefactor rate is the summed
    class arrival rate."""
    if spec.shared:
        raise ValueError("lst_busy_multiclass needs per-class arrival streams")
    return lst_busy_period(spec, s)


# -- deterministic service in closed form ---------------------------------------


@dataclass(frozen=True)
class MDClosedForms:
    s: float
    idle_derived: float
    idle_literal: float
    busy: float
    busy_closed: float
    busy_from_literal: float
    cycle: float
    cycle_literal: float
    limit_derived: float
    limit_literal: float
    limit_printed: float


def _md_params(spec: ModelSpec):
    _require_homogeneous(spec)
    if not spec.is_simple or spec.classes[0].service.kind != "deterministic":
        raise ValueError("closed forms need a single class with deterministic service and unit batches")
    return spec.classes[0].arrival_rate.value, spec.catastrophe_rate.value, spec.classes[0].service.mean


def md_closed_forms(spec: ModelSpec, s: float) -> MDClosedForms:
    """Closed-form transforms for deterministic service time b.

    ``idle_derived`` integrates p0(t) = exp(-lam min(t, b)) exactly;
    ``idle_literal`` is the alternative printed expression
    [nu + (lam+s) e^{Wb}] / [s W e^{Wb}], W = lam + s + nu, kept for comparison.
    The limits are of s P0~(s) as s -> 0.
    """
    lam, nu, b = _md_params(spec)
    if not s > 0:
        raise ValueError("s must be positive")
    w = lam + s + nu
    e = math.exp(w * b)
    idle_derived = (s + nu + lam / e) / (s * w)
    idle_literal = (nu + (lam + s) * e) / (s * w * e)
    busy = 1.0 + s / lam - 1.0 / (lam * idle_derived)
    busy_closed = (lam + s + nu * e) / (lam + (s + nu) * e)
    busy_literal = 1.0 + s / lam - 1.0 / (lam * idle_literal)
    cycle_literal = 1.0 - s * (lam + s) * w * e / (lam + (nu + s) * e)
    w0 = lam + nu
    return MDClosedForms(
        s=s,
        idle_derived=idle_derived,
        idle_literal=idle_literal,
        busy=busy,
        busy_closed=busy_closed,
        busy_from_literal=busy_literal,
        cycle=lam / (lam + s) * busy,
        cycle_literal=cycle_literal,
        limit_derived=(nu + lam * math.exp(-w0 * b)) / w0,
        limit_literal=(nu * math.exp(-w0 * b) + lam) / w0,
        limit_printed=(nu + lam * math.exp(-w0 * b)) / w0,
    )


def md_busy_mean(spec: ModelSpec) -> float:
    """Mean busy period for deterministic service, (E - 1)/(lam + nu E), E = e^{(lam+nu)b}."""
    lam, nu, b = _md_params(spec)
    e = math.exp((lam + nu) * b)
    return (e - 1.0) / (lam + nu * e)


def md_busy_second_moment_printed(spec: ModelSpec) -> float:
    """Printed closed form for the second moment; negative for every positive
    parameter set, so it is reported for comparison only."""
    lam, nu, b = _md_params(spec)
    e = math.exp((lam + nu) * b)
    return 2.0 * (1.0 - (1.0 + b * (lam + nu) * e)) / (nu + lam * e) ** 2


# -- moments by differentiation at zero ---------------------------------------------


@dataclass(frozen=True)
class BusyMoments:
    mean: float
    second_moment: float
    mean_error: float
    second_error: float
    flagged: bool
    closed_mean: float | None = None
    printed_second_moment: float | None = None


def _richardson(values: Sequence[float]) -> tuple[float, float]:
    """Two-level Richardson for a first-order-biased sequence at h, h/2, h/4.

    Returns the extrapolated value and its disagreement with the best
    single-level estimate.
    """
    x0, x1, x2 = values
    r1a = 2 * x1 - x0
    r1b = 2 * x2 - x1
    r2 = (4 * r1b - r1a) / 3
    return r2, abs(r2 - r1b)


def busy_moments(spec: ModelSpec) -> BusyMoments:
    """First two moments of the busy period from the LST near zero."""
    _require_homogeneous(spec)
    steps = np.array(RICHARDSON_STEPS)
    pts = np.unique(np.concatenate([steps, 2 * steps]))
    vals, errs = _busy_values(spec, pts)
    by_s = {float(p): float(v.real) for p, v in zip(pts, vals)}
    d = [(1.0 - by_s[h]) / h for h in steps]
    sec = [(by_s[2 * h] - 2 * by_s[h] + 1.0) / h ** 2 for h in steps]
    mean, dm = _richardson(d)
    second, ds = _richardson(sec)
    noise = float(np.max(errs))
    mean_err = dm + 4 * noise / steps[-1]
    sec_err = ds + 8 * noise / steps[-1] ** 2
    flagged = dm > MOMENT_FLAG_RTOL * abs(mean) or ds > MOMENT_FLAG_RTOL * abs(second)
    closed = printed = None
    if spec.is_simple and spec.classes[0].service.kind == "deterministic":
        closed = md_busy_mean(spec)
        printed = md_busy_second_moment_printed(spec)
    return BusyMoments(mean, second, mean_err, sec_err, flagged, closed, printed)


# -- inversion to distribution functions ---------------------------------------------


def busy_period_atoms(spec: ModelSpec) -> tuple[tuple[float, float], ...]:
    """Point masses of the busy-period law.

    A busy period ends exactly at a when the opening batch has its last
    departure at a (an atom of the service law), no catastrophe occurs before
    a and every later arrival has left by a.
    """
    _require_homogeneous(spec)
    lam = _batch_rate(spec)
    nu = spec.catastrophe_rate.value
    points = sorted({loc for c in spec.classes for loc, _ in c.service.atoms})
    if not points:
        return ()
    table = _idle_table(spec)
    out = []
    for a in points:
        if spec.shared:
            at = np.array([c.service.cdf(a) for c in spec.classes])
            before = np.array([c.service.cdf_left(a) for c in spec.classes])
            jump = spec.shared_batch.pgf(at) - spec.shared_batch.pgf(before)
        else:
            jump = 0.0
            for c in spec.classes:
                r = c.arrival_rate.value / lam
                jump += r * (c.batch.pgf(c.service.cdf(a)) - c.batch.pgf(c.service.cdf_left(a)))
        mass = math.exp(-nu * a) * float(table.p0(np.array([a]))[0]) * float(jump)
        if mass > 0:
            out.append((a, mass))
    return tuple(out)


@dataclass(frozen=True)
class DFTable:
    t: np.ndarray
    values: np.ndarray
    error_estimate: np.ndarray
    flagged: bool
    projected: bool


def euler_weights(n: int, m: int) -> np.ndarray:
    """Binomial averaging weights applied to partial sums n..n+m."""
    return comb(m, np.arange(m + 1)) / 2.0 ** m


def invert_lst(transform: Callable, t_grid, atoms: Sequence[tuple[float, float]] = (),
               damping: float = 8 * math.log(10), n: int = 15, m: int = 11) -> DFTable:
    """P(X <= t) from the LST ``transform`` (vectorised over complex s).

    Known atoms are removed before inversion and added back as steps. The
    remaining DF transform (value / s) is inverted with the Fourier-series
    method on the contour Re s = damping / (2t), summed by Euler averaging.
    The error estimate combines the discretisation bound exp(-damping), the
    change between consecutive Euler averages and round-off amplification.
    """
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be nonnegative and strictly ascending")
    atoms = tuple((float(a), float(w)) for a, w in atoms)
    out = np.zeros(len(t))
    err = np.zeros(len(t))
    k = np.arange(n + m + 2)
    weights = euler_weights(n, m)
    eps = np.finfo(float).eps
    for i, ti in enumerate(t):
        if ti == 0:
            out[i] = sum(w for a, w in atoms if a <= 0)
            continue
        s = (damping + 2j * np.pi * k) / (2 * ti)
        vals = np.asarray(transform(s), dtype=complex)
        for a, w in atoms:
            vals = vals - w * np.exp(-s * a)
        g = vals / s
        terms = (-1.0) ** k * g.real
        terms[0] *= 0.5
        scale = math.exp(damping / 2) / ti
        partial = scale * np.cumsum(terms)
        e0 = weights @ partial[n:n + m + 1]
        e1 = weights @ partial[n + 1:n + m + 2]
        steps = sum(w for a, w in atoms if a <= ti)
        out[i] = e0 + steps
        err[i] = abs(e1 - e0) + math.exp(-damping) + scale * eps * 1e3 * float(np.sum(np.abs(terms)))
    lo_viol = np.maximum(-out, 0) > err
    hi_viol = np.maximum(out - 1, 0) > err
    dec = np.diff(out)
    allowed = err[1:] + err[:-1]
    mono_bad = np.any(-dec > allowed)
    flagged = bool(lo_viol.any() or hi_viol.any() or mono_bad)
    projected = False
    if not mono_bad and np.any(dec < 0):
        out = isotonic_regression(out).x
        projected = True
    out = np.clip(out, 0.0, 1.0)
    return DFTable(t, out, err, flagged, projected)


# -- report ----------------------------------------------------------------------------


@dataclass
class BusyPeriodReport:
    lst_period: dict[float, LSTValue] = field(default_factory=dict)
    lst_cycle: dict[float, LSTValue] = field(default_factory=dict)
    moments: BusyMoments | None = None
    cycle_mean: float = float("nan")
    cycle_second_moment: float = float("nan")
    df_period: DFTable | None = None
    df_cycle: DFTable | None = None
    atoms: tuple[tuple[float, float], ...] = ()


def busy_report(spec: ModelSpec, s_grid: Sequence[float], t_grid: Sequence[float]) -> BusyPeriodReport:
    """Transforms, moments and inverted DFs of busy period and busy cycle."""
    _require_homogeneous(spec)
    lam = _batch_rate(spec)
    rep = BusyPeriodReport()
    for s in s_grid:
        rep.lst_period[float(s)] = lst_busy_period(spec, s)
        rep.lst_cycle[float(s)] = lst_busy_cycle(spec, s)
    rep.moments = busy_moments(spec)
    # idle period is exponential(lam) and independent of the busy period
    rep.cycle_mean = rep.moments.mean + 1.0 / lam
    rep.cycle_second_moment = rep.moments.second_moment + 2 * rep.moments.mean / lam + 2.0 / lam ** 2
    rep.atoms = busy_period_atoms(spec)
    rep.df_period = invert_lst(lambda s: _busy_values(spec, s)[0], t_grid, rep.atoms)
    rep.df_cycle = invert_lst(lambda s: lam / (lam + s) * _busy_values(spec, s)[0], t_grid)
    return rep
