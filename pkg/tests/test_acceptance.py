"""Acceptance criteria, one test (or small group) per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are printed together at the end of the pytest run.
"""

import math
import time

import numpy as np
import pytest

from isqcat import busy, cli, sim, transient
from isqcat.config import RunManifest
from isqcat.model import BatchLaw, CustomerClass, ModelSpec, RateFunction, ServiceDistribution
from isqcat.quadrature import laplace_integral

from oracles import expected_work, poisson_pmf

EXP1 = ServiceDistribution.exponential(1.0)
DET1 = ServiceDistribution.deterministic(1.0)
ERL22 = ServiceDistribution.erlang(2, 2.0)
MD = ModelSpec.single_class(1.0, DET1, 1.0)


def total_variation(analytic, empirical, missing=0.0):
    shape = tuple(max(a, e) for a, e in zip(analytic.shape, empirical.shape))
    a = np.zeros(shape)
    e = np.zeros(shape)
    a[tuple(slice(0, n) for n in analytic.shape)] = analytic
    e[tuple(slice(0, n) for n in empirical.shape)] = empirical
    return 0.5 * (np.abs(a - e).sum() + missing)


def transient_sim(spec, times, reps, seed):
    return sim.simulate_transient(sim.SimConfig(spec, max(times), tuple(times), reps, seed))


def busy_sim(spec, cycles, seed):
    return sim.simulate_busy(sim.SimConfig(spec, 0.0, busy_cycle_target=cycles, seed=seed)).busy_periods


def test_criterion_1_poisson_reduction(criterion):
    start = time.perf_counter()
    worst = 0.0
    n = np.arange(21)
    for name, d in (("exp1", EXP1), ("det1", DET1), ("erlang22", ERL22)):
        for lam in (0.5, 2.0):
            spec = ModelSpec.single_class(lam, d, 0.0)
            for t in (0.25, 1.0, 4.0):
                got = transient.state_prob(spec, n, t)
                ref = poisson_pmf(n, lam * float(expected_work(name, t)))
                worst = max(worst, float(np.max(np.abs(got - ref))))
    elapsed = time.perf_counter() - start
    ok = criterion("1", "Poisson reduction without catastrophes", worst <= 1e-8 and elapsed < 10,
                   f"max |diff| {worst:.2e} <= 1e-8, {elapsed:.1f} s < 10 s")
    assert ok


def test_criterion_2_transient_simulation(criterion):
    start = time.perf_counter()
    spec = ModelSpec.single_class(2.0, EXP1, 0.5)
    times = (0.5, 1.0, 2.0, 5.0)
    summary = transient_sim(spec, times, 100_000, seed=20)
    tvs = []
    for t in times:
        res = transient.state_pmf(spec, t, 30, aggregate=True)
        tvs.append(total_variation(res.probabilities, summary.pmf(t), res.truncation_mass))
    elapsed = time.perf_counter() - start
    worst = max(tvs)
    ok = criterion("2", "in-system pmf vs simulation (M|M, 1e5 reps)", worst <= 0.02 and elapsed < 120,
                   f"max TV {worst:.4f} <= 0.02 over t={times}, {elapsed:.1f} s")
    assert ok


def test_criterion_3_factorization(criterion):
    spec = ModelSpec.single_class(1.0, EXP1, 0.5)
    marks = (0.0, 0.3, 0.7, 1.0)
    worst = max(transient.factorization_check(spec, t, z, y) for t in (0.5, 2.0) for z in marks for y in marks)
    ok = criterion("3", "in-system / served factorization", worst <= 1e-6, f"max residual {worst:.2e} <= 1e-6")
    assert ok


def test_criterion_4_laplace_shift(criterion):
    # left side from the transient idle probability with catastrophes, right side from the
    # catastrophe-free idle transform: two independent routes
    worst = 0.0
    for d in (EXP1, DET1, ERL22):
        spec = ModelSpec.single_class(1.0, d, 0.5)
        for s in (0.25, 0.5, 1.0, 2.0):
            direct = laplace_integral(lambda t: np.asarray(transient.idle_prob(spec, t, tol=1e-12)), s,
                                      tol=1e-11, breakpoints=d.breakpoints)
            free, _ = busy.idle_transform_free(spec, 0.5 + s)
            worst = max(worst, abs(s * direct.value - (0.5 + s) * free[0].real))
    ok = criterion("4", "idle transform shift identity", worst <= 1e-8, f"max residual {worst:.2e} <= 1e-8")
    assert ok


def test_criterion_5_md_closed_forms(criterion):
    derived_gap = max(abs(busy.md_closed_forms(MD, s).idle_derived - busy.lt_idle(MD, s).value)
                      for s in (0.1, 1.0, 5.0))
    f = busy.md_closed_forms(MD, 1.0)
    limit_gap = max(abs(f.limit_derived - f.limit_printed), abs(f.limit_literal - f.limit_printed))
    numeric_limit = 1e-7 * busy.lt_idle(MD, 1e-7).value
    limit_gap = max(limit_gap, abs(numeric_limit - f.limit_printed))
    # the printed transform is exact only when the arrival and catastrophe rates coincide
    other = ModelSpec.single_class(1.0, DET1, 0.5)
    g = busy.md_closed_forms(other, 1.0)
    deviation = g.idle_literal - g.idle_derived
    ok = criterion("5", "deterministic-service closed forms", derived_gap <= 1e-8 and limit_gap <= 1e-6,
                   f"derived vs numeric {derived_gap:.1e}; limits {limit_gap:.1e}; printed transform at "
                   f"lam=1,nu=0.5,s=1: {g.idle_literal:.4f} vs {g.idle_derived:.4f} (dev {deviation:+.4f})")
    assert ok
    assert f.idle_literal == pytest.approx(f.idle_derived, abs=1e-14)
    assert deviation > 0.1


def test_criterion_6_busy_mean(criterion):
    start = time.perf_counter()
    exact = (math.e ** 2 - 1) / (1 + math.e ** 2)
    m = busy.busy_moments(MD)
    x = busy_sim(MD, 100_000, seed=60)
    se = x.std(ddof=1) / math.sqrt(x.size)
    rel = abs(m.mean - exact) / exact
    z = abs(x.mean() - exact) / se
    elapsed = time.perf_counter() - start
    ok = criterion("6", "busy-period mean (deterministic service)",
                   m.closed_mean == pytest.approx(exact, abs=1e-15) and rel <= 1e-4 and z <= 3 and elapsed < 120,
                   f"LST rel err {rel:.1e} <= 1e-4; sim {x.mean():.5f} vs {exact:.5f} is {z:.2f} SE <= 3; "
                   f"{elapsed:.1f} s")
    assert ok


def test_criterion_7_busy_lst_vs_empirical(criterion):
    batch = ModelSpec.single_class(1.0, EXP1, 0.5, BatchLaw.univariate({1: 0.5, 2: 0.5}))
    worst = 0.0
    for seed, spec in ((70, MD), (71, batch)):
        x = busy_sim(spec, 100_000, seed)
        for s in (0.5, 1.0, 2.0):
            emp, se = sim.empirical_lst(x, s)
            worst = max(worst, abs(busy.lst_busy_period(spec, s).value - emp) / se)
    ok = criterion("7", "busy-period LST vs empirical LST", worst <= 3, f"max {worst:.2f} SE <= 3")
    assert ok


def test_criterion_8_multiclass_joint(criterion):
    spec = ModelSpec((CustomerClass(EXP1, 1.0), CustomerClass(DET1, 0.5)), RateFunction.constant(0.3))
    res = transient.state_pmf(spec, 1.5, 15)
    summary = transient_sim(spec, (1.5,), 100_000, seed=80)
    tv = total_variation(res.probabilities, summary.pmf(1.5, aggregate=False), res.truncation_mass)
    both = transient.state_pmf(spec, 1.5, 12, marks_fixed_served=False)
    tv_served = total_variation(both.probabilities, summary.pmf(1.5, "joint"), both.truncation_mass)
    same = ModelSpec((CustomerClass(ERL22, 0.7), CustomerClass(ERL22, 0.4)), RateFunction.constant(0.3))
    one = ModelSpec.single_class(1.1, ERL22, 0.3)
    gap = max(abs(transient.pgf_joint(same, 1.5, ([z, z], [y, y])) - transient.pgf_joint(one, 1.5, ([z], [y])))
              for z in (0.0, 0.4, 0.9) for y in (0.2, 1.0))
    ok = criterion("8", "two-class joint law and class aggregation", tv <= 0.02 and gap <= 1e-8,
                   f"TV in-system {tv:.4f} <= 0.02 (with served counts {tv_served:.4f}); aggregation {gap:.1e}")
    assert ok


def test_criterion_9_served_counts_ignore_catastrophes(criterion):
    gap = 0.0
    for d in (EXP1, DET1, ERL22):
        for t in (0.5, 2.0):
            for y in (0.0, 0.3, 0.7):
                a = transient.served_pgf(ModelSpec.single_class(1.0, d, 0.0), t, [y])
                b = transient.served_pgf(ModelSpec.single_class(1.0, d, 5.0), t, [y])
                gap = max(gap, abs(a - b))
    t = 2.0
    s0 = transient_sim(ModelSpec.single_class(1.0, EXP1, 0.0), (t,), 100_000, seed=90)
    s2 = transient_sim(ModelSpec.single_class(1.0, EXP1, 2.0), (t,), 100_000, seed=91)
    p0, p2 = s0.pmf(t, "served"), s2.pmf(t, "served")
    L = max(len(p0), len(p2))
    p0, p2 = np.pad(p0, (0, L - len(p0))), np.pad(p2, (0, L - len(p2)))
    se = np.sqrt(p0 * (1 - p0) / s0.replications + p2 * (1 - p2) / s2.replications)
    diff = np.abs(p0 - p2)
    z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
    ok = criterion("9", "served counts do not depend on catastrophes", gap <= 1e-10 and z.max() <= 3,
                   f"served PGF gap {gap:.1e} <= 1e-10; simulated cells max {z.max():.2f} SE <= 3 over {L} cells")
    assert ok


MD_SLOW_LOSS = ModelSpec.single_class(1.0, DET1, 0.5)


@pytest.fixture(scope="module")
def simulated():
    s = transient_sim(MD_SLOW_LOSS, (2.0,), 100_000, seed=100)
    return s.mean(2.0)


class TestCriterion10:
    """Mean number in system, deterministic service, lam=1, nu=0.5, b=1, t=2."""

    spec = MD_SLOW_LOSS
    t = 2.0

    def test_implemented_mean_and_printed_zero_branch(self, criterion, simulated):
        mean, se = simulated
        m1 = transient.moment(self.spec, 1, self.t)
        conv = transient.moment_convolution(self.spec, self.t).value
        printed, _ = transient.md_moments_literal(self.spec, self.t)
        ok = criterion("10a", "implemented mean agrees with simulation, printed 0 branch does not",
                       abs(m1 - mean) <= 3 * se and abs(printed - mean) > 3 * se and abs(m1 - conv) <= 1e-9,
                       f"moment {m1:.5f}, sim {mean:.5f} +- {se:.5f} ({abs(m1 - mean) / se:.2f} SE); "
                       f"printed {printed:g} is {abs(printed - mean) / se:.0f} SE away")
        assert ok

    def test_report_shows_both(self, criterion):
        m = RunManifest(times=(self.t,), replications=20_000, seed=101, state_cutoff=10)
        tr = sim.simulate_transient(sim.SimConfig(self.spec, self.t, (self.t,), m.replications, m.seed))
        table = cli._compare_transient(self.spec, m, tr)
        m1_rows = {r[-1]: r for r in table.rows if r[0] == "m1"}
        shown = {"moment ODE", "forward-kernel", cli.LITERAL} <= set(m1_rows)
        ok = criterion("10b", "comparison report lists implemented and printed means",
                       shown and m1_rows["moment ODE"][8] == "pass",
                       "rows: " + ", ".join(f"{k}={float(v[3]):.4f}" for k, v in sorted(m1_rows.items())))
        assert ok

    @pytest.mark.xfail(strict=True, reason="the quoted closed form is the forward-kernel mean, "
                                           "not the mean number in system")
    def test_quoted_expression(self, criterion, simulated):
        mean, se = simulated
        lam, nu, b, t = 1.0, 0.5, 1.0, self.t
        quoted = lam * math.exp(-nu * t) * (math.exp(nu * b) - 1) / nu
        assert quoted == pytest.approx(transient.mean_forward_kernel(self.spec, t).value, abs=1e-10)
        ok = criterion("10c", "quoted expression lam e^{-nu t}(e^{nu b}-1)/nu agrees with simulation",
                       abs(quoted - mean) <= 3 * se,
                       f"quoted {quoted:.5f} vs sim {mean:.5f} +- {se:.5f} "
                       f"({abs(quoted - mean) / se:.0f} SE)")
        assert ok


def test_criterion_11_inversion(criterion):
    df = busy.invert_lst(lambda s: busy._busy_values(MD, s)[0], [0.5, 1.0, 2.0, 4.0], busy.busy_period_atoms(MD))
    x = busy_sim(MD, 100_000, seed=110)
    worst = -math.inf
    parts = []
    for t, v in zip(df.t, df.values):
        emp = float((x <= t).mean())
        tol = max(0.01, 3 * math.sqrt(emp * (1 - emp) / x.size))
        worst = max(worst, abs(v - emp) - tol)
        parts.append(f"t={t:g}: {v:.4f} vs {emp:.4f}")
    ok = criterion("11", "inverted busy-period DF vs empirical DF", worst <= 0 and not df.flagged, "; ".join(parts))
    assert ok
