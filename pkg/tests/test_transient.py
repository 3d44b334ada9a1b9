import math

import numpy as np
import pytest

from isqcat import transient as tr
from isqcat.busy import idle_transform_free
from isqcat.model import BatchLaw, CustomerClass, MarkVector, ModelSpec, RateFunction, ServiceDistribution
from isqcat.quadrature import laplace_integral

from oracles import expected_work, md_mean_in_system, poisson_pmf

EXP1 = ServiceDistribution.exponential(1.0)
DET1 = ServiceDistribution.deterministic(1.0)


def simple(lam, service=EXP1, nu=0.0):
    return ModelSpec.single_class(lam, service, nu)


class TestKernel:
    def test_all_ones(self):
        assert tr.kernel_phi(simple(1.0, nu=0.5), 0.3, 2.0, MarkVector.ones(1)) == 1.0

    def test_mm_inf_idle_at_one(self):
        got = tr.kernel_phi(simple(1.0), 0.0, 1.0, ([0.0], [1.0]))
        assert got == pytest.approx(math.exp(-(1 - math.exp(-1))), abs=1e-13)

    def test_classical_pgf(self):
        z = 0.4
        got = tr.kernel_phi(simple(2.0, ServiceDistribution.erlang(2, 2.0)), 0.0, 1.5, ([z], [1.0]))
        assert got == pytest.approx(math.exp(-2.0 * expected_work("erlang22", 1.5) * (1 - z)), abs=1e-13)

    def test_restart_shortens_window(self):
        # started empty at 1 and observed at 3 with exponential service: window of length 2
        got = tr.kernel_phi(simple(1.0), 1.0, 3.0, ([0.0], [1.0]))
        assert got == pytest.approx(math.exp(-(1 - math.exp(-2))), abs=1e-13)

    def test_mark_dimension_checked(self):
        with pytest.raises(ValueError):
            tr.kernel_phi(simple(1.0), 0.0, 1.0, ([0.0, 0.0], [1.0, 1.0]))
        with pytest.raises(ValueError):
            tr.kernel_phi(simple(1.0), 2.0, 1.0)


class TestPGF:
    def test_all_ones_and_time_zero(self):
        spec = simple(2.0, nu=0.5)
        assert tr.pgf_joint(spec, 3.0) == 1.0
        assert tr.pgf_joint(spec, 0.0, ([0.0], [0.0])) == 1.0

    def test_no_catastrophes_equals_kernel(self):
        spec = simple(1.3, DET1)
        marks = ([0.2], [0.6])
        assert tr.pgf_joint(spec, 2.5, marks) == pytest.approx(tr.kernel_phi(spec, 0.0, 2.5, marks), abs=1e-13)

    def test_joint_value_frozen(self):
        # 30-digit quadrature of the last-catastrophe decomposition, lam=1, exp(1), nu=0.5, t=2
        got = tr.pgf_joint(simple(1.0, nu=0.5), 2.0, ([0.3], [0.7]))
        assert got == pytest.approx(0.46499179871934656, abs=1e-12)

    def test_zero_arrivals(self):
        assert tr.pgf_joint(simple(0.0, nu=1.0), 2.0, ([0.0], [0.0])) == 1.0

    def test_vectorised_marks(self):
        spec = simple(1.0, nu=0.5)
        z = np.array([[0.0], [0.5], [1.0]])
        vals = tr.pgf_joint(spec, 1.0, (z, np.ones_like(z)))
        assert vals.shape == (3,)
        assert vals[0] < vals[1] < vals[2] == 1.0

    def test_literal_mode_differs_but_agrees_without_catastrophes(self):
        spec = simple(1.0, DET1, 0.0)
        assert tr.pgf_joint(spec, 2.0, ([0.0], [1.0]), literal=True) == pytest.approx(math.exp(-1), abs=1e-12)
        cat = simple(1.0, DET1, 1.0)
        assert abs(tr.pgf_joint(cat, 2.0, ([0.0], [1.0]), literal=True)
                   - tr.pgf_joint(cat, 2.0, ([0.0], [1.0]))) > 1e-3
        with pytest.raises(ValueError):
            tr.pgf_joint(cat, 2.0, ([0.0], [0.5]), literal=True)

    def test_non_homogeneous_catastrophes(self):
        # nu = 0 on [0, 1) then 2: only the last segment carries catastrophes
        nu = RateFunction.piecewise([1.0], [0.0, 2.0])
        spec = ModelSpec.single_class(1.0, EXP1, nu)
        t = 2.0
        idle = tr.idle_prob(spec, t)
        from scipy.integrate import quad
        p0 = lambda x: math.exp(-(1 - math.exp(-(t - x))))      # started empty at x
        ref = math.exp(-2.0) * p0(0.0) + quad(lambda x: 2.0 * math.exp(-2.0 * (t - x)) * p0(x), 1.0, t,
                                               epsabs=1e-14)[0]
        assert idle == pytest.approx(ref, abs=1e-11)

    def test_non_homogeneous_arrivals_match_closed_form(self):
        lam = RateFunction.piecewise([0.5], [2.0, 0.5])
        spec = ModelSpec.single_class(lam, EXP1, 0.0)
        t = 1.5
        # mean number present: int lam(u) exp(-(t-u)) du
        mean = 2.0 * (math.exp(-1.0) - math.exp(-1.5)) + 0.5 * (1 - math.exp(-1.0))
        assert tr.idle_prob(spec, t) == pytest.approx(math.exp(-mean), abs=1e-12)


class TestStateProbabilities:
    def test_initial_condition(self):
        spec = simple(1.0, nu=1.0)
        assert tr.state_prob(spec, 0, 0.0) == 1.0
        assert tr.state_prob(spec, 3, 0.0) == 0.0

    def test_frozen_values_with_catastrophes(self):
        # lam=1, exp(1), nu=2, t=1; 30-digit quadrature of the Poisson mixture
        ref = [0.7438239200330041, 0.20501174524259741, 0.042978578208075755,
               0.0071068888078232895, 0.0009588182365994496]
        got = tr.state_prob(simple(1.0, nu=2.0), np.arange(5), 1.0)
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_md_inf_idle_without_catastrophes(self):
        assert tr.idle_prob(simple(1.0, DET1), 2.0) == pytest.approx(math.exp(-1), abs=1e-14)

    def test_stationary_idle_limit(self):
        spec = simple(1.0, nu=0.5)
        limit = 0.5 * idle_transform_free(spec, 0.5)[0][0].real
        assert limit == pytest.approx(0.53807950691276842, abs=1e-12)
        assert tr.idle_prob(spec, 40.0) == pytest.approx(limit, abs=1e-6)

    def test_requires_simple_model(self):
        spec = ModelSpec.single_class(1.0, EXP1, 0.0, BatchLaw.univariate({2: 1.0}))
        with pytest.raises(ValueError):
            tr.state_prob(spec, 0, 1.0)


class TestStatePMF:
    def test_time_zero_is_point_mass(self):
        r = tr.state_pmf(simple(1.0), 0.0, 4)
        assert r.probabilities[0] == 1.0 and r.probabilities.sum() == 1.0

    def test_matches_state_prob(self):
        spec = simple(2.0, nu=0.5)
        r = tr.state_pmf(spec, 2.0, 15)
        np.testing.assert_allclose(r.probabilities, tr.state_prob(spec, np.arange(16), 2.0), atol=1e-10)
        assert not r.flagged and r.truncation_mass < 1e-9

    def test_independent_classes_without_catastrophes(self):
        spec = ModelSpec((CustomerClass(EXP1, 1.0), CustomerClass(DET1, 0.5)))
        t = 1.5
        r = tr.state_pmf(spec, t, 10)
        ref = np.outer(poisson_pmf(np.arange(11), 1.0 * expected_work("exp1", t)),
                       poisson_pmf(np.arange(11), 0.5 * expected_work("det1", t)))
        np.testing.assert_allclose(r.probabilities, ref, atol=1e-10)

    def test_batch_law_example(self):
        # batches of exactly two customers, no catastrophes: N(t) = 2 * Poisson
        spec = ModelSpec.single_class(1.0, DET1, 0.0, BatchLaw.univariate({2: 1.0}))
        r = tr.state_pmf(spec, 0.7, 8)
        ref = np.zeros(9)
        ref[0::2] = poisson_pmf(np.arange(5), 0.7)
        np.testing.assert_allclose(r.probabilities, ref, atol=1e-10)

    def test_served_coordinates(self):
        spec = simple(1.0, DET1)
        r = tr.state_pmf(spec, 2.0, 6, marks_fixed_served=False)
        # in system ~ Poisson(1) and served ~ Poisson(1), independent
        np.testing.assert_allclose(r.probabilities, np.outer(poisson_pmf(np.arange(7), 1.0),
                                                             poisson_pmf(np.arange(7), 1.0)), atol=1e-10)

    def test_small_cutoff_flags(self):
        r = tr.state_pmf(simple(20.0), 5.0, 3)
        assert r.flagged and r.truncation_mass > 0.5


class TestMoments:
    def test_time_zero(self):
        assert tr.moment(simple(1.0, nu=0.5), 3, 0.0) == 0.0

    def test_order_limits(self):
        with pytest.raises(ValueError):
            tr.moment(simple(1.0), 9, 1.0)
        with pytest.raises(ValueError):
            tr.moment(simple(1.0), 0, 1.0)

    def test_md_short_time_branch(self):
        spec = simple(1.0, DET1, 0.5)
        assert tr.moment(spec, 1, 0.5) == pytest.approx(2 * (1 - math.exp(-0.25)), abs=1e-10)
        m1, m2 = tr.md_moments_literal(spec, 0.5)
        assert m1 == pytest.approx(2 * (1 - math.exp(-0.25)), abs=1e-14)
        assert tr.moment(spec, 2, 0.5) == pytest.approx(m2, rel=1e-9)

    def test_md_long_time_is_window_integral(self):
        spec = simple(1.0, DET1, 0.5)
        assert tr.moment(spec, 1, 2.0) == pytest.approx(md_mean_in_system(1.0, 0.5, 1.0, 2.0), abs=1e-10)
        assert tr.md_moments_literal(spec, 2.0) == (0.0, 0.0)

    def test_frozen_factorial_moments(self):
        # d/dz and d2/dz2 at z=1 of the mixture PGF in 30-digit arithmetic; lam=2, exp(1), nu=0.5, t=2
        spec = simple(2.0, nu=0.5)
        assert tr.moment(spec, 1, 2.0) == pytest.approx(1.2669505755095147, rel=1e-9)
        assert tr.moment(spec, 2, 2.0) == pytest.approx(1.8893637324351325, rel=1e-9)

    def test_ode_matches_convolution(self):
        spec = ModelSpec.single_class(1.5, ServiceDistribution.erlang(2, 2.0), RateFunction.piecewise([1.0], [0.2, 1.0]))
        assert tr.moment(spec, 1, 3.0) == pytest.approx(tr.moment_convolution(spec, 3.0).value, rel=1e-9)

    def test_poisson_factorial_moments_without_catastrophes(self):
        spec = simple(2.0, ServiceDistribution.erlang(2, 2.0))
        mean = 2.0 * expected_work("erlang22", 1.2)
        for r in range(1, 5):
            assert tr.moment(spec, r, 1.2) == pytest.approx(mean ** r, rel=1e-9)

    def test_forward_kernel_mean(self):
        spec = simple(1.0, DET1, 0.5)
        expected = math.exp(-1.0) * (math.exp(0.5) - 1) / 0.5
        assert tr.mean_forward_kernel(spec, 2.0).value == pytest.approx(expected, abs=1e-12)

    def test_mean_matches_pgf_derivative(self):
        spec = simple(1.0, DET1, 0.7)
        h = 1e-4
        t = 1.6
        up = tr.pgf_joint(spec, t, ([1 + h], [1.0]))
        down = tr.pgf_joint(spec, t, ([1 - h], [1.0]))
        assert (up - down) / (2 * h) == pytest.approx(tr.moment(spec, 1, t), abs=1e-5)


class TestServed:
    def test_trivial_cases(self):
        assert tr.served_pgf(simple(1.0, DET1), 0.8, [0.0]) == 1.0
        assert tr.served_pgf(simple(1.0), 2.0, [1.0]) == 1.0

    def test_exponential_value(self):
        assert tr.served_pgf(simple(1.0), 1.0, [0.0]) == pytest.approx(math.exp(-math.exp(-1)), abs=1e-13)

    def test_erlang_value_frozen(self):
        # exp(-lam int_0^1 B), lam=2, Erlang(2, 2), 30-digit quadrature
        assert tr.served_pgf(simple(2.0, ServiceDistribution.erlang(2, 2.0)), 1.0, [0.0]) == \
            pytest.approx(0.58196723333549065, abs=1e-13)

    def test_equals_joint_with_unit_in_system_marks(self):
        spec = simple(1.0, nu=3.0)
        assert tr.served_pgf(spec, 1.5, [0.4]) == pytest.approx(tr.pgf_joint(spec, 1.5, ([1.0], [0.4])), abs=1e-12)


class TestFactorization:
    def test_trivial(self):
        spec = simple(1.0, nu=0.5)
        assert tr.factorization_check(spec, 2.0, 1.0, 1.0) == 0.0
        assert tr.factorization_check(simple(1.0, DET1), 2.0, 0.3, 0.6) < 1e-13

    def test_with_catastrophes(self):
        assert tr.factorization_check(simple(1.0, nu=0.5), 2.0, 0.7, 0.3) <= 1e-6


class TestRenewalIdentity:
    @pytest.mark.parametrize("s", [0.25, 1.0])
    @pytest.mark.parametrize("z", [0.0, 0.5])
    def test_laplace_shift(self, s, z):
        nu = 0.5
        spec = simple(1.0, ServiceDistribution.erlang(2, 2.0), nu)
        free = simple(1.0, ServiceDistribution.erlang(2, 2.0), 0.0)
        with_cat = laplace_integral(lambda t: np.array([tr.pgf_joint(spec, x, ([z], [1.0])) for x in t]),
                                     s, tol=1e-9)
        without = laplace_integral(lambda t: np.array([tr.kernel_phi(free, 0.0, x, ([z], [1.0])) for x in t]),
                                   s + nu, tol=1e-9)
        assert s * with_cat.value == pytest.approx((s + nu) * without.value, abs=1e-6)


class TestSolve:
    def test_query_validation(self):
        with pytest.raises(ValueError):
            tr.TransientQuery(simple(1.0), (2.0, 1.0))
        with pytest.raises(ValueError):
            tr.TransientQuery(simple(1.0), (1.0,), tol=0.0)

    def test_simple_model(self):
        spec = simple(2.0, nu=0.5)
        res = tr.solve(tr.TransientQuery(spec, (0.0, 1.0, 2.0), MarkVector((0.0,), (1.0,)), state_cutoff=25))
        assert len(res.points) == 3
        p = res.points[2]
        assert p.pmf.sum() + p.truncation_mass == pytest.approx(1.0, abs=1e-12)
        assert p.moments[1] == pytest.approx(1.2669505755095147, rel=1e-9)
        assert p.pgf == pytest.approx(p.pmf[0], abs=1e-10)

    def test_batch_model_uses_extraction(self):
        spec = ModelSpec.single_class(1.0, EXP1, 0.5, BatchLaw.univariate({1: 0.5, 2: 0.5}))
        res = tr.solve(tr.TransientQuery(spec, (1.0,), state_cutoff=20))
        p = res.points[0]
        assert p.moment_source == "extracted pmf"
        assert np.all(p.pmf >= -1e-12) and p.pmf.sum() <= 1 + 1e-9


@pytest.mark.parametrize("nu", [0.0, 0.5])
def test_infinite_time_rejected(nu):
    spec = ModelSpec.single_class(1.0, ServiceDistribution.exponential(1.0), nu)
    with pytest.raises(ValueError, match="finite time required"):
        tr.pgf_joint(spec, math.inf, ([0.0], [1.0]))
    with pytest.raises(ValueError, match="finite time required"):
        tr.state_pmf(spec, math.inf, 5)
