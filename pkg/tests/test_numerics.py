import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from bdpfl.numerics import (
    QuadratureError,
    integrate,
    log_add,
    log_binomial_pmf,
    log_binomial_pmf_all,
    log_sum_exp,
    log_sum_exp_rows,
    normal_quantile,
    student_t_cdf,
    student_t_pdf,
    student_t_quantile,
    student_t_sf,
)


class TestLogSumExp:
    def test_large_values_do_not_overflow(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty reduction"):
            log_sum_exp([])

    def test_all_minus_inf(self):
        assert log_sum_exp([-math.inf, -math.inf]) == -math.inf

    def test_rows_match_scipy(self):
        v = np.random.default_rng(0).normal(scale=50, size=(7, 11))
        np.testing.assert_allclose(log_sum_exp_rows(v), special.logsumexp(v, axis=1), rtol=1e-14)

    def test_rows_with_inf_entries(self):
        v = np.array([[-np.inf, 0.0], [-np.inf, -np.inf]])
        out = log_sum_exp_rows(v)
        assert out[0] == 0.0 and out[1] == -np.inf

    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=30))
    def test_bounds(self, xs):
        # max <= lse <= max + log(n)
        v = log_sum_exp(xs)
        assert max(xs) - 1e-9 <= v <= max(xs) + math.log(len(xs)) + 1e-9

    def test_log_add(self):
        assert log_add(math.log(2.0), math.log(3.0)) == pytest.approx(math.log(5.0))


class TestBinomial:
    @pytest.mark.parametrize("n,q", [(1, 0.3), (10, 0.01), (33, 0.5), (64, 0.9)])
    def test_matches_scipy(self, n, q):
        ks = np.arange(n + 1)
        np.testing.assert_allclose(log_binomial_pmf_all(n, q), stats.binom.logpmf(ks, n, q),
                                   rtol=1e-12, atol=1e-12)

    def test_degenerate_probabilities(self):
        assert log_binomial_pmf(0, 5, 0.0) == 0.0
        assert log_binomial_pmf(5, 5, 1.0) == 0.0
        assert log_binomial_pmf(1, 5, 0.0) == -math.inf

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            log_binomial_pmf(6, 5, 0.5)

    @given(st.integers(0, 80), st.floats(0.0, 1.0))
    def test_masses_sum_to_one(self, n, q):
        assert math.exp(log_sum_exp(log_binomial_pmf_all(n, q))) == pytest.approx(1.0, abs=1e-12)

    def test_table_is_read_only(self):
        with pytest.raises(ValueError):
            log_binomial_pmf_all(4, 0.5)[0] = 1.0


class TestIntegrate:
    def test_gaussian_mass(self):
        val = integrate(lambda x: np.exp(-x * x / 2) / math.sqrt(2 * math.pi), -math.inf, math.inf)
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_half_infinite(self):
        assert integrate(lambda x: np.exp(-x), 0.0, math.inf) == pytest.approx(1.0, abs=1e-10)
        assert integrate(lambda x: np.exp(x), -math.inf, 0.0) == pytest.approx(1.0, abs=1e-10)

    def test_polynomial_exact(self):
        assert integrate(lambda x: 3 * x ** 2, 0.0, 2.0) == pytest.approx(8.0, abs=1e-12)

    def test_scalar_integrand_broadcasts(self):
        assert integrate(lambda x: 2.0, 0.0, 3.0) == pytest.approx(6.0)

    def test_reversed_limits(self):
        assert integrate(lambda x: x, 1.0, 0.0) == pytest.approx(-0.5)

    def test_unreachable_tolerance_raises(self):
        with pytest.raises(QuadratureError):
            integrate(lambda x: np.sin(1.0 / np.maximum(x, 1e-300)), 0.0, 1.0, tol=1e-15)


class TestStudentT:
    @pytest.mark.parametrize("dof", [1, 2, 3, 7, 31, 200])
    def test_pdf_cdf_against_scipy(self, dof):
        x = np.linspace(-6, 6, 13)
        np.testing.assert_allclose(student_t_pdf(x, dof), stats.t.pdf(x, dof), rtol=1e-12)
        for xi in (-3.0, -0.5, 0.0, 1.2, 4.0):
            assert student_t_cdf(xi, dof) == pytest.approx(stats.t.cdf(xi, dof), abs=1e-12)
            assert student_t_sf(xi, dof) == pytest.approx(stats.t.sf(xi, dof), abs=1e-12)

    def test_frozen_table_values(self):
        assert student_t_quantile(0.975, 10) == pytest.approx(2.2281, abs=1e-4)
        assert student_t_quantile(0.95, 1) == pytest.approx(6.3138, abs=1e-4)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.5, 1 - 1e-7), st.integers(1, 10**5))
    def test_quantile_matches_scipy(self, p, dof):
        assert student_t_quantile(p, dof) == pytest.approx(special.stdtrit(dof, p),
                                                           rel=1e-8, abs=1e-9)

    def test_symmetry(self):
        assert student_t_quantile(0.1, 4) == pytest.approx(-student_t_quantile(0.9, 4), abs=1e-12)

    @pytest.mark.parametrize("p,dof", [(0.0, 3), (1.0, 3), (0.5, 0)])
    def test_bad_arguments(self, p, dof):
        with pytest.raises(ValueError):
            student_t_quantile(p, dof)

    def test_normal_quantile(self):
        for p in (0.001, 0.3, 0.5, 0.975, 1 - 1e-9):
            assert normal_quantile(p) == pytest.approx(stats.norm.ppf(p), abs=1e-9)
