import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import poisson

from core.heap_engine import transition_row, uniformization_row, normal_approx_pmf
from core.heap_errors import DomainError
from core.heap_report import (HeapParams, ReportingCache, check_gamma, gamma_ordered,
                              heap_rates, initial_cap, mixture_loglik, rate_table,
                              regime_weight_matrix, regime_weights, reporting_moments,
                              reporting_pmf)

STUDY_GAMMA = (0.5, -5.0, -10.0, -20.0)


class TestRegimeWeights:

    def test_worked_example(self):
        v = regime_weights((0.5, -10.0, -20.0, -40.0), 14)
        assert v[0] == pytest.approx(0.9526, abs=1e-4)
        assert v[1] == pytest.approx(0.0474, abs=1e-4)
        assert v[2] < 1e-5
        assert len(v) == 4

    def test_midpoint_is_even_odds(self):
        # gamma_1 + gamma_0 x = 0 at x = 20
        assert regime_weights((0.5, -10.0, -30.0), 20)[0] == pytest.approx(0.5)

    def test_extreme_arguments_stay_finite(self):
        w = regime_weight_matrix((5.0, 400.0, -400.0), [0, 10_000])
        assert np.all(np.isfinite(w))
        assert np.allclose(w.sum(axis=1), 1.0)

    def test_single_grid_forces_heap_regime(self):
        w = regime_weight_matrix((1.0, math.inf), [0, 7, 300])
        assert np.all(w[:, 1] == 1.0)

    @given(gamma0=st.floats(0.01, 5.0),
           cuts=st.lists(st.floats(-100.0, 100.0), min_size=1, max_size=4, unique=True),
           x=st.integers(0, 500))
    def test_weights_are_a_distribution(self, gamma0, cuts, x):
        cuts = sorted(cuts, reverse=True)
        if any(not a > b for a, b in zip(cuts, cuts[1:])):
            return
        w = regime_weight_matrix((gamma0, *cuts), [x])[0]
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_gamma_validation(self):
        assert gamma_ordered(STUDY_GAMMA)
        assert not gamma_ordered((0.5, -10.0, -5.0, -20.0))
        assert not gamma_ordered((0.0, -5.0))
        with pytest.raises(DomainError):
            check_gamma(STUDY_GAMMA, n_grids=2)
        with pytest.raises(DomainError):
            regime_weights(STUDY_GAMMA, -1)


class TestHeapParams:

    def test_rejects_unordered_grids(self):
        with pytest.raises(DomainError):
            HeapParams(0.5, 1.0, STUDY_GAMMA, (10, 5, 50))

    def test_rejects_negative_intensity(self):
        with pytest.raises(DomainError):
            HeapParams(-0.5, 1.0, STUDY_GAMMA)

    def test_frozen(self):
        assert HeapParams(0.0, 0.0, STUDY_GAMMA).frozen
        assert not HeapParams(0.0, 0.1, STUDY_GAMMA).frozen


class TestHeapRates:

    def test_off_grid_state(self):
        lam, mu = heap_rates(HeapParams.single_grid(1.0, 2.5, 5), 33).evaluate(40)
        assert lam[33] == pytest.approx(41.5)
        assert mu[33] == pytest.approx(38.0)

    def test_grid_point(self):
        lam, mu = heap_rates(HeapParams.single_grid(1.0, 2.5, 5), 33).evaluate(40)
        assert lam[35] == pytest.approx(36.0)
        assert mu[35] == pytest.approx(35.0)

    def test_dispersion_only_is_linear(self):
        lam, mu = heap_rates(HeapParams(0.7, 0.0, STUDY_GAMMA), 12).evaluate(30)
        k = np.arange(31)
        assert np.allclose(lam, 0.7 * (1 + k))
        assert np.allclose(mu, 0.7 * k)

    def test_rate_table(self):
        table = rate_table(HeapParams.single_grid(1.0, 2.5, 5), 33, 40)
        assert list(table.columns) == ['k', 'birth', 'death', 'birth_heap', 'death_heap']
        assert len(table) == 41
        assert table.loc[33, 'birth_heap'] == pytest.approx(7.5)
        assert table.loc[35, 'death_heap'] == pytest.approx(0.0)

    def test_cap_covers_requested_report(self):
        p = HeapParams(0.5, 2.0, STUDY_GAMMA)
        assert initial_cap(p, 7) >= 50
        cap = initial_cap(p, 7, y=400)
        assert cap % 64 == 0 and cap >= 420


class TestReportingPmf:

    def test_frozen_chain(self):
        g = reporting_pmf(HeapParams(0.0, 0.0, STUDY_GAMMA), 9)
        assert g[9] == 1.0 and g.sum() == 1.0

    def test_dispersion_moments(self):
        mean, var = reporting_moments(HeapParams(0.5, 0.0, STUDY_GAMMA), 7)
        assert mean == pytest.approx(7.5, rel=1e-4)
        assert var == pytest.approx(7.75, rel=1e-4)

    def test_heaps_on_the_grid(self):
        g = reporting_pmf(HeapParams.single_grid(0.5, 2.0, 5), 7)
        for y in (5, 10):
            assert g[y] > g[y - 1] and g[y] > g[y + 1]

    def test_read_only_and_normalized(self):
        g = reporting_pmf(HeapParams(0.5, 2.0, STUDY_GAMMA), 23)
        assert not g.flags.writeable
        assert g.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(g >= 0)

    def test_asymmetric_heaping(self):
        g = reporting_pmf(HeapParams(0.5, 1.5, (1.0, -5.0, -10.0, -20.0)), 14)
        assert abs(g[10] - g[20]) > 1e-6

    @pytest.mark.parametrize("x, theta, mean_tol, var_rel", [
        (5, 0.5, 0.05, 0.05),
        (20, 0.5, 0.05, 0.05),
        (50, 0.5, 0.05, 0.05),
        (20, 1.0, 0.05, 0.05),
        (50, 1.0, 0.05, 0.05),
        # truncation at zero moves the discretized normal noticeably here
        (5, 1.0, 0.3, 0.2),
    ])
    def test_normal_approximation_quality(self, x, theta, mean_tol, var_rel):
        g = reporting_pmf(HeapParams(theta, 0.0, STUDY_GAMMA), x)
        states, approx = normal_approx_pmf(x, theta, range(len(g)))
        y = np.arange(len(g))
        exact_mean = g @ y
        exact_var = g @ (y - exact_mean) ** 2
        approx_mean = approx @ states
        approx_var = approx @ (states - approx_mean) ** 2
        assert abs(approx_mean - exact_mean) < mean_tol
        assert approx_var == pytest.approx(exact_var, rel=var_rel)

    def test_rejects_negative_count(self):
        with pytest.raises(DomainError):
            reporting_pmf(HeapParams(0.5, 0.0, STUDY_GAMMA), -3)

    @pytest.mark.slow
    def test_random_parameters_match_uniformization(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            p = HeapParams(rng.uniform(0.05, 2.0), rng.uniform(0.0, 4.0), STUDY_GAMMA)
            x = int(rng.integers(0, 80))
            rates = heap_rates(p, x)
            laplace = transition_row(rates, x)
            oracle = uniformization_row(rates, x, min_cap=len(laplace) - 1)
            width = min(len(laplace), len(oracle))
            assert np.max(np.abs(laplace[:width] - oracle[:width])) < 1e-6


class TestReportingCache:

    def test_matches_fresh_solve(self):
        p = HeapParams(0.5, 2.0, STUDY_GAMMA)
        cache = ReportingCache()
        xs = np.array([3, 7, 7, 14, 40])
        rows = cache.rows(xs, p.theta_disp, p.theta_heap, p.gamma, p.grids)
        for x, row in zip(xs, rows):
            fresh = reporting_pmf(p, int(x))
            assert len(row) == len(fresh)
            assert np.max(np.abs(row - fresh)) < 1e-12

    def test_result_does_not_depend_on_cache_state(self):
        p = HeapParams(0.5, 2.0, STUDY_GAMMA)
        y = np.array([10, 5, 22, 0])
        x = np.array([12, 5, 20, 1])
        warm = ReportingCache()
        warm.rows(np.arange(30), p.theta_disp, p.theta_heap, p.gamma, p.grids)
        cold = ReportingCache()
        a = warm.log_g(y, x, p.theta_disp, p.theta_heap, p.gamma, p.grids)
        b = cold.log_g(y, x, p.theta_disp, p.theta_heap, p.gamma, p.grids)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_hits_and_eviction(self):
        cache = ReportingCache(max_rows=2)
        args = (0.5, 1.0, STUDY_GAMMA)
        cache.rows([4, 4, 6], *args)
        assert cache.stats()['misses'] == 2
        cache.rows([4], *args)
        assert cache.stats()['hits'] == 2
        cache.rows([9], *args)
        assert len(cache) == 2

    def test_report_beyond_row_is_impossible(self):
        cache = ReportingCache()
        value = cache.log_g([3], [3], 0.0, 0.0, STUDY_GAMMA)
        assert value[0] == 0.0
        assert cache.log_g([4], [3], 0.0, 0.0, STUDY_GAMMA)[0] == -np.inf

    def test_per_observation_heap_intensity(self):
        cache = ReportingCache()
        both = cache.log_g([10, 10], [12, 12], 0.5, [0.5, 3.0], STUDY_GAMMA)
        assert both[0] != both[1]

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            ReportingCache().log_g([1, 2], [1], 0.5, 1.0, STUDY_GAMMA)


class TestMixtureLoglik:

    def test_brute_force(self):
        p = HeapParams(0.5, 0.0, STUDY_GAMMA)
        total = sum(poisson.pmf(x, 1.0) * reporting_pmf(p, x, max_y=0)[0] for x in range(61))
        result = mixture_loglik(0, 1.0, p)
        assert not result.underflow
        assert result.value == pytest.approx(math.log(total), abs=1e-9)

    def test_frozen_limit_is_poisson(self):
        p = HeapParams(1e-9, 0.0, STUDY_GAMMA)
        assert mixture_loglik(7, 4.0, p).value == pytest.approx(poisson.logpmf(7, 4.0))

    def test_intensity_near_report_is_more_likely(self):
        p = HeapParams(0.5, 2.0, STUDY_GAMMA)
        near = mixture_loglik(10, 10.0, p).value
        far = mixture_loglik(10, 100.0, p).value
        assert near > far
        assert far < -20.0

    def test_shared_cache(self):
        p = HeapParams(0.5, 2.0, STUDY_GAMMA)
        cache = ReportingCache()
        first = mixture_loglik(10, 9.0, p, cache=cache)
        assert len(cache) > 0
        assert mixture_loglik(10, 9.0, p, cache=cache) == first

    def test_rejects_bad_inputs(self):
        p = HeapParams(0.5, 0.0, STUDY_GAMMA)
        with pytest.raises(DomainError):
            mixture_loglik(3, 0.0, p)
        with pytest.raises(DomainError):
            mixture_loglik(-1, 2.0, p)
