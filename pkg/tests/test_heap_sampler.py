import json
import math

import numpy as np
import pytest
from scipy.stats import poisson

from core.heap_datagen import SimConfig, simulate_panel
from core.heap_engine import dispersion_window, window_logpmf
from core.heap_errors import DomainError, NumericalError, SamplerAbort
from core.heap_model import Hyperparams, ModelParams, ModelVariant, PanelData, log_joint
from core.heap_report import HeapParams, reporting_pmf
from core.heap_sampler import (HeapSampler, SamplerConfig, chain_seeds, run_chains,
                               run_mcmc, sigma2_xi_conditional, worker_limit)

STUDY_GAMMA = np.array([0.5, -5.0, -10.0, -20.0])
SHORT = SamplerConfig(iterations=30, burn_in=10, thin=2, seed=11, log_every=0)


def heaping_init(data, theta_disp=0.5, omega=math.log(2.0)):
    return ModelParams(alpha=np.array([2.0]), beta=np.zeros((data.n_subjects, data.c)),
                       sigma_beta=np.eye(data.c), x=data.y.copy(), theta_disp=theta_disp,
                       omega=np.array([omega]), gamma=STUDY_GAMMA.copy())


def fixed_steps(delta):
    def step(block, shape):
        return np.full(shape, delta[block], dtype=float)
    return step


class RatioRecorder:
    """Stands in for the accept step: records each log ratio and rejects."""

    def __init__(self):
        self.ratios = []

    def __call__(self, log_ratio):
        log_ratio = np.asarray(log_ratio, dtype=float)
        self.ratios.append(log_ratio)
        return np.zeros(log_ratio.shape, dtype=bool)


class TestSamplerConfig:

    def test_burn_in_must_precede_end(self):
        with pytest.raises(DomainError):
            SamplerConfig(iterations=100, burn_in=100)

    def test_unknown_step_block(self):
        with pytest.raises(DomainError):
            SamplerConfig(step_sizes=(('delta', 0.1),))

    def test_dict_round_trip(self):
        cfg = SamplerConfig(iterations=50, burn_in=5, seed=3, blocked_refresh=False)
        assert SamplerConfig.from_dict(cfg.to_dict()) == cfg

    def test_partial_step_sizes_keep_defaults(self):
        cfg = SamplerConfig.from_dict({'step_sizes': {'alpha': 0.3}})
        assert cfg.step('alpha') == 0.3
        assert cfg.step('beta') == 0.5


class TestLatentCounts:

    def test_frozen_reporting_absorbs_at_report(self, small_panel):
        init = heaping_init(small_panel, theta_disp=1e-10)
        init.omega = None
        init.gamma = None
        sampler = HeapSampler(small_panel, Hyperparams.default(), ModelVariant.DISPERSION_ONLY,
                              SHORT, init=init)
        state = sampler.state
        for _ in range(20):
            sampler.refresh_latent_counts(state)
        assert np.array_equal(state.x, small_panel.y)

    def test_single_site_mode_targets_same_counts(self, small_panel):
        cfg = SamplerConfig(iterations=30, burn_in=10, seed=4, blocked_refresh=False, log_every=0)
        sampler = HeapSampler(small_panel, Hyperparams.default(), ModelVariant.HEAPING, cfg,
                              init=heaping_init(small_panel))
        sampler.refresh_latent_counts(sampler.state)
        assert sampler._window['x'][1] == small_panel.n_obs
        assert np.all(sampler.state.x >= 0)

    def test_kernel_balances_on_three_states(self):
        # enumerate the MH kernel of the latent move on a truncated toy target
        states = np.array([11, 12, 13])
        p = HeapParams(0.5, 2.0, tuple(STUDY_GAMMA))
        target = np.array([reporting_pmf(p, int(x))[12] for x in states]) * poisson.pmf(states, 5.0)
        target /= target.sum()
        kernel = np.zeros((3, 3))
        for i, x in enumerate(states):
            forward = dispersion_window(x, 0.5, inflation=1.5)
            for j, x_new in enumerate(states):
                if i == j:
                    continue
                backward = dispersion_window(x_new, 0.5, inflation=1.5)
                log_q = window_logpmf(x, backward) - window_logpmf(x_new, forward)
                ratio = math.exp(math.log(target[j] / target[i]) + log_q)
                kernel[i, j] = math.exp(window_logpmf(x_new, forward)) * min(1.0, ratio)
            kernel[i, i] = 1.0 - kernel[i].sum()
        assert np.max(np.abs(target @ kernel - target)) < 1e-10

    @pytest.mark.slow
    def test_single_site_marginal_matches_full_conditional(self):
        data = PanelData.from_arrays(subject_ids=[0], time=[0], y=[12])
        init = heaping_init(data)
        init.alpha = np.array([math.log(5.0)])
        cfg = SamplerConfig(iterations=2, burn_in=1, seed=8, update_order=('x',), log_every=0)
        sampler = HeapSampler(data, Hyperparams.default(), ModelVariant.HEAPING, cfg, init=init)
        state = sampler.state
        counts = np.zeros(200, dtype=int)
        for it in range(101_000):
            sampler.refresh_latent_counts(state)
            if it >= 1000:
                counts[state.x[0]] += 1
        xs = np.arange(81)
        p = HeapParams(0.5, 2.0, tuple(STUDY_GAMMA))
        g = np.array([reporting_pmf(p, int(x), max_y=12)[12] for x in xs])
        exact = g * poisson.pmf(xs, 5.0)
        exact /= exact.sum()
        empirical = counts[:81] / counts.sum()
        assert 0.5 * np.abs(empirical - exact).sum() < 0.02


class TestBlockUpdates:

    @pytest.fixture
    def sampler(self, small_panel):
        return HeapSampler(small_panel, Hyperparams.default(), ModelVariant.HEAPING, SHORT,
                           init=heaping_init(small_panel))

    def test_zero_step_always_accepts(self, sampler):
        sampler._step = fixed_steps({'alpha': 0.0})
        for _ in range(10):
            sampler.update_block_mh(sampler.state, 'alpha')
        assert sampler._window['alpha'] == [10, 10]

    def test_unordered_gamma_is_rejected(self, sampler):
        before = sampler.state.gamma.copy()
        sampler._step = lambda block, shape: np.array([0.0, 0.0, 10.0, 0.0])
        sampler.update_block_mh(sampler.state, 'gamma')
        assert np.array_equal(sampler.state.gamma, before)
        assert sampler._window['gamma'] == [0, 1]

    def test_unknown_block(self, sampler):
        with pytest.raises(DomainError):
            sampler.update_block_mh(sampler.state, 'sigma_beta')

    @pytest.mark.parametrize("block, delta, jacobian", [
        ('alpha', 0.1, 0.0),
        ('beta', -0.2, 0.0),
        ('theta_disp', 0.3, 0.3),
        ('gamma', -0.05, 0.0),
        ('omega', 0.25, 0.0),
    ])
    def test_local_ratio_matches_log_joint(self, sampler, small_panel, block, delta, jacobian):
        hyper = Hyperparams.default()
        state = sampler.state
        current = state.copy()
        moved = state.copy()
        if block == 'theta_disp':
            moved.theta_disp = state.theta_disp * math.exp(delta)
        else:
            setattr(moved, block, getattr(state, block) + delta)
        recorder = RatioRecorder()
        sampler._step = fixed_steps({block: delta})
        sampler._accept = recorder
        sampler.update_block_mh(state, block)
        expected = (log_joint(moved, small_panel, hyper, sampler.variant, sampler.cache)
                    - log_joint(current, small_panel, hyper, sampler.variant, sampler.cache))
        assert np.sum(recorder.ratios[0]) == pytest.approx(expected + jacobian, abs=1e-8)

    def test_subject_heaping_ratio_matches_log_joint(self, small_panel):
        init = heaping_init(small_panel)
        init.xi = np.array([0.1, -0.2, 0.3])
        init.sigma2_xi = 0.5
        sampler = HeapSampler(small_panel, Hyperparams.default(), ModelVariant.SUBJECT_HEAPING,
                              SHORT, init=init)
        moved = sampler.state.copy()
        moved.xi = moved.xi + 0.4
        current = sampler.state.copy()
        recorder = RatioRecorder()
        sampler._step = fixed_steps({'xi': 0.4})
        sampler._accept = recorder
        sampler.update_block_mh(sampler.state, 'xi')
        hyper = Hyperparams.default()
        expected = (log_joint(moved, small_panel, hyper, ModelVariant.SUBJECT_HEAPING)
                    - log_joint(current, small_panel, hyper, ModelVariant.SUBJECT_HEAPING))
        assert recorder.ratios[0].sum() == pytest.approx(expected, abs=1e-8)


class TestVarianceDraws:

    def test_xi_conjugate_parameters(self):
        xi = np.zeros(20)
        xi[:10] = 1.0
        shape, rate = sigma2_xi_conditional(xi, Hyperparams.default())
        assert shape == pytest.approx(10.001)
        assert rate == pytest.approx(5.001)

    def test_zero_effects_give_prior_rate(self, small_panel):
        sampler = HeapSampler(small_panel, Hyperparams.default(), ModelVariant.NO_HEAPING, SHORT)
        state = sampler.state
        state.beta[:] = 0.0
        draws = [sampler.update_variances(state).sigma_beta[0, 0] for _ in range(4000)]
        # IG(4 + 3/2, 5) has mean 5 / 4.5
        assert np.mean(draws) == pytest.approx(5.0 / 4.5, abs=0.05)

    def test_covariance_draws_are_positive_definite(self):
        rng = np.random.default_rng(2)
        Z = np.column_stack([np.ones(8), rng.normal(size=8)])
        data = PanelData.from_arrays(subject_ids=np.repeat(np.arange(4), 2), time=np.tile([0, 1], 4),
                                     y=rng.poisson(5, 8), Z=Z)
        sampler = HeapSampler(data, Hyperparams.default(c=2), ModelVariant.NO_HEAPING, SHORT)
        state = sampler.state
        state.beta = rng.normal(size=(4, 2))
        for _ in range(50):
            sigma = sampler.update_variances(state).sigma_beta
            assert np.allclose(sigma, sigma.T)
            np.linalg.cholesky(sigma)


class TestChains:

    def test_no_heaping_keeps_reports(self, small_panel):
        chain = run_mcmc(small_panel, Hyperparams.default(), 'no-heaping', SHORT)
        assert len(chain) == 10
        assert all(np.array_equal(s.x, small_panel.y) for s in chain.samples)
        assert 'x' not in chain.acceptance

    def test_acceptance_after_adaptation(self, small_panel):
        cfg = SamplerConfig(iterations=3000, burn_in=1500, thin=10, seed=2, log_every=0)
        chain = run_mcmc(small_panel, Hyperparams.default(), 'no-heaping', cfg)
        for block in ('alpha', 'beta'):
            assert 0.1 <= chain.acceptance[block] <= 0.6

    @pytest.mark.slow
    def test_heaping_acceptance_after_adaptation(self):
        data, _ = simulate_panel(SimConfig(n_subjects=30, seed=5))
        cfg = SamplerConfig(iterations=2000, burn_in=1000, thin=10, seed=4, log_every=0)
        chain = run_mcmc(data, Hyperparams.default(), 'heaping', cfg)
        for block in ('alpha', 'beta', 'theta_disp', 'gamma', 'omega'):
            assert 0.1 <= chain.acceptance[block] <= 0.6, block

    def test_identical_seeds_give_identical_chains(self, small_panel):
        first = run_mcmc(small_panel, Hyperparams.default(), 'heaping', SHORT)
        second = run_mcmc(small_panel, Hyperparams.default(), 'heaping', SHORT)
        for name in ('alpha', 'beta', 'x', 'theta_disp', 'gamma', 'omega'):
            assert np.array_equal(first.draws(name), second.draws(name))
        assert first.iterations == list(range(10, 30, 2))

    def test_draws_of_missing_block(self, small_panel):
        chain = run_mcmc(small_panel, Hyperparams.default(), 'dispersion-only', SHORT)
        with pytest.raises(DomainError):
            chain.draws('gamma')
        assert chain.metadata()['variant'] == 'dispersion-only'

    def test_failure_dumps_state(self, small_panel, tmp_path):
        cfg = SamplerConfig(iterations=5, burn_in=1, log_every=0, update_order=("alpha", "x"),
                            dump_dir=str(tmp_path))
        sampler = HeapSampler(small_panel, Hyperparams.default(), ModelVariant.HEAPING, cfg,
                              init=heaping_init(small_panel))

        def broken(state):
            raise NumericalError("singular")

        sampler._updaters['alpha'] = broken
        with pytest.raises(SamplerAbort) as info:
            sampler.run()
        with open(info.value.dump_path) as fh:
            dump = json.load(fh)
        assert dump['block'] == 'alpha'
        assert dump['state']['x'] == small_panel.y.tolist()

    def test_chain_seeds(self):
        assert chain_seeds(7, 1) == [7]
        seeds = chain_seeds(7, 3)
        assert len(set(seeds)) == 3 and seeds == chain_seeds(7, 3)

    def test_run_chains_sequential(self, small_panel):
        cfg = SamplerConfig(iterations=12, burn_in=2, thin=5, seed=5, chains=2, log_every=0)
        chains = run_chains(small_panel, Hyperparams.default(), 'no-heaping', cfg, processes=1)
        assert [c.seed for c in chains] == chain_seeds(5, 2)
        assert all(len(c) == 2 for c in chains)

    def test_worker_limit(self, monkeypatch):
        monkeypatch.setenv('HEAPLAB_THREADS', '3')
        assert worker_limit() == 3
        monkeypatch.setenv('HEAPLAB_THREADS', 'many')
        with pytest.raises(DomainError):
            worker_limit()
