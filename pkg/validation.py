"""
Validation Experiments for the Heaping Lab
==========================================
Acceptance experiments for the birth-death reporting model, the latent
count sampler and the model-comparison statistics. Each experiment states
what it checks and prints a PASS/FAIL verdict.

    python validation.py                 # full suite (long: fits at 20k iterations)
    python validation.py --quick         # reduced replicates and iterations
    python validation.py --only 1 2 3    # selected experiments
"""

import argparse
import logging
import multiprocessing
import time
from typing import Dict, List

import numpy as np
from scipy.stats import poisson

from core.heap_datagen import SimConfig, simulate_panel
from core.heap_engine import (RateSchedule, continued_fraction_h00, dispersion_moments,
                              laplace_row, transition_row, uniformization_row)
from core.heap_fitstats import dic, regime_midpoints, replicate_summary, sspe, summarize
from core.heap_model import (Hyperparams, ModelParams, ModelVariant, PanelData, wh08_report,
                             wh08_round)
from core.heap_report import DEFAULT_GRIDS, HeapParams, ReportingCache, heap_rates
from core.heap_sampler import (RANDOM_WALK_BLOCKS, HeapSampler, SamplerConfig, run_mcmc,
                               worker_limit)

logger = logging.getLogger(__name__)

STUDY_GAMMA = (0.5, -5.0, -10.0, -20.0)


def _recovery_fit(job):
    """Simulate one N = 100 panel and fit the heaping model to it."""
    data_seed, cfg = job
    data, _ = simulate_panel(SimConfig(n_subjects=100, seed=data_seed))
    chain = run_mcmc(data, Hyperparams.default(), ModelVariant.HEAPING, cfg)
    return summarize(chain).parameters, chain.acceptance, chain.wall_time


class HeapValidationExperiments:
    """
    Acceptance experiments. `quick` shrinks replicate counts and chain
    lengths so the whole suite runs in minutes; verdicts are then indicative.
    """

    def __init__(self, quick: bool = False, seed: int = 2024):
        self.quick = quick
        self.seed = seed
        self.results: Dict[int, Dict] = {}
        self._recovery_fits: List[Dict] = []
        self._recovery_acceptance: List[Dict[str, float]] = []
        self._recovery_fit_seconds: List[float] = []
        self._recovery_seconds = 0.0

    def _header(self, number: int, title: str, claim: str):
        print("\n" + "=" * 60)
        print(f"EXPERIMENT {number}: {title}")
        print("=" * 60)
        print(f"Check: {claim}")

    def _verdict(self, number: int, passed: bool, **details) -> Dict:
        print("  ✅ PASS" if passed else "  ❌ FAIL")
        self.results[number] = {'passed': bool(passed), **details}
        return self.results[number]

    def _sampler_config(self, seed: int) -> SamplerConfig:
        iterations = 2_000 if self.quick else 20_000
        return SamplerConfig(iterations=iterations, burn_in=iterations // 4, thin=5, seed=seed,
                             log_every=0)

    # ========================================
    # EXPERIMENT 1: Engine vs uniformization
    # ========================================

    def experiment_1_oracle_equivalence(self):
        self._header(1, "Laplace inversion vs uniformization",
                     "rows agree to 1e-6 and sum to 1 +- 1e-6 on random heaping schedules")
        rng = np.random.default_rng(self.seed)
        cases = 20 if self.quick else 100
        started = time.perf_counter()
        worst, worst_mass = 0.0, 0.0
        for _ in range(cases):
            p = HeapParams(rng.uniform(0.1, 3.0), rng.uniform(0.0, 5.0), STUDY_GAMMA)
            x = int(rng.integers(0, 121))
            rates = heap_rates(p, x)
            laplace = transition_row(rates, x)
            oracle = uniformization_row(rates, x, min_cap=len(laplace) - 1)
            width = min(len(laplace), len(oracle))
            worst = max(worst, float(np.max(np.abs(laplace[:width] - oracle[:width]))))
            worst_mass = max(worst_mass, abs(laplace.sum() - 1.0))
        elapsed = time.perf_counter() - started
        print(f"  cases: {cases}, max |difference| {worst:.2e}, max |mass - 1| {worst_mass:.2e}, "
              f"{elapsed:.1f}s")
        return self._verdict(1, worst < 1e-6 and worst_mass < 1e-6, max_diff=worst,
                             max_mass_error=worst_mass, seconds=elapsed)

    # ========================================
    # EXPERIMENT 2: Closed forms
    # ========================================

    def experiment_2_closed_forms(self):
        self._header(2, "Closed-form special cases",
                     "Poisson-process rows to 1e-8; dispersion moments to 1e-4 relative")
        row = transition_row(RateSchedule.linear(1.0), 0)
        poisson_error = float(np.max(np.abs(row - poisson.pmf(np.arange(len(row)), 1.0))))
        worst = 0.0
        for x in (5, 20, 50):
            for theta in (0.5, 1.0, 2.0):
                g = transition_row(RateSchedule.linear(theta, theta, theta), x)
                y = np.arange(len(g))
                mean = g @ y
                var = g @ (y - mean) ** 2
                want_mean, want_var = dispersion_moments(x, theta)
                worst = max(worst, abs(mean / want_mean - 1), abs(var / want_var - 1))
        print(f"  Poisson max error {poisson_error:.2e}; worst moment error {worst:.2e}")
        return self._verdict(2, poisson_error < 1e-8 and worst < 1e-4,
                             poisson_error=poisson_error, moment_error=worst)

    # ========================================
    # EXPERIMENT 3: Continued fraction
    # ========================================

    def experiment_3_continued_fraction(self):
        self._header(3, "Continued fraction vs tridiagonal solve",
                     "h_00(s) agrees to 1e-10 on 20 schedules x 4 values of s")
        rng = np.random.default_rng(self.seed + 3)
        worst = 0.0
        for _ in range(20):
            rates = RateSchedule.linear(rng.uniform(0.1, 3.0), rng.uniform(0.0, 1.0),
                                        rng.uniform(1.5, 3.0))
            for s in (0.5, 1.0, 5.0, 20.0):
                worst = max(worst, abs(continued_fraction_h00(rates, s) - laplace_row(rates, 0, s)[0]))
        print(f"  worst |difference| {worst:.2e}")
        return self._verdict(3, worst < 1e-10, max_diff=worst)

    # ========================================
    # EXPERIMENT 4: Latent sampler exactness
    # ========================================

    def experiment_4_latent_exactness(self):
        self._header(4, "Latent-count sampler exactness",
                     "MH marginal of X matches the brute-force full conditional (TV < 0.02)")
        rng = np.random.default_rng(self.seed + 4)
        copies, sweeps = 1000, (30 if self.quick else 100)
        worst = 0.0
        for case in range(5):
            y = int(rng.integers(3, 40))
            eta = float(rng.uniform(2.0, 30.0))
            theta_disp, theta_heap = float(rng.uniform(0.2, 1.5)), float(rng.uniform(0.5, 3.0))
            data = PanelData.from_arrays(subject_ids=np.zeros(copies, dtype=int),
                                         time=np.arange(copies), y=np.full(copies, y))
            init = ModelParams(alpha=np.array([np.log(eta)]), beta=np.zeros((1, 1)),
                               sigma_beta=np.eye(1), x=np.full(copies, y), theta_disp=theta_disp,
                               omega=np.array([np.log(theta_heap)]), gamma=np.array(STUDY_GAMMA))
            cfg = SamplerConfig(iterations=2, burn_in=1, seed=self.seed + case,
                                update_order=('x',), log_every=0)
            sampler = HeapSampler(data, Hyperparams.default(), ModelVariant.HEAPING, cfg, init=init)
            for _ in range(50):
                sampler.refresh_latent_counts(sampler.state)
            counts = np.zeros(400, dtype=int)
            for _ in range(sweeps):
                sampler.refresh_latent_counts(sampler.state)
                counts += np.bincount(sampler.state.x, minlength=400)[:400]
            xs = np.arange(400)
            log_g = ReportingCache().log_g(np.full(400, y), xs, theta_disp, theta_heap, STUDY_GAMMA)
            exact = np.exp(log_g) * poisson.pmf(xs, eta)
            exact /= exact.sum()
            tv = 0.5 * float(np.abs(counts / counts.sum() - exact).sum())
            worst = max(worst, tv)
            print(f"  case {case}: Y={y}, eta={eta:.1f}, theta=({theta_disp:.2f}, {theta_heap:.2f}) "
                  f"TV {tv:.4f}")
        return self._verdict(4, worst < 0.02, max_tv=worst)

    # ========================================
    # EXPERIMENTS 5-6: Simulation-study recovery
    # ========================================

    def _recovery(self):
        if self._recovery_fits:
            return self._recovery_fits
        replicates = 4 if self.quick else 20
        jobs = [(self.seed + 100 + r, self._sampler_config(self.seed + r)) for r in range(replicates)]
        processes = min(len(jobs), worker_limit())
        logger.info("Recovery: %d replicates on %d worker(s)", replicates, processes)
        started = time.perf_counter()
        if processes <= 1:
            results = [_recovery_fit(job) for job in jobs]
        else:
            with multiprocessing.Pool(processes) as pool:
                results = pool.map(_recovery_fit, jobs)
        self._recovery_seconds = time.perf_counter() - started
        self._recovery_fits = [parameters for parameters, _, _ in results]
        self._recovery_acceptance = [acceptance for _, acceptance, _ in results]
        self._recovery_fit_seconds = [seconds for _, _, seconds in results]
        return self._recovery_fits

    def experiment_5_recovery(self):
        self._header(5, "Simulation-study recovery at N = 100",
                     "avg posterior mean alpha in 2.00 +- 0.30, theta_disp in 0.50 +- 0.20, "
                     "alpha coverage >= 75%, acceptance in [0.1, 0.6], 20 fits within 60 min")
        fits = self._recovery()
        truth = {'alpha[0]': 2.0, 'sigma2_beta': 1.21, 'theta_disp': 0.5,
                 'theta_heap': 2.0, 'gamma[0]': 0.5}
        table = replicate_summary(fits, truth)
        print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        rows = table.set_index('parameter')
        alpha_ok = abs(rows.loc['alpha[0]', 'avg_mean'] - 2.0) <= 0.30
        theta_ok = abs(rows.loc['theta_disp', 'avg_mean'] - 0.5) <= 0.20
        coverage_ok = rows.loc['alpha[0]', 'coverage'] >= 0.75

        outside = [(r, block, rate) for r, rates in enumerate(self._recovery_acceptance)
                   for block, rate in rates.items()
                   if block in RANDOM_WALK_BLOCKS and not 0.1 <= rate <= 0.6]
        for r, block, rate in outside:
            print(f"  replicate {r}: {block} acceptance {rate:.3f} outside [0.1, 0.6]")
        acceptance_ok = not outside

        per_fit = float(np.mean(self._recovery_fit_seconds))
        print(f"  wall time {self._recovery_seconds / 60:.1f} min for {len(fits)} fits "
              f"({per_fit:.0f}s per fit)")
        timing_ok = self.quick or self._recovery_seconds < 3600.0
        return self._verdict(5, alpha_ok and theta_ok and coverage_ok and acceptance_ok and timing_ok,
                             table=table.to_dict('records'), seconds=self._recovery_seconds,
                             acceptance=self._recovery_acceptance)

    def experiment_6_weak_identification(self):
        self._header(6, "Weak identification of the coarse regimes",
                     "posterior variance of gamma_2, gamma_3 >= 10x that of gamma_0")
        fits = self._recovery()
        base = np.mean([f['gamma[0]']['var'] for f in fits])
        ratios = {k: float(np.mean([f[f'gamma[{k}]']['var'] for f in fits]) / base) for k in (2, 3)}
        print(f"  variance ratios to gamma_0: {ratios}")
        return self._verdict(6, all(v >= 10 for v in ratios.values()), ratios=ratios)

    # ========================================
    # EXPERIMENT 7: Model comparison
    # ========================================

    def experiment_7_model_comparison(self):
        self._header(7, "Model comparison on heaped data (N = 500)",
                     "DIC(heaping) < DIC(dispersion-only), SSPE(heaping) < SSPE(no-heaping)")
        n = 150 if self.quick else 500
        data, _ = simulate_panel(SimConfig(n_subjects=n, seed=self.seed + 7))
        scores = {}
        for variant in (ModelVariant.NO_HEAPING, ModelVariant.DISPERSION_ONLY, ModelVariant.HEAPING):
            chain = run_mcmc(data, Hyperparams.default(), variant, self._sampler_config(self.seed + 7))
            scores[variant.value] = {'dic': dic(chain, data)['dic'], 'sspe': sspe(chain, data)}
            print(f"  {variant.value:<16} DIC {scores[variant.value]['dic']:10.1f}   "
                  f"SSPE {scores[variant.value]['sspe']:10.1f}")
        passed = (scores['heaping']['dic'] < scores['dispersion-only']['dic']
                  and scores['heaping']['sspe'] < scores['no-heaping']['sspe'])
        return self._verdict(7, passed, scores=scores)

    # ========================================
    # EXPERIMENT 8: Deterministic rounding baseline
    # ========================================

    def experiment_8_rounding_baseline(self):
        self._header(8, "Deterministic rounding baseline",
                     "rounding rules hold; a rounding fit recovers gamma_0 > 0 and ordered regimes")
        rules = (wh08_report(22, STUDY_GAMMA, regime=1) == 20
                 and wh08_report(75, STUDY_GAMMA, regime=3) == 100
                 and all(wh08_round(k * m, m) == k * m for m in DEFAULT_GRIDS for k in range(50)))
        data, _ = simulate_panel(SimConfig(n_subjects=150 if self.quick else 300, mechanism='wh08',
                                           seed=self.seed + 8))
        chain = run_mcmc(data, Hyperparams.default(), ModelVariant.WH08,
                         self._sampler_config(self.seed + 8))
        gamma = chain.draws('gamma').mean(axis=0)
        midpoints = regime_midpoints(gamma)
        print(f"  rules hold: {rules}; posterior mean gamma {np.round(gamma, 3)}; "
              f"midpoints {np.round(midpoints, 1)}")
        ordered = gamma[0] > 0 and bool(np.all(np.diff(midpoints) > 0))
        return self._verdict(8, rules and ordered, gamma=gamma.tolist())

    # ========================================
    # DRIVER
    # ========================================

    def run_all_experiments(self, only=None):
        print("RUNNING HEAPING LAB VALIDATION SUITE" + (" (quick)" if self.quick else ""))
        print("=" * 60)
        experiments = {
            1: self.experiment_1_oracle_equivalence,
            2: self.experiment_2_closed_forms,
            3: self.experiment_3_continued_fraction,
            4: self.experiment_4_latent_exactness,
            5: self.experiment_5_recovery,
            6: self.experiment_6_weak_identification,
            7: self.experiment_7_model_comparison,
            8: self.experiment_8_rounding_baseline,
        }
        for number in sorted(only or experiments):
            experiments[number]()

        print("\n" + "=" * 60)
        print("VALIDATION SUMMARY")
        print("=" * 60)
        passed = 0
        for number, result in sorted(self.results.items()):
            passed += result['passed']
            print(f"{'✅' if result['passed'] else '❌'} experiment {number}: "
                  f"{'PASS' if result['passed'] else 'FAIL'}")
        print(f"\nOverall: {passed}/{len(self.results)} experiments pass")
        return self.results


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.split('\n\n')[0])
    parser.add_argument('--quick', action='store_true')
    parser.add_argument('--only', type=int, nargs='+', choices=range(1, 9))
    parser.add_argument('--seed', type=int, default=2024)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO,
                        format='%(asctime)s [%(filename)s:%(lineno)s] %(message)s',
                        datefmt='%Y-%m-%d %H:%M:%S')
    HeapValidationExperiments(quick=args.quick, seed=args.seed).run_all_experiments(args.only)
