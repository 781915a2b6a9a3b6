"""
Heaping Lab - Metropolis-within-Gibbs Sampler
=============================================
Posterior sampling for the latent count model.

Each sweep refreshes the latent counts with a discretized-normal proposal
and a Metropolis-Hastings correction, moves the regression, dispersion,
regime and heaping blocks by adaptive Gaussian random walks, and draws
the variance components from their conjugate full conditionals.
"""

import json
import logging
import math
import multiprocessing
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import invgamma, invwishart, multivariate_normal, norm

from core.heap_engine import (DEFAULT_SOLVER, SolverConfig, dispersion_window,
                              window_logpmf, window_sample)
from core.heap_errors import DomainError, HeapError, NumericalError, SamplerAbort
from core.heap_model import (Hyperparams, ModelParams, ModelVariant, PanelData,
                             poisson_log_terms, report_loglik, state_predictor)
from core.heap_report import ReportingCache, gamma_ordered

logger = logging.getLogger(__name__)

DEFAULT_ORDER = ('x', 'alpha', 'beta', 'sigma_beta', 'theta_disp', 'gamma', 'omega', 'xi',
                 'sigma2_xi')
RANDOM_WALK_BLOCKS = ('alpha', 'beta', 'theta_disp', 'gamma', 'omega', 'xi')
# Below this the normal proposal has no width; latent moves fall back to +-1 steps
DEGENERATE_DISPERSION = 1e-8


# ============================================
# CONFIGURATION AND OUTPUT
# ============================================

@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 5
    seed: int = 0
    chains: int = 1
    adapt_window: int = 50
    step_sizes: Tuple[Tuple[str, float], ...] = (
        ('alpha', 0.05), ('beta', 0.5), ('theta_disp', 0.2),
        ('gamma', 0.1), ('omega', 0.2), ('xi', 0.5))
    proposal_inflation: float = 1.5
    proposal_width: float = 6.0
    proposal_dispersion: float = 1.0
    blocked_refresh: bool = True
    update_order: Tuple[str, ...] = DEFAULT_ORDER
    log_every: int = 1000
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise DomainError(f"Need iterations > burn_in >= 0, got {self.iterations} "
                              f"and {self.burn_in}")
        if self.thin < 1 or self.chains < 1 or self.adapt_window < 1:
            raise DomainError("thin, chains and adapt_window must be >= 1")
        steps = dict(self.step_sizes)
        if any(not s > 0 for s in steps.values()):
            raise DomainError(f"Step sizes must be positive, got {steps}")
        unknown = set(steps) - set(RANDOM_WALK_BLOCKS)
        if unknown:
            raise DomainError(f"Unknown step-size blocks: {sorted(unknown)}")
        if set(self.update_order) - set(DEFAULT_ORDER):
            raise DomainError(f"Unknown blocks in update_order: {self.update_order}")
        if not (self.proposal_inflation > 0 and self.proposal_width > 0
                and self.proposal_dispersion > 0):
            raise DomainError("Latent proposal settings must be positive")
        object.__setattr__(self, 'step_sizes', tuple(sorted(steps.items())))
        object.__setattr__(self, 'update_order', tuple(self.update_order))

    def step(self, block: str) -> float:
        return dict(self.step_sizes).get(block, 0.1)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out['step_sizes'] = dict(self.step_sizes)
        out['update_order'] = list(self.update_order)
        return out

    @classmethod
    def from_dict(cls, values: Dict) -> 'SamplerConfig':
        values = dict(values)
        if isinstance(values.get('step_sizes'), dict):
            base = dict(cls.step_sizes)
            base.update(values['step_sizes'])
            values['step_sizes'] = tuple(base.items())
        if 'update_order' in values:
            values['update_order'] = tuple(values['update_order'])
        return cls(**values)


@dataclass
class Chain:
    """Kept posterior samples with the sampler's bookkeeping."""
    variant: ModelVariant
    samples: List[ModelParams]
    iterations: List[int]
    acceptance: Dict[str, float]
    step_sizes: Dict[str, float]
    seed: int
    wall_time: float
    config: SamplerConfig = field(default_factory=SamplerConfig)

    def __len__(self) -> int:
        return len(self.samples)

    def draws(self, name: str) -> np.ndarray:
        """Stack one parameter over samples; first axis indexes samples."""
        values = [getattr(s, name) for s in self.samples]
        if any(v is None for v in values):
            raise DomainError(f"Parameter {name} is not sampled by variant {self.variant.value}")
        return np.stack([np.asarray(v) for v in values])

    def metadata(self) -> Dict:
        return {
            'variant': self.variant.value,
            'seed': int(self.seed),
            'samples': len(self.samples),
            'acceptance': self.acceptance,
            'step_sizes': self.step_sizes,
            'wall_time': self.wall_time,
            'config': self.config.to_dict(),
        }


def initial_gamma(n_grids: int) -> np.ndarray:
    """gamma_0 = 0.5 and gamma_j = -5 * 2^(j-1), regimes switching around x = 10, 20, 40, ..."""
    return np.array([0.5] + [-5.0 * 2 ** j for j in range(n_grids)])


# ============================================
# SAMPLER
# ============================================

class HeapSampler:
    """
    One Markov chain. The update methods change `state` in place and
    return it; a chain is a pure function of (data, hyper, variant, cfg).
    """

    def __init__(self, data: PanelData, hyper: Hyperparams, variant,
                 cfg: SamplerConfig = SamplerConfig(), solver: SolverConfig = DEFAULT_SOLVER,
                 init: Optional[ModelParams] = None):
        self.data = data
        self.hyper = hyper
        self.variant = ModelVariant.parse(variant)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.cache = ReportingCache(solver)
        self.heap_design = data.heap_design(self.variant)
        if self.variant.uses_omega and self.heap_design.shape[1] > len(hyper.sigma_omega):
            raise DomainError(f"Heaping design has {self.heap_design.shape[1]} columns but "
                              f"sigma_omega is {len(hyper.sigma_omega)}-dimensional")
        self.state = (init.copy() if init is not None else self.initial_state()).validate()
        self.log_scale = {b: math.log(cfg.step(b)) for b in RANDOM_WALK_BLOCKS}
        self._window = {b: [0, 0] for b in DEFAULT_ORDER}
        self._totals = {b: [0, 0] for b in DEFAULT_ORDER}
        self._adapt_rounds = 0
        self.iteration = 0
        self._updaters: Dict[str, Callable[[ModelParams], ModelParams]] = {
            'x': self._update_latent,
            'alpha': lambda s: self.update_block_mh(s, 'alpha'),
            'beta': lambda s: self.update_block_mh(s, 'beta'),
            'theta_disp': lambda s: self.update_block_mh(s, 'theta_disp'),
            'gamma': lambda s: self.update_block_mh(s, 'gamma'),
            'omega': lambda s: self.update_block_mh(s, 'omega'),
            'xi': lambda s: self.update_block_mh(s, 'xi'),
            'sigma_beta': self._update_sigma_beta,
            'sigma2_xi': self._update_sigma2_xi,
        }

    # ---- state ----

    def initial_state(self) -> ModelParams:
        data, v = self.data, self.variant
        log_y = np.log(data.y + 0.5)
        alpha, *_ = np.linalg.lstsq(data.W, log_y, rcond=None)
        state = ModelParams(alpha=alpha, beta=np.zeros((data.n_subjects, data.c)),
                            sigma_beta=np.eye(data.c), x=data.y.copy())
        if v.uses_theta_disp:
            state.theta_disp = 1.0
        if v.uses_gamma:
            state.gamma = initial_gamma(len(self.hyper.grids))
        if v.uses_omega:
            state.omega = np.zeros(self.heap_design.shape[1])
        if v.uses_xi:
            state.xi = np.zeros(data.n_subjects)
            state.sigma2_xi = 1.0
        return state

    def active_blocks(self) -> List[str]:
        v = self.variant
        uses = {
            'x': v.latent, 'alpha': True, 'beta': True, 'sigma_beta': True,
            'theta_disp': v.uses_theta_disp, 'gamma': v.uses_gamma,
            'omega': v.uses_omega, 'xi': v.uses_xi, 'sigma2_xi': v.uses_xi,
        }
        return [b for b in self.cfg.update_order if uses[b]]

    def _record(self, block: str, accepted: int, proposed: int):
        self._window[block][0] += accepted
        self._window[block][1] += proposed
        if self.iteration >= self.cfg.burn_in:
            self._totals[block][0] += accepted
            self._totals[block][1] += proposed

    def _report(self, state: ModelParams, x: Optional[np.ndarray] = None,
                obs: Optional[np.ndarray] = None) -> np.ndarray:
        y = self.data.y if obs is None else self.data.y[obs]
        x = state.x if x is None else x
        return report_loglik(self.variant, y, x, state, self.data, self.hyper.grids,
                             self.cache, obs)

    # ---- latent counts ----

    def _latent_proposal(self, state: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Proposed counts and log q(x | x') - log q(x' | x)."""
        theta = state.theta_disp if self.variant.uses_theta_disp else self.cfg.proposal_dispersion
        if theta < DEGENERATE_DISPERSION:
            step = self.rng.choice(np.array([-1, 1]), size=x.shape)
            return x + step, np.zeros(x.shape)
        inflation, width = self.cfg.proposal_inflation, self.cfg.proposal_width
        forward = dispersion_window(x, theta, inflation=inflation, width=width)
        proposal = window_sample(self.rng, forward)
        backward = dispersion_window(proposal, theta, inflation=inflation, width=width)
        return proposal, window_logpmf(x, backward) - window_logpmf(proposal, forward)

    def _latent_mh(self, state: ModelParams, obs: np.ndarray) -> int:
        x = state.x[obs]
        proposal, log_q = self._latent_proposal(state, x)
        valid = proposal >= 0
        safe = np.where(valid, proposal, x)
        lin = state_predictor(state, self.data)[obs]
        current = self._report(state, x, obs) + poisson_log_terms(x, lin)
        moved = self._report(state, safe, obs) + poisson_log_terms(safe, lin)
        log_ratio = np.where(valid, moved - current + log_q, -np.inf)
        accept = np.log(self.rng.random(len(obs))) < log_ratio
        state.x[obs] = np.where(accept, safe, x)
        return int(accept.sum())

    def update_latent_count(self, state: ModelParams, n: int) -> ModelParams:
        """Single-site MH move for observation n."""
        accepted = self._latent_mh(state, np.array([n]))
        self._record('x', accepted, 1)
        return state

    def refresh_latent_counts(self, state: ModelParams) -> ModelParams:
        """
        Move every latent count once. Counts are conditionally independent
        given the parameters, so the blocked mode proposes all at once.
        """
        if self.cfg.blocked_refresh:
            obs = np.arange(self.data.n_obs)
            self._record('x', self._latent_mh(state, obs), len(obs))
        else:
            for n in range(self.data.n_obs):
                self.update_latent_count(state, n)
        return state

    def _update_latent(self, state: ModelParams) -> ModelParams:
        return self.refresh_latent_counts(state)

    # ---- random-walk blocks ----

    def _accept(self, log_ratio) -> np.ndarray:
        log_ratio = np.nan_to_num(np.asarray(log_ratio, dtype=float), nan=-np.inf)
        return np.log(self.rng.random(log_ratio.shape)) < log_ratio

    def _step(self, block: str, shape) -> np.ndarray:
        return math.exp(self.log_scale[block]) * self.rng.standard_normal(shape)

    def update_block_mh(self, state: ModelParams, block: str) -> ModelParams:
        """
        Gaussian random-walk MH on one parameter block. theta_disp moves on
        the log scale; gamma proposals leaving the ordered region are rejected.
        """
        handler = {
            'alpha': self._move_alpha, 'beta': self._move_beta,
            'theta_disp': self._move_theta_disp, 'gamma': self._move_gamma,
            'omega': self._move_omega, 'xi': self._move_xi,
        }.get(block)
        if handler is None:
            raise DomainError(f"No random-walk update for block {block}")
        handler(state)
        return state

    def _latent_x(self, state: ModelParams) -> np.ndarray:
        return state.x if self.variant.latent else self.data.y

    def _move_alpha(self, state: ModelParams):
        data, hyper = self.data, self.hyper
        x = self._latent_x(state)
        lin = state_predictor(state, data)
        proposal = state.alpha + self._step('alpha', state.alpha.shape)
        lin_new = lin + data.W @ (proposal - state.alpha)
        prior = multivariate_normal(np.zeros(len(proposal)), hyper.v_alpha)
        log_ratio = (poisson_log_terms(x, lin_new).sum() + prior.logpdf(proposal)
                     - poisson_log_terms(x, lin).sum() - prior.logpdf(state.alpha))
        accepted = bool(self._accept(log_ratio))
        if accepted:
            state.alpha = proposal
        self._record('alpha', int(accepted), 1)

    def _beta_logdensity(self, beta: np.ndarray, sigma_beta: np.ndarray) -> np.ndarray:
        if beta.shape[1] == 1:
            return norm(0.0, math.sqrt(sigma_beta[0, 0])).logpdf(beta[:, 0])
        return np.atleast_1d(multivariate_normal(np.zeros(beta.shape[1]), sigma_beta).logpdf(beta))

    def _move_beta(self, state: ModelParams):
        data = self.data
        x = self._latent_x(state)
        lin = state_predictor(state, data)
        proposal = state.beta + self._step('beta', state.beta.shape)
        shift = np.sum(data.Z * (proposal - state.beta)[data.subject], axis=1)
        current = data.subject_sum(poisson_log_terms(x, lin)) + \
            self._beta_logdensity(state.beta, state.sigma_beta)
        moved = data.subject_sum(poisson_log_terms(x, lin + shift)) + \
            self._beta_logdensity(proposal, state.sigma_beta)
        accept = self._accept(moved - current)
        state.beta = np.where(accept[:, None], proposal, state.beta)
        self._record('beta', int(accept.sum()), data.n_subjects)

    def _move_theta_disp(self, state: ModelParams):
        hyper = self.hyper
        prior = invgamma(hyper.theta_shape, scale=hyper.theta_rate)
        log_theta = math.log(state.theta_disp)
        log_new = log_theta + float(self._step('theta_disp', ()))
        candidate = replace(state, theta_disp=math.exp(log_new))
        # log_theta terms are the Jacobian of the log transform
        log_ratio = (self._report(candidate).sum() + prior.logpdf(candidate.theta_disp) + log_new
                     - self._report(state).sum() - prior.logpdf(state.theta_disp) - log_theta)
        accepted = bool(self._accept(log_ratio))
        if accepted:
            state.theta_disp = candidate.theta_disp
        self._record('theta_disp', int(accepted), 1)

    def _move_gamma(self, state: ModelParams):
        proposal = state.gamma + self._step('gamma', state.gamma.shape)
        accepted = False
        if gamma_ordered(proposal):
            prior = multivariate_normal(np.zeros(len(proposal)), self.hyper.v_gamma)
            candidate = replace(state, gamma=proposal)
            log_ratio = (self._report(candidate).sum() + prior.logpdf(proposal)
                         - self._report(state).sum() - prior.logpdf(state.gamma))
            accepted = bool(self._accept(log_ratio))
        if accepted:
            state.gamma = proposal
        self._record('gamma', int(accepted), 1)

    def _move_omega(self, state: ModelParams):
        proposal = state.omega + self._step('omega', state.omega.shape)
        k = len(proposal)
        prior = multivariate_normal(np.zeros(k), self.hyper.sigma_omega[:k, :k])
        candidate = replace(state, omega=proposal)
        log_ratio = (self._report(candidate).sum() + prior.logpdf(proposal)
                     - self._report(state).sum() - prior.logpdf(state.omega))
        accepted = bool(self._accept(log_ratio))
        if accepted:
            state.omega = proposal
        self._record('omega', int(accepted), 1)

    def _move_xi(self, state: ModelParams):
        data = self.data
        proposal = state.xi + self._step('xi', state.xi.shape)
        candidate = replace(state, xi=proposal)
        random_effect = norm(0.0, math.sqrt(state.sigma2_xi))
        current = data.subject_sum(self._report(state)) + random_effect.logpdf(state.xi)
        moved = data.subject_sum(self._report(candidate)) + random_effect.logpdf(proposal)
        accept = self._accept(moved - current)
        state.xi = np.where(accept, proposal, state.xi)
        self._record('xi', int(accept.sum()), data.n_subjects)

    # ---- conjugate variance draws ----

    def _update_sigma_beta(self, state: ModelParams) -> ModelParams:
        hyper, beta = self.hyper, state.beta
        n = len(beta)
        if beta.shape[1] == 1:
            shape = hyper.a_beta + n / 2.0
            rate = hyper.m_beta[0, 0] + 0.5 * float(beta[:, 0] @ beta[:, 0])
            draw = invgamma.rvs(shape, scale=rate, random_state=self.rng)
            state.sigma_beta = np.array([[draw]])
        else:
            scale = hyper.m_beta + beta.T @ beta
            try:
                np.linalg.cholesky(scale)
            except np.linalg.LinAlgError:
                raise NumericalError("Inverse-Wishart scale matrix is not positive definite") from None
            draw = np.atleast_2d(invwishart.rvs(df=hyper.a_beta + n, scale=scale,
                                                random_state=self.rng))
            state.sigma_beta = 0.5 * (draw + draw.T)
        return state

    def _update_sigma2_xi(self, state: ModelParams) -> ModelParams:
        shape, rate = sigma2_xi_conditional(state.xi, self.hyper)
        state.sigma2_xi = float(invgamma.rvs(shape, scale=rate, random_state=self.rng))
        return state

    def update_variances(self, state: ModelParams) -> ModelParams:
        """Conjugate draws of Sigma_beta and, for subject heaping, sigma2_xi."""
        self._update_sigma_beta(state)
        if self.variant.uses_xi:
            self._update_sigma2_xi(state)
        return state

    # ---- driver ----

    def _adapt(self):
        """Robbins-Monro step on log scales toward 0.44 (scalar) or 0.234 (vector) acceptance."""
        self._adapt_rounds += 1
        delta = min(0.1, 1.0 / math.sqrt(self._adapt_rounds))
        for block in RANDOM_WALK_BLOCKS:
            accepted, proposed = self._window[block]
            if proposed == 0:
                continue
            target = 0.44 if self._block_dim(block) == 1 else 0.234
            self.log_scale[block] += delta if accepted / proposed > target else -delta
        self._window = {b: [0, 0] for b in DEFAULT_ORDER}

    def _block_dim(self, block: str) -> int:
        s = self.state
        return {
            'alpha': len(s.alpha), 'beta': s.beta.shape[1], 'theta_disp': 1,
            'gamma': 0 if s.gamma is None else len(s.gamma),
            'omega': 0 if s.omega is None else len(s.omega), 'xi': 1,
        }[block]

    def dump_state(self, state: ModelParams, block: str, error: Exception) -> str:
        folder = self.cfg.dump_dir or tempfile.gettempdir()
        os.makedirs(folder, exist_ok=True)
        path = os.path.join(folder, f"heaplab-abort-seed{self.cfg.seed}-it{self.iteration}.json")
        with open(path, 'w') as fh:
            json.dump({
                'block': block,
                'iteration': self.iteration,
                'error': f"{type(error).__name__}: {error}",
                'variant': self.variant.value,
                'log_scale': self.log_scale,
                'state': state.to_record(),
            }, fh, indent=2, default=float)
        return path

    def sweep(self, state: ModelParams) -> ModelParams:
        for block in self.active_blocks():
            try:
                self._updaters[block](state)
            except (HeapError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                path = self.dump_state(state, block, exc)
                logger.error("Block %s failed at iteration %d: %s", block, self.iteration, exc)
                raise SamplerAbort(f"{block} update failed at iteration {self.iteration}: {exc}",
                                   path) from exc
        return state

    def acceptance_rates(self) -> Dict[str, float]:
        return {b: (acc / n if n else float('nan'))
                for b, (acc, n) in self._totals.items() if b in self.active_blocks() and n}

    def run(self) -> Chain:
        cfg = self.cfg
        state = self.state
        samples, kept = [], []
        started = time.perf_counter()
        for it in range(cfg.iterations):
            self.iteration = it
            self.sweep(state)
            if it < cfg.burn_in and (it + 1) % cfg.adapt_window == 0:
                self._adapt()
            if it + 1 == cfg.burn_in:
                logger.info("Adaptation frozen after %d iterations; steps %s", it + 1,
                            {b: round(math.exp(s), 4) for b, s in self.log_scale.items()})
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                samples.append(state.copy())
                kept.append(it)
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                logger.info("Iteration %d/%d (seed %d) cache %s", it + 1, cfg.iterations,
                            cfg.seed, self.cache.stats())
        elapsed = time.perf_counter() - started
        return Chain(variant=self.variant, samples=samples, iterations=kept,
                     acceptance=self.acceptance_rates(),
                     step_sizes={b: math.exp(s) for b, s in self.log_scale.items()},
                     seed=cfg.seed, wall_time=elapsed, config=cfg)


def sigma2_xi_conditional(xi: np.ndarray, hyper: Hyperparams) -> Tuple[float, float]:
    """Shape and rate of the inverse-gamma full conditional of sigma2_xi."""
    xi = np.asarray(xi, dtype=float)
    return hyper.xi_shape + len(xi) / 2.0, hyper.xi_rate + 0.5 * float(xi @ xi)


# ============================================
# ENTRY POINTS
# ============================================

def run_mcmc(data: PanelData, hyper: Hyperparams, variant, cfg: SamplerConfig = SamplerConfig(),
             solver: SolverConfig = DEFAULT_SOLVER, init: Optional[ModelParams] = None) -> Chain:
    variant = ModelVariant.parse(variant)
    logger.info("Running %s: %d iterations, burn-in %d, thin %d, seed %d", variant.value,
                cfg.iterations, cfg.burn_in, cfg.thin, cfg.seed)
    return HeapSampler(data, hyper, variant, cfg, solver, init).run()


def worker_limit() -> int:
    """Worker processes allowed: HEAPLAB_THREADS if set, else the CPU count."""
    raw = os.environ.get('HEAPLAB_THREADS')
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise DomainError(f"HEAPLAB_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def chain_seeds(seed: int, chains: int) -> List[int]:
    """Independent per-chain seeds spawned from one SeedSequence."""
    if chains == 1:
        return [seed]
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(chains)]


def _chain_worker(args) -> Chain:
    data, hyper, variant, cfg, solver = args
    return run_mcmc(data, hyper, variant, cfg, solver)


def run_chains(data: PanelData, hyper: Hyperparams, variant, cfg: SamplerConfig = SamplerConfig(),
               solver: SolverConfig = DEFAULT_SOLVER, processes: Optional[int] = None) -> List[Chain]:
    """cfg.chains independent chains, in parallel worker processes when allowed."""
    jobs = [(data, hyper, ModelVariant.parse(variant), replace(cfg, seed=s, chains=1), solver)
            for s in chain_seeds(cfg.seed, cfg.chains)]
    processes = min(len(jobs), processes or worker_limit())
    if processes <= 1:
        return [_chain_worker(job) for job in jobs]
    with multiprocessing.Pool(processes) as pool:
        return pool.map(_chain_worker, jobs)
