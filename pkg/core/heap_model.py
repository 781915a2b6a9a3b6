"""
Heaping Lab - Latent Count Model
================================
Hierarchical Poisson GLMM for latent true counts X_it observed through a
reporting mechanism:

    Y_it | X_it      ~ g(. | X_it; theta_disp, theta_heap_i, gamma)
    X_it             ~ Poisson(eta_it),  log eta_it = W_it alpha + Z_it beta_i
    beta_i           ~ Normal(0, Sigma_beta)
    log theta_heap_i = H_i omega + xi_i,  xi_i ~ Normal(0, sigma2_xi)

Six model variants share this code; ModelVariant says which parameter
blocks each one carries.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln
from scipy.stats import invgamma, invwishart, multivariate_normal, norm

from core.heap_errors import DomainError, NumericalError
from core.heap_report import (DEFAULT_GRIDS, ReportingCache, gamma_ordered,
                              regime_weight_matrix)

logger = logging.getLogger(__name__)

MAX_LINEAR_PREDICTOR = 700.0


# ============================================
# MODEL VARIANTS
# ============================================

class ModelVariant(str, Enum):
    NO_HEAPING = 'no-heaping'
    WH08 = 'wh08'
    DISPERSION_ONLY = 'dispersion-only'
    HEAPING = 'heaping'
    SUBJECT_HEAPING = 'subject-heaping'
    SUBJECT_HEAPING_COV = 'subject-heaping-cov'

    @classmethod
    def parse(cls, name) -> 'ModelVariant':
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            raise DomainError(f"Unknown model variant: {name}. "
                              f"Choose from {[v.value for v in cls]}") from None

    @property
    def latent(self) -> bool:
        return self is not ModelVariant.NO_HEAPING

    @property
    def uses_theta_disp(self) -> bool:
        return self not in (ModelVariant.NO_HEAPING, ModelVariant.WH08)

    @property
    def uses_gamma(self) -> bool:
        return self not in (ModelVariant.NO_HEAPING, ModelVariant.DISPERSION_ONLY)

    @property
    def uses_omega(self) -> bool:
        return self in (ModelVariant.HEAPING, ModelVariant.SUBJECT_HEAPING,
                        ModelVariant.SUBJECT_HEAPING_COV)

    @property
    def uses_xi(self) -> bool:
        return self in (ModelVariant.SUBJECT_HEAPING, ModelVariant.SUBJECT_HEAPING_COV)

    @property
    def focus(self) -> Tuple[str, ...]:
        """Parameters the DIC conditions on for this variant."""
        return {
            ModelVariant.NO_HEAPING: ('alpha', 'beta'),
            ModelVariant.WH08: ('x', 'gamma'),
            ModelVariant.DISPERSION_ONLY: ('x', 'theta_disp'),
            ModelVariant.HEAPING: ('x', 'theta_disp', 'omega', 'gamma'),
            ModelVariant.SUBJECT_HEAPING: ('x', 'theta_disp', 'omega', 'gamma', 'sigma2_xi'),
            ModelVariant.SUBJECT_HEAPING_COV: ('x', 'theta_disp', 'omega', 'gamma', 'sigma2_xi'),
        }[self]


# ============================================
# DATA, PARAMETERS, HYPERPARAMETERS
# ============================================

@dataclass(eq=False)
class PanelData:
    """
    Longitudinal reports. Observation arrays have one row per (subject,
    timepoint); `subject` holds codes 0..N-1 into `subject_ids`, and H has
    one row per subject.
    """
    subject: np.ndarray
    time: np.ndarray
    y: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    subject_ids: np.ndarray
    w_names: List[str] = field(default_factory=lambda: ['intercept'])
    z_names: List[str] = field(default_factory=lambda: ['intercept'])
    h_names: List[str] = field(default_factory=lambda: ['intercept'])

    def __post_init__(self):
        n = len(self.y)
        if n == 0:
            raise DomainError("Panel has no observations")
        self.y = np.asarray(self.y, dtype=int)
        self.subject = np.asarray(self.subject, dtype=int)
        self.time = np.asarray(self.time, dtype=int)
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if np.any(self.y < 0):
            raise DomainError("Reported counts must be nonnegative")
        for name in ('subject', 'time', 'W', 'Z'):
            if len(getattr(self, name)) != n:
                raise DomainError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        n_subjects = len(self.subject_ids)
        if self.subject.min() < 0 or self.subject.max() >= n_subjects:
            raise DomainError("Subject codes out of range")
        if np.any(np.bincount(self.subject, minlength=n_subjects) == 0):
            raise DomainError("Every subject needs at least one observation")
        if len(self.H) != n_subjects:
            raise DomainError(f"H has {len(self.H)} rows, expected one per subject ({n_subjects})")

    @classmethod
    def from_arrays(cls, subject_ids, time, y, W=None, Z=None, H=None, **names) -> 'PanelData':
        """Build from raw per-observation labels; W, Z, H default to intercepts."""
        labels, codes = np.unique(np.asarray(subject_ids), return_inverse=True)
        n = len(codes)
        W = np.ones((n, 1)) if W is None else W
        Z = np.ones((n, 1)) if Z is None else Z
        H = np.ones((len(labels), 1)) if H is None else H
        return cls(subject=codes, time=np.asarray(time), y=np.asarray(y), W=W, Z=Z, H=H,
                   subject_ids=labels, **names)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def c(self) -> int:
        return self.Z.shape[1]

    @property
    def h(self) -> int:
        return self.H.shape[1]

    def heap_design(self, variant: ModelVariant) -> np.ndarray:
        """H_i rows used by a variant: intercept only unless heaping covariates are on."""
        if variant is ModelVariant.SUBJECT_HEAPING_COV:
            return self.H
        return np.ones((self.n_subjects, 1))

    def subject_sum(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.subject, weights=values, minlength=self.n_subjects)


@dataclass(eq=False)
class ModelParams:
    """One MCMC state. Blocks a variant does not use stay None."""
    alpha: np.ndarray
    beta: np.ndarray
    sigma_beta: np.ndarray
    x: np.ndarray
    theta_disp: Optional[float] = None
    omega: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    sigma2_xi: Optional[float] = None
    gamma: Optional[np.ndarray] = None

    def copy(self) -> 'ModelParams':
        def dup(v):
            return v.copy() if isinstance(v, np.ndarray) else v
        return ModelParams(**{k: dup(v) for k, v in vars(self).items()})

    def validate(self):
        if np.any(self.x < 0):
            raise DomainError("Latent counts must be nonnegative")
        if self.theta_disp is not None and not self.theta_disp > 0:
            raise DomainError(f"theta_disp must be positive, got {self.theta_disp}")
        if self.sigma2_xi is not None and not self.sigma2_xi > 0:
            raise DomainError(f"sigma2_xi must be positive, got {self.sigma2_xi}")
        if self.gamma is not None and not gamma_ordered(self.gamma):
            raise DomainError(f"gamma ordering violated: {self.gamma}")
        sb = np.atleast_2d(self.sigma_beta)
        if not np.allclose(sb, sb.T):
            raise DomainError("Sigma_beta must be symmetric")
        try:
            np.linalg.cholesky(sb)
        except np.linalg.LinAlgError:
            raise DomainError("Sigma_beta must be positive definite") from None
        return self

    def to_record(self) -> Dict:
        """JSON-ready dict; arrays become lists."""
        record = {}
        for k, v in vars(self).items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, np.generic):
                v = v.item()
            record[k] = v
        return record

    @classmethod
    def from_record(cls, record: Dict) -> 'ModelParams':
        values = dict(record)
        for k in ('alpha', 'beta', 'sigma_beta', 'omega', 'xi', 'gamma'):
            if values.get(k) is not None:
                values[k] = np.asarray(values[k], dtype=float)
        values['x'] = np.asarray(values['x'], dtype=int)
        return cls(**values)


@dataclass(frozen=True, eq=False)
class Hyperparams:
    """
    Prior settings. grids fixes the heaping grids m_1..m_J of the model,
    so len(grids) + 1 regime parameters are sampled.
    """
    v_alpha: np.ndarray
    theta_shape: float
    theta_rate: float
    sigma_omega: np.ndarray
    v_gamma: np.ndarray
    a_beta: float
    m_beta: np.ndarray
    xi_shape: float = 0.001
    xi_rate: float = 0.001
    grids: Tuple[int, ...] = DEFAULT_GRIDS

    def __post_init__(self):
        for name in ('v_alpha', 'sigma_omega', 'v_gamma', 'm_beta'):
            mat = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise DomainError(f"Hyperparameter {name} must be positive definite") from None
            object.__setattr__(self, name, mat)
        for name in ('theta_shape', 'theta_rate', 'a_beta', 'xi_shape', 'xi_rate'):
            if not getattr(self, name) > 0:
                raise DomainError(f"Hyperparameter {name} must be positive")
        if len(self.v_gamma) != len(self.grids) + 1:
            raise DomainError(f"v_gamma is {len(self.v_gamma)}x{len(self.v_gamma)}, "
                              f"expected {len(self.grids) + 1} for grids {self.grids}")
        c = len(self.m_beta)
        if c > 1 and self.a_beta <= c - 1:
            raise DomainError(f"Inverse-Wishart needs a_beta > {c - 1}, got {self.a_beta}")
        object.__setattr__(self, 'grids', tuple(int(m) for m in self.grids))

    @classmethod
    def default(cls, d: int = 1, c: int = 1, h: int = 1,
                grids: Sequence[int] = DEFAULT_GRIDS) -> 'Hyperparams':
        """Diffuse defaults: V_alpha = 10 I, IG(0.001, 0.001), sigma2_gamma = 100, A_beta = 4, m_beta = 5."""
        J = len(grids)
        return cls(v_alpha=10.0 * np.eye(d), theta_shape=0.001, theta_rate=0.001,
                   sigma_omega=10.0 * np.eye(h), v_gamma=100.0 * np.eye(J + 1),
                   a_beta=4.0 + max(c - 1, 0), m_beta=5.0 * np.eye(c), grids=tuple(grids))

    def to_dict(self) -> Dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_dict(cls, values: Dict) -> 'Hyperparams':
        values = dict(values)
        if 'grids' in values:
            values['grids'] = tuple(values['grids'])
        return cls(**values)


# ============================================
# LINEAR PREDICTORS
# ============================================

def _checked_exp(lin: np.ndarray, what: str) -> np.ndarray:
    if np.any(lin > MAX_LINEAR_PREDICTOR):
        raise NumericalError(f"{what} linear predictor {np.max(lin):.1f} overflows")
    return np.exp(lin)


def linear_predictor(W: np.ndarray, Z: np.ndarray, alpha: np.ndarray,
                     beta_rows: np.ndarray) -> np.ndarray:
    """W_it alpha + Z_it beta_i for aligned observation rows."""
    W = np.atleast_2d(W)
    Z = np.atleast_2d(Z)
    if W.shape[1] != len(alpha) or Z.shape[-1] != np.shape(beta_rows)[-1]:
        raise DomainError(f"Dimension mismatch: W {W.shape} vs alpha {np.shape(alpha)}, "
                          f"Z {Z.shape} vs beta {np.shape(beta_rows)}")
    return W @ alpha + np.sum(Z * beta_rows, axis=-1)


def latent_intensity(W, Z, alpha, beta_i) -> np.ndarray:
    """eta = exp(W alpha + Z beta_i)."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta_i = np.atleast_1d(np.asarray(beta_i, dtype=float))
    lin = linear_predictor(np.atleast_2d(W), np.atleast_2d(Z), alpha, beta_i)
    eta = _checked_exp(lin, "Latent intensity")
    return eta if np.ndim(W) > 1 else float(eta[0])


def subject_heap_intensity(H, omega, xi) -> np.ndarray:
    """theta_heap_i = exp(H_i omega + xi_i)."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if H.shape[1] != len(omega):
        raise DomainError(f"Dimension mismatch: H {H.shape} vs omega {omega.shape}")
    theta = _checked_exp(H @ omega + np.asarray(xi, dtype=float), "Heaping intensity")
    return theta if theta.size > 1 else float(theta.ravel()[0])


def poisson_log_terms(x: np.ndarray, lin: np.ndarray) -> np.ndarray:
    """log Poisson(x; exp(lin)); -inf where the predictor overflows."""
    with np.errstate(over='ignore'):
        eta = np.exp(np.minimum(lin, MAX_LINEAR_PREDICTOR))
    terms = x * lin - eta - gammaln(x + 1)
    return np.where(lin > MAX_LINEAR_PREDICTOR, -np.inf, terms)


def state_predictor(params: ModelParams, data: PanelData) -> np.ndarray:
    return linear_predictor(data.W, data.Z, params.alpha, params.beta[data.subject])


def heap_intensities(params: ModelParams, data: PanelData, variant: ModelVariant) -> np.ndarray:
    """theta_heap per subject; zeros for variants without BDP heaping."""
    if not variant.uses_omega:
        return np.zeros(data.n_subjects)
    lin = data.heap_design(variant) @ params.omega
    if variant.uses_xi:
        lin = lin + params.xi
    with np.errstate(over='ignore'):
        return np.exp(np.minimum(lin, MAX_LINEAR_PREDICTOR))


# ============================================
# REPORTING LIKELIHOOD
# ============================================

def wh08_round(x, m: int):
    """Nearest multiple of m, exact midpoints rounded up."""
    x = np.asarray(x, dtype=int)
    out = (2 * x + m) // (2 * m) * m
    return int(out) if out.ndim == 0 else out


def wh08_report(x: int, gamma: Sequence[float], grids: Sequence[int] = DEFAULT_GRIDS,
                rng: Optional[np.random.Generator] = None, regime: Optional[int] = None) -> int:
    """
    One report under deterministic rounding: draw a regime j from the
    proportional-odds weights, then report x (j = 0) or x rounded to the
    nearest multiple of m_j. Passing `regime` skips the draw.
    """
    if regime is None:
        rng = rng if rng is not None else np.random.default_rng()
        v = regime_weight_matrix(gamma, [x])[0]
        regime = int(rng.choice(len(v), p=v / v.sum()))
    if regime == 0:
        return int(x)
    return wh08_round(x, grids[regime - 1])


def wh08_log_prob(y: np.ndarray, x: np.ndarray, gamma: Sequence[float],
                  grids: Sequence[int]) -> np.ndarray:
    """log sum_j v_j(x) [round_j(x) == y] with round_0 the identity."""
    y = np.asarray(y, dtype=int)
    x = np.asarray(x, dtype=int)
    v = regime_weight_matrix(gamma, x)
    prob = v[:, 0] * (x == y)
    for j, m in enumerate(grids, start=1):
        prob = prob + v[:, j] * (wh08_round(x, m) == y)
    with np.errstate(divide='ignore'):
        return np.log(prob)


def report_loglik(variant: ModelVariant, y: np.ndarray, x: np.ndarray, params: ModelParams,
                  data: PanelData, grids: Sequence[int] = DEFAULT_GRIDS,
                  cache: Optional[ReportingCache] = None,
                  obs: Optional[np.ndarray] = None) -> np.ndarray:
    """
    log g(y | x) per observation under a variant's reporting mechanism.

    `obs` selects which observations y and x belong to (default: all), so
    subject-level heaping intensities line up.
    """
    y = np.asarray(y, dtype=int)
    x = np.asarray(x, dtype=int)
    if variant is ModelVariant.NO_HEAPING:
        return np.where(x == y, 0.0, -np.inf)
    if variant is ModelVariant.WH08:
        return wh08_log_prob(y, x, params.gamma, grids)
    cache = cache if cache is not None else ReportingCache()
    if variant is ModelVariant.DISPERSION_ONLY:
        return cache.log_g(y, x, params.theta_disp, 0.0, (1.0,), ())
    subjects = data.subject if obs is None else data.subject[obs]
    theta_heap = heap_intensities(params, data, variant)[subjects]
    return cache.log_g(y, x, params.theta_disp, theta_heap, params.gamma, grids)


# ============================================
# PRIORS AND JOINT DENSITY
# ============================================

def _mvn_logpdf(value, cov) -> float:
    value = np.atleast_1d(value)
    return float(multivariate_normal(np.zeros(len(value)), cov).logpdf(value))


def sigma_beta_logprior(sigma_beta: np.ndarray, hyper: Hyperparams) -> float:
    sigma_beta = np.atleast_2d(sigma_beta)
    if len(sigma_beta) == 1:
        return float(invgamma(hyper.a_beta, scale=hyper.m_beta[0, 0]).logpdf(sigma_beta[0, 0]))
    return float(invwishart(df=hyper.a_beta, scale=hyper.m_beta).logpdf(sigma_beta))


def log_prior(params: ModelParams, hyper: Hyperparams,
              variant: ModelVariant = ModelVariant.SUBJECT_HEAPING_COV) -> float:
    """Sum of log priors over the blocks the variant uses; -inf outside the support."""
    variant = ModelVariant.parse(variant)
    total = _mvn_logpdf(params.alpha, hyper.v_alpha)
    total += sigma_beta_logprior(params.sigma_beta, hyper)
    if variant.uses_theta_disp:
        if not params.theta_disp > 0:
            return -np.inf
        total += float(invgamma(hyper.theta_shape, scale=hyper.theta_rate).logpdf(params.theta_disp))
    if variant.uses_gamma:
        if not gamma_ordered(params.gamma):
            return -np.inf
        total += _mvn_logpdf(params.gamma, hyper.v_gamma)
    if variant.uses_omega:
        cov = hyper.sigma_omega[:len(params.omega), :len(params.omega)]
        total += _mvn_logpdf(params.omega, cov)
    if variant.uses_xi:
        if not params.sigma2_xi > 0:
            return -np.inf
        total += float(invgamma(hyper.xi_shape, scale=hyper.xi_rate).logpdf(params.sigma2_xi))
    return total


def random_effect_logdensity(params: ModelParams, variant: ModelVariant) -> float:
    """log N(beta_i; 0, Sigma_beta) summed over subjects, plus log N(xi_i; 0, sigma2_xi)."""
    c = params.beta.shape[1]
    total = float(multivariate_normal(np.zeros(c), np.atleast_2d(params.sigma_beta))
                  .logpdf(params.beta).sum()) if c > 1 else \
        float(norm(0.0, np.sqrt(params.sigma_beta[0, 0])).logpdf(params.beta[:, 0]).sum())
    if variant.uses_xi:
        total += float(norm(0.0, np.sqrt(params.sigma2_xi)).logpdf(params.xi).sum())
    return total


def log_joint(params: ModelParams, data: PanelData, hyper: Hyperparams,
              variant: ModelVariant = ModelVariant.HEAPING,
              cache: Optional[ReportingCache] = None) -> float:
    """
    Unnormalized log posterior: reporting terms + Poisson latent terms +
    random-effect densities + priors.
    """
    variant = ModelVariant.parse(variant)
    if params.beta.shape != (data.n_subjects, data.c):
        raise DomainError(f"beta has shape {params.beta.shape}, expected "
                          f"{(data.n_subjects, data.c)}")
    if len(params.x) != data.n_obs:
        raise DomainError(f"x has {len(params.x)} entries, expected {data.n_obs}")
    if variant.uses_omega and len(params.omega) != data.heap_design(variant).shape[1]:
        raise DomainError(f"omega has {len(params.omega)} entries for variant {variant.value}")
    prior = log_prior(params, hyper, variant)
    if not np.isfinite(prior):
        return -np.inf
    x = data.y if variant is ModelVariant.NO_HEAPING else params.x
    report = report_loglik(variant, data.y, x, params, data, hyper.grids, cache).sum()
    latent = poisson_log_terms(x, state_predictor(params, data)).sum()
    return float(report + latent + random_effect_logdensity(params, variant) + prior)
