"""
Heaping Lab - Fit Statistics
============================
DIC, sum of squared prediction errors (SSPE), posterior summaries and
the tables exported for external plotting and convergence tooling.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from core.heap_errors import DomainError
from core.heap_model import (ModelParams, ModelVariant, PanelData, heap_intensities,
                             poisson_log_terms, report_loglik, state_predictor,
                             wh08_round)
from core.heap_report import DEFAULT_GRIDS, ReportingCache, regime_weight_matrix
from core.heap_datagen import draw_from_rows
from core.heap_sampler import Chain

logger = logging.getLogger(__name__)

QUANTILES = (0.025, 0.975)


# ============================================
# REPORT TYPE
# ============================================

@dataclass
class FitReport:
    variant: str
    dic: Optional[float] = None
    p_d: Optional[float] = None
    sspe: Optional[float] = None
    parameters: Dict[str, Dict[str, float]] = field(default_factory=dict)
    midpoints: Dict[str, Dict[str, float]] = field(default_factory=dict)
    acceptance: Dict[str, float] = field(default_factory=dict)
    samples: int = 0

    def __post_init__(self):
        if self.sspe is not None and self.sspe < 0:
            raise DomainError(f"SSPE must be nonnegative, got {self.sspe}")

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=float)
        if path:
            with open(path, 'w') as fh:
                fh.write(text)
        return text

    def table(self) -> str:
        lines = ["=" * 60, f"FIT REPORT: {self.variant} ({self.samples} samples)", "=" * 60]
        if self.dic is not None:
            lines.append(f"  DIC  {self.dic:12.2f}   (p_D {self.p_d:.2f})")
        if self.sspe is not None:
            lines.append(f"  SSPE {self.sspe:12.2f}")
        lines.append(f"\n  {'parameter':<16}{'mean':>10}{'2.5%':>10}{'97.5%':>10}")
        for name, row in list(self.parameters.items()) + list(self.midpoints.items()):
            lines.append(f"  {name:<16}{row['mean']:>10.3f}{row['q025']:>10.3f}{row['q975']:>10.3f}")
        if self.acceptance:
            lines.append("\n  acceptance: " + ", ".join(f"{k}={v:.2f}" for k, v in self.acceptance.items()))
        return "\n".join(lines)


# ============================================
# DEVIANCE AND DIC
# ============================================

def _subject_marginal(params: ModelParams, data: PanelData, variant: ModelVariant,
                      grids: Sequence[int], cache: ReportingCache, nodes: int) -> float:
    """
    sum_i log integral prod_t g(Y_it | X_it; theta_heap_i(xi)) N(xi; 0, sigma2_xi) dxi
    by Gauss-Hermite quadrature over xi.
    """
    z, w = hermegauss(nodes)
    log_w = np.log(w) - 0.5 * np.log(2.0 * np.pi)
    base = data.heap_design(variant) @ params.omega
    sd = np.sqrt(params.sigma2_xi)
    per_node = np.empty((nodes, data.n_subjects))
    for k in range(nodes):
        theta_heap = np.exp(np.minimum(base + sd * z[k], 700.0))[data.subject]
        log_g = cache.log_g(data.y, params.x, params.theta_disp, theta_heap, params.gamma, grids)
        per_node[k] = data.subject_sum(log_g) + log_w[k]
    return float(logsumexp(per_node, axis=0).sum())


def deviance(params: ModelParams, data: PanelData, variant,
             grids: Sequence[int] = DEFAULT_GRIDS, cache: Optional[ReportingCache] = None,
             quadrature_nodes: int = 7) -> float:
    """-2 log p(Y | focus parameters of the variant)."""
    variant = ModelVariant.parse(variant)
    cache = cache if cache is not None else ReportingCache()
    if variant is ModelVariant.NO_HEAPING:
        loglik = poisson_log_terms(data.y, state_predictor(params, data)).sum()
    elif variant.uses_xi:
        loglik = _subject_marginal(params, data, variant, grids, cache, quadrature_nodes)
    else:
        loglik = report_loglik(variant, data.y, params.x, params, data, grids, cache).sum()
    return float(-2.0 * loglik)


def _posterior_mode(draws: np.ndarray) -> np.ndarray:
    """Per-column mode of integer draws; ties go to the smaller value."""
    out = np.empty(draws.shape[1], dtype=int)
    for n in range(draws.shape[1]):
        values, counts = np.unique(draws[:, n], return_counts=True)
        out[n] = values[np.argmax(counts)]
    return out


def plug_in(chain: Chain) -> ModelParams:
    """Posterior means of continuous parameters with per-observation modal latent counts."""
    first = chain.samples[0]
    means = {}
    for name, value in vars(first).items():
        if value is None or name == 'x':
            means[name] = value
        else:
            means[name] = chain.draws(name).mean(axis=0)
    means['x'] = _posterior_mode(chain.draws('x'))
    for name in ('theta_disp', 'sigma2_xi'):
        if means[name] is not None:
            means[name] = float(means[name])
    return ModelParams(**means)


def dic(chain: Chain, data: PanelData, variant=None, grids: Sequence[int] = DEFAULT_GRIDS,
        cache: Optional[ReportingCache] = None, quadrature_nodes: int = 7) -> Dict[str, float]:
    """
    DIC = mean deviance + p_D, with p_D = mean deviance - deviance at the
    plug-in estimate. Returns dic, p_d, d_bar and d_hat.
    """
    if len(chain) == 0:
        raise DomainError("DIC needs a nonempty chain")
    variant = ModelVariant.parse(variant or chain.variant)
    if variant is not chain.variant:
        raise DomainError(f"Chain was sampled under {chain.variant.value}, "
                          f"not {variant.value}")
    cache = cache if cache is not None else ReportingCache()
    devs = np.array([deviance(s, data, variant, grids, cache, quadrature_nodes)
                     for s in chain.samples])
    d_bar = float(devs.mean())
    d_hat = deviance(plug_in(chain), data, variant, grids, cache, quadrature_nodes)
    p_d = d_bar - d_hat
    return {'dic': d_bar + p_d, 'p_d': p_d, 'd_bar': d_bar, 'd_hat': d_hat}


# ============================================
# POSTERIOR PREDICTIVE ERROR
# ============================================

def _sample_seed(sample: ModelParams, seed: int) -> int:
    """Seed derived from the sample's values so predictive draws do not depend on order."""
    digest = hashlib.sha256(str(seed).encode())
    for name in ('x', 'alpha', 'beta', 'theta_disp', 'omega', 'xi', 'gamma'):
        value = getattr(sample, name)
        if value is not None:
            digest.update(np.ascontiguousarray(value, dtype=float).tobytes())
    return int.from_bytes(digest.digest()[:8], 'little')


def _report_rows(sample: ModelParams, data: PanelData, variant: ModelVariant,
                 grids: Sequence[int], cache: ReportingCache) -> List[np.ndarray]:
    if variant is ModelVariant.DISPERSION_ONLY:
        return cache.rows(sample.x, sample.theta_disp, 0.0, (1.0,), ())
    theta_heap = heap_intensities(sample, data, variant)[data.subject]
    return cache.rows(sample.x, sample.theta_disp, theta_heap, sample.gamma, grids)


def predictive_mean(sample: ModelParams, data: PanelData, variant: ModelVariant,
                    grids: Sequence[int] = DEFAULT_GRIDS, cache: Optional[ReportingCache] = None,
                    draws: int = 1, seed: int = 0) -> np.ndarray:
    """
    Mean of `draws` predictive reports per observation for one sample;
    draws=0 gives the exact conditional mean E[Y | sample].
    """
    cache = cache if cache is not None else ReportingCache()
    rng = np.random.default_rng(_sample_seed(sample, seed))
    if variant is ModelVariant.NO_HEAPING:
        eta = np.exp(state_predictor(sample, data))
        return eta if draws == 0 else rng.poisson(eta, size=(draws, data.n_obs)).mean(axis=0)
    x = sample.x
    if variant is ModelVariant.WH08:
        v = regime_weight_matrix(sample.gamma, x)
        outcomes = np.column_stack([x] + [wh08_round(x, m) for m in grids])
        if draws == 0:
            return np.sum(v * outcomes, axis=1)
        u = rng.random((draws, len(x), 1))
        regimes = (u > np.cumsum(v, axis=1)[None, :, :]).sum(axis=2)
        regimes = np.minimum(regimes, v.shape[1] - 1)
        return np.take_along_axis(outcomes[None, :, :].repeat(draws, 0),
                                  regimes[:, :, None], axis=2)[:, :, 0].mean(axis=0)
    rows = _report_rows(sample, data, variant, grids, cache)
    if draws == 0:
        return np.array([row @ np.arange(len(row)) for row in rows])
    return np.mean([draw_from_rows(rows, rng) for _ in range(draws)], axis=0)


def sspe(chain: Chain, data: PanelData, variant=None, grids: Sequence[int] = DEFAULT_GRIDS,
         draws: int = 1, seed: int = 0, cache: Optional[ReportingCache] = None) -> float:
    """sum_it (Y_it - Yhat_it)^2 with Yhat the posterior predictive mean."""
    if len(chain) == 0:
        raise DomainError("SSPE needs a nonempty chain")
    variant = ModelVariant.parse(variant or chain.variant)
    cache = cache if cache is not None else ReportingCache()
    total = np.zeros(data.n_obs)
    for sample in chain.samples:
        total += predictive_mean(sample, data, variant, grids, cache, draws, seed)
    y_hat = total / len(chain)
    return squared_error(data.y, y_hat)


def squared_error(y, y_hat) -> float:
    return float(np.sum((np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)) ** 2))


# ============================================
# SUMMARIES
# ============================================

def _summary(values: np.ndarray) -> Dict[str, float]:
    lo, hi = np.quantile(values, QUANTILES)
    return {'mean': float(np.mean(values)), 'q025': float(lo), 'q975': float(hi),
            'var': float(np.var(values, ddof=1)) if len(values) > 1 else 0.0}


def regime_midpoints(gamma) -> np.ndarray:
    """x where each regime boundary has odds one: -gamma_j / gamma_0."""
    gamma = np.asarray(gamma, dtype=float)
    return -gamma[..., 1:] / gamma[..., :1]


def parameter_draws(chain: Chain) -> Dict[str, np.ndarray]:
    """Scalar draws for every reported parameter, keyed by display name."""
    out = {}
    alpha = chain.draws('alpha')
    for k in range(alpha.shape[1]):
        out[f'alpha[{k}]'] = alpha[:, k]
    sigma_beta = chain.draws('sigma_beta')
    if sigma_beta.shape[1] == 1:
        out['sigma2_beta'] = sigma_beta[:, 0, 0]
    else:
        for i in range(sigma_beta.shape[1]):
            for j in range(i, sigma_beta.shape[2]):
                out[f'sigma_beta[{i},{j}]'] = sigma_beta[:, i, j]
    first = chain.samples[0]
    if first.theta_disp is not None:
        out['theta_disp'] = chain.draws('theta_disp')
    if first.omega is not None:
        omega = chain.draws('omega')
        for k in range(omega.shape[1]):
            out[f'omega[{k}]'] = omega[:, k]
        if chain.variant is ModelVariant.HEAPING:
            out['theta_heap'] = np.exp(omega[:, 0])
    if first.sigma2_xi is not None:
        out['sigma2_xi'] = chain.draws('sigma2_xi')
    if first.gamma is not None:
        gamma = chain.draws('gamma')
        for k in range(gamma.shape[1]):
            out[f'gamma[{k}]'] = gamma[:, k]
    return out


def summarize(chain: Chain, data: Optional[PanelData] = None,
              grids: Sequence[int] = DEFAULT_GRIDS, with_dic: bool = True,
              sspe_draws: int = 1, seed: int = 0) -> FitReport:
    """Posterior means and 95% intervals; DIC and SSPE when data is given."""
    if len(chain) == 0:
        raise DomainError("Cannot summarize an empty chain")
    report = FitReport(variant=chain.variant.value, acceptance=dict(chain.acceptance),
                       samples=len(chain))
    report.parameters = {name: _summary(v) for name, v in parameter_draws(chain).items()}
    if chain.samples[0].gamma is not None:
        mids = regime_midpoints(chain.draws('gamma'))
        report.midpoints = {f'midpoint[{j + 1}]': _summary(mids[:, j]) for j in range(mids.shape[1])}
    if data is not None:
        cache = ReportingCache()
        if with_dic:
            stats = dic(chain, data, chain.variant, grids, cache)
            report.dic, report.p_d = stats['dic'], stats['p_d']
        report.sspe = sspe(chain, data, chain.variant, grids, sspe_draws, seed, cache)
    return report


def replicate_summary(estimates: Sequence[Mapping[str, Mapping[str, float]]],
                      truth: Mapping[str, float]) -> pd.DataFrame:
    """
    Simulation-study table across replicates. Each estimate maps a
    parameter to its posterior summary (mean, var, q025, q975).
    """
    rows = []
    for name, true_value in truth.items():
        fits = [e[name] for e in estimates if name in e]
        if not fits:
            continue
        means = np.array([f['mean'] for f in fits])
        covered = [f['q025'] <= true_value <= f['q975'] for f in fits]
        rows.append({
            'parameter': name,
            'truth': true_value,
            'replicates': len(fits),
            'avg_mean': means.mean(),
            'sd_mean': means.std(ddof=1) if len(means) > 1 else 0.0,
            'avg_var': float(np.mean([f.get('var', np.nan) for f in fits])),
            'mse': float(np.mean((means - true_value) ** 2)),
            'coverage': float(np.mean(covered)),
        })
    return pd.DataFrame(rows)


def latent_summary(chain: Chain, data: PanelData) -> pd.DataFrame:
    """Per-observation posterior summary of the latent counts next to the reports."""
    x = chain.draws('x')
    lo, hi = np.quantile(x, QUANTILES, axis=0)
    return pd.DataFrame({
        'subject_id': data.subject_ids[data.subject],
        'time_index': data.time,
        'y': data.y,
        'x_mean': x.mean(axis=0),
        'x_mode': _posterior_mode(x),
        'x_q025': lo,
        'x_q975': hi,
    })


def trace_frame(chain: Chain) -> pd.DataFrame:
    """Long-format traces (iteration, parameter, value)."""
    draws = parameter_draws(chain)
    frames = [pd.DataFrame({'iteration': chain.iterations, 'parameter': name, 'value': values})
              for name, values in draws.items()]
    return pd.concat(frames, ignore_index=True)
