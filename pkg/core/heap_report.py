"""
Heaping Lab - Reporting Distribution
====================================
Heaping rate schedules and the reporting distribution g(y|x) = P_xy(1)
of the birth-death heaping mechanism.

A true count x is reported after one time unit of a BDP started at x.
The dispersion part (theta_disp) spreads reports symmetrically; the
heaping part (theta_heap) pulls states toward multiples of the grids
m_1 < ... < m_J, mixed by proportional-odds regime weights v_j(x).
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp
from scipy.stats import poisson

from core.heap_engine import (DEFAULT_SOLVER, RateSchedule, SolverConfig,
                              transition_rows)
from core.heap_errors import DomainError

logger = logging.getLogger(__name__)

DEFAULT_GRIDS = (5, 10, 50)
# Below this both intensities count as zero and g collapses to the identity
FROZEN_INTENSITY = 1e-8


# ============================================
# PART 1: PARAMETERS AND REGIME WEIGHTS
# ============================================

def check_gamma(gamma: Sequence[float], n_grids: Optional[int] = None) -> Tuple[float, ...]:
    """Validate regime parameters: gamma_0 > 0 and gamma_1 > gamma_2 > ... > gamma_J."""
    gamma = tuple(float(g) for g in gamma)
    if len(gamma) < 1:
        raise DomainError("gamma needs at least gamma_0")
    if n_grids is not None and len(gamma) != n_grids + 1:
        raise DomainError(f"gamma has {len(gamma)} entries, expected {n_grids + 1} for "
                          f"{n_grids} grid(s)")
    if not gamma[0] > 0:
        raise DomainError(f"gamma_0 must be positive, got {gamma[0]}")
    tail = gamma[1:]
    if any(not a > b for a, b in zip(tail, tail[1:])):
        raise DomainError(f"gamma_1 > ... > gamma_J violated: {tail}")
    if any(math.isnan(g) for g in gamma):
        raise DomainError("gamma contains NaN")
    return gamma


def gamma_ordered(gamma: Sequence[float]) -> bool:
    try:
        check_gamma(gamma)
    except DomainError:
        return False
    return True


@dataclass(frozen=True)
class HeapParams:
    """Reporting parameters for one (possibly subject-specific) heaping mechanism."""
    theta_disp: float
    theta_heap: float
    gamma: Tuple[float, ...]
    grids: Tuple[int, ...] = DEFAULT_GRIDS

    def __post_init__(self):
        grids = tuple(int(m) for m in self.grids)
        if any(m < 2 for m in grids):
            raise DomainError(f"Heaping grids must be >= 2, got {grids}")
        if any(not a < b for a, b in zip(grids, grids[1:])):
            raise DomainError(f"Heaping grids must be strictly increasing, got {grids}")
        if not (self.theta_disp >= 0 and self.theta_heap >= 0):
            raise DomainError(f"Intensities must be nonnegative, got theta_disp="
                              f"{self.theta_disp}, theta_heap={self.theta_heap}")
        object.__setattr__(self, 'theta_disp', float(self.theta_disp))
        object.__setattr__(self, 'theta_heap', float(self.theta_heap))
        object.__setattr__(self, 'grids', grids)
        object.__setattr__(self, 'gamma', check_gamma(self.gamma, len(grids)))

    @classmethod
    def single_grid(cls, theta_disp: float, theta_heap: float, m: int) -> 'HeapParams':
        """One grid with weight 1 everywhere: gamma_1 = +inf makes v_1 = 1."""
        return cls(theta_disp, theta_heap, (1.0, math.inf), (m,))

    @property
    def frozen(self) -> bool:
        return self.theta_disp < FROZEN_INTENSITY and self.theta_heap < FROZEN_INTENSITY

    def with_theta(self, theta_disp: float, theta_heap: float) -> 'HeapParams':
        return HeapParams(theta_disp, theta_heap, self.gamma, self.grids)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class RegimeWeights:
    """v_0..v_J at one true count; v_0 is the truthful-report weight."""
    v: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(self.v < 0) or abs(self.v.sum() - 1.0) > 1e-12:
            raise DomainError(f"Invalid regime weights {self.v}")

    def __getitem__(self, j: int) -> float:
        return float(self.v[j])

    def __len__(self) -> int:
        return len(self.v)


def regime_weight_matrix(gamma: Sequence[float], xs) -> np.ndarray:
    """
    Regime weights for many true counts, shape (len(xs), J+1).

    P(regime < j | x) = expit(-(gamma_j + gamma_0 x)); the weights are the
    successive differences. scipy's expit saturates cleanly, so extreme
    arguments neither overflow nor produce NaN.
    """
    gamma = np.asarray(gamma, dtype=float)
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if gamma.size == 1:
        return np.ones((xs.size, 1))
    lin = gamma[None, 1:] + gamma[0] * xs[:, None]  # (n, J)
    below = expit(-lin)
    weights = np.empty((xs.size, gamma.size))
    weights[:, 0] = below[:, 0]
    weights[:, 1:-1] = below[:, 1:] - below[:, :-1]
    weights[:, -1] = expit(lin[:, -1])
    return np.clip(weights, 0.0, 1.0)


def regime_weights(gamma: Sequence[float], x: int) -> RegimeWeights:
    if x < 0:
        raise DomainError(f"True count must be nonnegative, got {x}")
    check_gamma(gamma)
    return RegimeWeights(regime_weight_matrix(gamma, [x])[0])


# ============================================
# PART 2: RATE SCHEDULES
# ============================================

def _heap_schedule(theta_disp, heap_weights: np.ndarray, grids: Sequence[int]) -> RateSchedule:
    """
    Rates lambda_k = theta_disp (1+k) + sum_j w_j (k mod m_j),
          mu_k     = theta_disp k     + sum_j w_j (-k mod m_j).

    heap_weights holds theta_heap * v_j for j = 1..J, shape (J,) or (B, J);
    theta_disp is a scalar or shape (B,).
    """
    grids = np.asarray(grids, dtype=int)
    theta_disp = np.asarray(theta_disp, dtype=float)
    if theta_disp.ndim:
        theta_disp = theta_disp[:, None]
    w = np.asarray(heap_weights, dtype=float)

    def birth(k):
        up = np.mod(k[None, :], grids[:, None])  # (J, K)
        return theta_disp * (1 + k) + w @ up

    def death(k):
        down = np.mod(-k[None, :], grids[:, None])
        return theta_disp * k + w @ down

    return RateSchedule(birth=birth, death=death)


def heap_rates(p: HeapParams, x: int) -> RateSchedule:
    """BDP rates for true count x; regime weights are fixed at x over all states."""
    if x < 0:
        raise DomainError(f"True count must be nonnegative, got {x}")
    if not p.grids:
        return _heap_schedule(p.theta_disp, np.zeros(0), ())
    v = regime_weight_matrix(p.gamma, [x])[0]
    return _heap_schedule(p.theta_disp, p.theta_heap * v[1:], p.grids)


def rate_table(p: HeapParams, x: int, cap: int) -> pd.DataFrame:
    """Birth and death rates on states 0..cap, split into dispersion and heaping parts."""
    lam, mu = heap_rates(p, x).evaluate(cap)
    k = np.arange(cap + 1)
    return pd.DataFrame({
        'k': k,
        'birth': lam,
        'death': mu,
        'birth_heap': lam - p.theta_disp * (1 + k),
        'death_heap': mu - p.theta_disp * k,
    })


def initial_cap(p: HeapParams, x: int, y: Optional[int] = None) -> int:
    """
    Starting truncation for g(.|x): the next heaping point of the coarsest
    grid above x, plus 20, plus ten dispersion standard deviations. Raised
    to a multiple of 64 when a requested report y would not fit.
    """
    caps = initial_caps(p.theta_disp, p.theta_heap, p.grids, [x], None if y is None else [y])
    return int(caps[0])


def initial_caps(theta_disp: float, theta_heap, grids: Sequence[int], x,
                 y=None) -> np.ndarray:
    """Vectorized initial_cap over true counts x (and reports y)."""
    x = np.asarray(x, dtype=int)
    theta_heap = np.broadcast_to(np.asarray(theta_heap, dtype=float), x.shape)
    top = x
    if len(grids):
        m = grids[-1]
        top = np.where(theta_heap > 0, np.maximum(x, (x // m + 1) * m), x)
    spread = (2 * x + 1) * theta_disp + theta_disp ** 2
    caps = top + 20 + np.ceil(10.0 * np.sqrt(spread)).astype(int)
    if y is not None:
        need = np.asarray(y, dtype=int) + 20
        caps = np.where(need > caps, np.ceil(need / 64.0).astype(int) * 64, caps)
    return caps


# ============================================
# PART 3: REPORTING DISTRIBUTION
# ============================================

@lru_cache(maxsize=4096)
def _reporting_row(p: HeapParams, x: int, cap: int, cfg: SolverConfig) -> np.ndarray:
    if p.frozen:
        row = np.zeros(max(cap, x) + 1)
        row[x] = 1.0
    else:
        row = transition_rows(heap_rates(p, x), [x], 1.0, cfg, caps=[cap]).rows[0]
    row.setflags(write=False)
    return row


def reporting_pmf(p: HeapParams, x: int, cfg: SolverConfig = DEFAULT_SOLVER,
                  max_y: Optional[int] = None) -> np.ndarray:
    """
    g(y|x) for y = 0..cap as a read-only array.

    The cap is adaptive; max_y guarantees the row covers that report.
    Nearly frozen intensities give the point mass at x.
    """
    if x < 0:
        raise DomainError(f"True count must be nonnegative, got {x}")
    return _reporting_row(p, int(x), initial_cap(p, x, max_y), cfg)


def reporting_moments(p: HeapParams, x: int, cfg: SolverConfig = DEFAULT_SOLVER) -> Tuple[float, float]:
    g = reporting_pmf(p, x, cfg)
    y = np.arange(len(g))
    mean = float(g @ y)
    return mean, float(g @ (y - mean) ** 2)


class ReportingCache:
    """
    Batched, cached log g(y|x) for many observations at once.

    Rows are keyed by (x, theta_disp, theta_heap, gamma, grids, cap), so a
    looked-up value is the same whether it came from the cache or from a
    fresh solve. Unique keys in one request are solved as a single batch.
    """

    def __init__(self, cfg: SolverConfig = DEFAULT_SOLVER, max_rows: int = 200_000):
        self.cfg = cfg
        self.max_rows = max_rows
        self._rows: 'OrderedDict[tuple, np.ndarray]' = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._rows)

    def clear(self):
        self._rows.clear()

    def stats(self) -> Dict[str, int]:
        return {'rows': len(self._rows), 'hits': self.hits, 'misses': self.misses}

    def rows(self, x, theta_disp: float, theta_heap, gamma: Sequence[float],
             grids: Sequence[int] = DEFAULT_GRIDS, y=None) -> List[np.ndarray]:
        """
        Reporting rows g(. | x_n), one read-only array per entry of x.
        theta_heap may be a scalar or one value per entry; when y is given
        each row is long enough to hold y_n.
        """
        x = np.atleast_1d(np.asarray(x, dtype=int))
        if np.any(x < 0):
            raise DomainError("True counts must be nonnegative")
        theta_heap = np.broadcast_to(np.asarray(theta_heap, dtype=float), x.shape)
        gamma = tuple(float(g) for g in gamma)
        grids = tuple(int(m) for m in grids)
        theta_disp = float(theta_disp)
        template = HeapParams(theta_disp, 0.0, gamma, grids)
        caps = initial_caps(theta_disp, theta_heap, grids, x, y)
        keys = [(int(xn), theta_disp, float(hn), gamma, grids, int(cn))
                for xn, hn, cn in zip(x, theta_heap, caps)]

        found = {}
        missing = []
        for key in dict.fromkeys(keys):
            row = self._rows.get(key)
            if row is None:
                missing.append(key)
            else:
                self._rows.move_to_end(key)
                found[key] = row
        self.hits += len(keys) - len(missing)
        self.misses += len(missing)
        if missing:
            found.update(self._solve(missing, template))
        return [found[key] for key in keys]

    def log_g(self, y, x, theta_disp: float, theta_heap, gamma: Sequence[float],
              grids: Sequence[int] = DEFAULT_GRIDS) -> np.ndarray:
        """
        log g(y_n | x_n) for aligned arrays y, x; theta_heap may be a scalar
        or one value per observation. Zero probabilities give -inf.
        """
        y = np.atleast_1d(np.asarray(y, dtype=int))
        x = np.atleast_1d(np.asarray(x, dtype=int))
        if y.shape != x.shape:
            raise DomainError(f"y and x shapes differ: {y.shape} vs {x.shape}")
        if np.any(y < 0):
            raise DomainError("Reports must be nonnegative")
        theta_heap = np.broadcast_to(np.asarray(theta_heap, dtype=float), x.shape)
        prob = np.zeros(x.shape)
        for n, row in enumerate(self.rows(x, theta_disp, theta_heap, gamma, grids, y)):
            if y[n] < len(row):
                prob[n] = row[y[n]]
        with np.errstate(divide='ignore'):
            return np.log(prob)

    def _solve(self, keys, template: HeapParams) -> Dict[tuple, np.ndarray]:
        solved = {}
        live = []
        for key in keys:
            x, heap, cap = key[0], key[2], key[5]
            if template.theta_disp < FROZEN_INTENSITY and heap < FROZEN_INTENSITY:
                row = np.zeros(max(cap, x) + 1)
                row[x] = 1.0
                row.setflags(write=False)
                solved[key] = row
            else:
                live.append(key)
        if live:
            xs = np.array([k[0] for k in live], dtype=int)
            heaps = np.array([k[2] for k in live])
            caps = np.array([k[5] for k in live], dtype=int)
            if template.grids:
                weights = heaps[:, None] * regime_weight_matrix(template.gamma, xs)[:, 1:]
            else:
                weights = np.zeros((len(live), 0))
            schedule = _heap_schedule(template.theta_disp, weights, template.grids)
            batch = transition_rows(schedule, xs, 1.0, self.cfg, caps=caps)
            for r, key in enumerate(live):
                row = batch.rows[r, :batch.caps[r] + 1].copy()
                row.setflags(write=False)
                solved[key] = row
        self._rows.update(solved)
        while len(self._rows) > self.max_rows:
            self._rows.popitem(last=False)
        logger.debug("ReportingCache solved %d row(s); %s", len(keys), self.stats())
        return solved


# ============================================
# PART 4: MIXTURE LIKELIHOOD
# ============================================

class MixtureLogLik(NamedTuple):
    value: float
    underflow: bool


def mixture_window(y: int, eta: float, theta_disp: float) -> np.ndarray:
    """True counts x that carry non-negligible mass in sum_x g(y|x) Poisson(x; eta)."""
    root = math.sqrt(eta)
    lo = max(0, int(math.floor(eta - 10 * root - 10)))
    hi = int(math.ceil(eta + 10 * root + 10))
    width = 10 + int(math.ceil(10 * math.sqrt((2 * y + 1) * theta_disp)))
    around_y = np.arange(max(0, y - width), y + width + 1)
    return np.union1d(np.arange(lo, hi + 1), around_y)


def mixture_loglik(y: int, eta: float, p: HeapParams, cfg: SolverConfig = DEFAULT_SOLVER,
                   cache: Optional[ReportingCache] = None) -> MixtureLogLik:
    """log sum_x g(y|x) Poisson(x; eta), the marginal likelihood of one report."""
    if not eta > 0:
        raise DomainError(f"Poisson mean must be positive, got eta={eta}")
    if y < 0:
        raise DomainError(f"Report must be nonnegative, got y={y}")
    cache = cache if cache is not None else ReportingCache(cfg)
    xs = mixture_window(y, eta, max(p.theta_disp, p.theta_heap))
    log_g = cache.log_g(np.full(xs.shape, y), xs, p.theta_disp, p.theta_heap, p.gamma, p.grids)
    terms = log_g + poisson.logpmf(xs, eta)
    value = logsumexp(terms)
    if not np.isfinite(value):
        logger.debug("mixture_loglik underflow at y=%d, eta=%.4g", y, eta)
        return MixtureLogLik(-np.inf, True)
    return MixtureLogLik(float(value), False)
