"""
Heaping Lab - Birth-Death Process Engine
========================================
Transition probabilities P_ab(t) of a general birth-death process (BDP)
with arbitrary nonnegative birth rates lambda_k and death rates mu_k.

Primary path: solve the Laplace-transformed forward equations as a
tridiagonal system on a truncated state space, then invert numerically
with the Euler-accelerated Bromwich series.
Oracle path: uniformization in the time domain.
Approximation: discretized normal with the dispersion-only moments.

Every function here is a pure function of its arguments.
"""

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.linalg import solve_banded
from scipy.linalg.lapack import get_lapack_funcs
from scipy.special import comb
from scipy.stats import norm, poisson

from core.heap_errors import AccuracyError, DomainError, NumericalError, TruncationError

logger = logging.getLogger(__name__)

RateFn = Callable[[np.ndarray], np.ndarray]


# ============================================
# PART 1: RATES AND SOLVER SETTINGS
# ============================================

@dataclass(frozen=True)
class RateSchedule:
    """
    Birth and death rates of a BDP as vectorized rules over states.

    `birth` and `death` map an integer array of states k = 0..cap to rates.
    A rule may return shape (B, cap+1) to describe a batch of B processes
    sharing the state grid (see transition_rows). death(0) is forced to 0.
    """
    birth: RateFn
    death: RateFn

    @classmethod
    def linear(cls, immigration: float = 0.0, birth_slope: float = 0.0,
               death_slope: float = 0.0) -> 'RateSchedule':
        """lambda_k = immigration + birth_slope*k, mu_k = death_slope*k."""
        return cls(birth=lambda k: immigration + birth_slope * k,
                   death=lambda k: death_slope * k)

    @classmethod
    def zero(cls) -> 'RateSchedule':
        return cls.linear(0.0, 0.0, 0.0)

    def evaluate(self, cap: int) -> Tuple[np.ndarray, np.ndarray]:
        """Rates on states 0..cap as float arrays of shape (..., cap+1)."""
        k = np.arange(cap + 1)
        lam = np.asarray(self.birth(k), dtype=float)
        mu = np.asarray(self.death(k), dtype=float)
        lam, mu = np.broadcast_arrays(lam, mu)
        if lam.shape[-1] != cap + 1:
            lam = np.broadcast_to(lam, lam.shape[:-1] + (cap + 1,))
            mu = np.broadcast_to(mu, mu.shape[:-1] + (cap + 1,))
        lam = np.array(lam, dtype=float)
        mu = np.array(mu, dtype=float)
        mu[..., 0] = 0.0
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
            raise DomainError("Rate schedule produced non-finite rates")
        if np.any(lam < 0) or np.any(mu < 0):
            raise DomainError("Rate schedule produced negative rates")
        return lam, mu


@dataclass(frozen=True)
class SolverConfig:
    """
    Numerical settings shared by the Laplace and uniformization paths.

    inversion_terms counts Bromwich-series terms after the constant term;
    the last euler_terms partial sums are binomially averaged.
    inversion_precision is the Abate-Whitt A; the discretization error
    is about exp(-A).
    """
    truncation_cap: Optional[int] = None
    tail_tolerance: float = 1e-10
    inversion_terms: int = 50
    euler_terms: int = 20
    inversion_precision: float = 10.0 * math.log(10.0)
    target_abs_error: float = 1e-8
    max_doublings: int = 6

    def __post_init__(self):
        if self.tail_tolerance <= 0 or self.target_abs_error <= 0:
            raise DomainError("Solver tolerances must be positive")
        if self.inversion_precision <= 0:
            raise DomainError("inversion_precision must be positive")
        if not 1 <= self.euler_terms < self.inversion_terms:
            raise DomainError(
                f"Need 1 <= euler_terms < inversion_terms, got "
                f"{self.euler_terms} and {self.inversion_terms}")
        if self.truncation_cap is not None and self.truncation_cap < 1:
            raise DomainError(f"truncation_cap must be >= 1, got {self.truncation_cap}")
        if self.max_doublings < 0:
            raise DomainError("max_doublings must be nonnegative")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> 'SolverConfig':
        return cls(**values)


@dataclass(frozen=True)
class TransitionQuery:
    """One transition probability P_ab(t)."""
    a: int
    b: int
    t: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise DomainError(f"States must be nonnegative, got a={self.a}, b={self.b}")
        if not self.t > 0:
            raise DomainError(f"Elapsed time must be positive, got t={self.t}")


DEFAULT_SOLVER = SolverConfig()


class BatchRows(NamedTuple):
    """Transition rows padded to a common width; rows[r, caps[r]+1:] == 0."""
    rows: np.ndarray
    caps: np.ndarray


def default_cap(lam_a: float, mu_a: float, a: int, t: float) -> int:
    """Starting truncation for a general schedule: a few sd of local jumping above a."""
    spread = math.sqrt(max(lam_a + mu_a, 1.0) * t)
    return int(a + 20 + math.ceil(10.0 * spread))


def _starting_caps(rates: RateSchedule, starts: np.ndarray, t: float,
                   cfg: SolverConfig) -> np.ndarray:
    if cfg.truncation_cap is not None:
        return np.maximum(starts + 1, cfg.truncation_cap)
    lam, mu = rates.evaluate(int(starts.max()) + 1)
    lam = np.atleast_2d(lam)
    mu = np.atleast_2d(mu)
    if lam.shape[0] == 1 and len(starts) > 1:
        lam = np.repeat(lam, len(starts), axis=0)
        mu = np.repeat(mu, len(starts), axis=0)
    idx = np.arange(len(starts))
    return np.array([default_cap(lam[r, a], mu[r, a], a, t)
                     for r, a in zip(idx, starts)], dtype=int)


# ============================================
# PART 2: LAPLACE DOMAIN
# ============================================

def _truncated_rates(rates: RateSchedule, cap: int) -> Tuple[np.ndarray, np.ndarray]:
    lam, mu = rates.evaluate(cap)
    lam[..., cap] = 0.0  # reflecting top state keeps the truncated chain conservative
    return lam, mu


def laplace_row(rates: RateSchedule, a: int, s: complex,
                cfg: SolverConfig = DEFAULT_SOLVER) -> np.ndarray:
    """
    Laplace transforms h_ab(s), b = 0..cap, of one transition row.

    Solves (sI - Q)^T h = e_a on the truncated state space, where Q is the
    generator with a reflecting top state. The cap doubles until the
    transform mass |s| * sum of |h| over the top three states falls below
    the tail tolerance.

    Raises
    ------
    DomainError
        If Re(s) <= 0 or a < 0.
    TruncationError
        If the doubling limit is exhausted.
    NumericalError
        If the banded solve is singular.
    """
    s = complex(s)
    if s.real <= 0:
        raise DomainError(f"laplace_row needs Re(s) > 0, got s={s}")
    if a < 0:
        raise DomainError(f"Start state must be nonnegative, got a={a}")
    cap = int(_starting_caps(rates, np.array([a]), 1.0, cfg)[0])
    for _ in range(cfg.max_doublings + 1):
        lam, mu = _truncated_rates(rates, cap)
        if lam.ndim != 1:
            raise DomainError("laplace_row takes a single (non-batch) rate schedule")
        # Banded layout of (sI - Q)^T: superdiag -mu_{k+1}, diag s + lam_k + mu_k, subdiag -lam_{k-1}
        ab = np.zeros((3, cap + 1), dtype=complex)
        ab[0, 1:] = -mu[1:]
        ab[1, :] = s + lam + mu
        ab[2, :-1] = -lam[:-1]
        rhs = np.zeros(cap + 1, dtype=complex)
        rhs[a] = 1.0
        try:
            h = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Singular Laplace-domain solve at s={s}: {exc}") from exc
        if abs(s) * np.abs(h[-3:]).sum() < cfg.tail_tolerance:
            return h
        logger.debug("laplace_row: doubling cap %d at a=%d, s=%s", cap, a, s)
        cap *= 2
    raise TruncationError(f"Laplace row from a={a} did not settle below cap {cap // 2}")


def continued_fraction_h00(rates: RateSchedule, s: complex,
                           cfg: SolverConfig = DEFAULT_SOLVER,
                           depth: Optional[int] = None) -> complex:
    """
    h_00(s) from its continued fraction, evaluated bottom-up.

    h_00 = 1 / (s + lam_0 - lam_0 mu_1 / (s + lam_1 + mu_1 - lam_1 mu_2 / (...)))

    The depth doubles until two successive approximants agree to well
    below the tail tolerance.
    """
    s = complex(s)
    if s.real <= 0:
        raise DomainError(f"continued fraction needs Re(s) > 0, got s={s}")
    depth = depth or cfg.truncation_cap or 64
    tol = 1e-2 * cfg.tail_tolerance
    previous = None
    for _ in range(cfg.max_doublings + 4):
        lam, mu = rates.evaluate(depth + 1)
        tail = s + lam[depth] + mu[depth]
        for k in range(depth - 1, 0, -1):
            tail = s + lam[k] + mu[k] - lam[k] * mu[k + 1] / tail
        value = 1.0 / (s + lam[0] - lam[0] * mu[1] / tail)
        if previous is not None and abs(value - previous) < tol:
            return value
        previous = value
        depth *= 2
    raise TruncationError(f"Continued fraction for h_00({s}) did not converge")


# ============================================
# PART 3: NUMERICAL INVERSION
# ============================================

@lru_cache(maxsize=32)
def _euler_coefficients(n_terms: int, n_euler: int) -> np.ndarray:
    """
    Weights c_k so that f(t) ~ e^{A/2}/t * sum_k c_k Re F((A + 2 pi i k) / 2t).

    Alternating Bromwich series (first term halved); the final n_euler+1
    partial sums are averaged with binomial weights.
    """
    n_plain = n_terms - n_euler
    signs = np.where(np.arange(n_terms + 1) % 2 == 0, 1.0, -1.0)
    signs[0] = 0.5
    binom = comb(n_euler, np.arange(n_euler + 1)) / 2.0 ** n_euler
    # partial sum j contributes to terms 0..j, so term k collects weights of sums j >= k
    tail_weight = np.ones(n_terms + 1)
    for k in range(n_plain + 1, n_terms + 1):
        tail_weight[k] = binom[k - n_plain:].sum()
    return signs * tail_weight


_gtsv = get_lapack_funcs('gtsv', dtype=np.complex128)


def _block_layout(caps: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row index, state index and row offsets for rows of length caps+1 laid end to end."""
    widths = caps + 1
    offsets = np.concatenate(([0], np.cumsum(widths)[:-1]))
    row = np.repeat(np.arange(len(caps)), widths)
    state = np.arange(int(widths.sum())) - np.repeat(offsets, widths)
    return row, state, offsets


def _invert_batch(lam: np.ndarray, mu: np.ndarray, starts: np.ndarray, caps: np.ndarray,
                  t: float, cfg: SolverConfig) -> List[np.ndarray]:
    """
    Euler inversion of whole rows; row r covers states 0..caps[r] of lam[r], mu[r].

    Every (Bromwich node, row) pair is one tridiagonal block of
    (sI - Q_r)^T h = e_a. The blocks are stacked into a single system with
    zero coupling between neighbours and solved by one LAPACK gtsv call, so
    a row comes out the same whatever it is batched with.
    """
    big_a = cfg.inversion_precision
    nodes = (big_a + 2j * math.pi * np.arange(cfg.inversion_terms + 1)) / (2.0 * t)
    row, state, offsets = _block_layout(caps)
    last = lam.shape[1] - 1
    # row k of block r: -lam_{k-1} h_{k-1} + (s + lam_k + mu_k) h_k - mu_{k+1} h_{k+1}
    below = np.where(state > 0, -lam[row, np.maximum(state - 1, 0)], 0.0)
    above = np.where(state < caps[row], -mu[row, np.minimum(state + 1, last)], 0.0)
    spread = lam[row, state] + mu[row, state]
    unit = (state == starts[row]).astype(np.complex128)

    n_nodes = len(nodes)
    diag = (nodes[:, None] + spread[None, :]).ravel()
    sub = np.tile(below, n_nodes)[1:].astype(np.complex128)
    sup = np.tile(above, n_nodes)[:-1].astype(np.complex128)
    _, _, _, h, info = _gtsv(sub, diag, sup, np.tile(unit, n_nodes))
    if info != 0 or not np.all(np.isfinite(h)):
        raise NumericalError(f"Singular Laplace-domain solve during inversion (info={info})")

    coeff = _euler_coefficients(cfg.inversion_terms, cfg.euler_terms)
    h_re = h.real.reshape(n_nodes, len(state))
    values = np.zeros(len(state))
    for c, h_node in zip(coeff, h_re):  # fixed summation order
        values += c * h_node
    values *= math.exp(big_a / 2.0) / t
    return np.split(values, offsets[1:])


def transition_rows(rates: RateSchedule, starts: Sequence[int], t: float = 1.0,
                    cfg: SolverConfig = DEFAULT_SOLVER,
                    caps: Optional[Sequence[int]] = None) -> BatchRows:
    """
    Transition rows for a batch of processes, one start state per process.

    `rates` may be a batch schedule returning (B, cap+1) arrays, or a plain
    schedule shared by every row. Each row keeps its own truncation cap; a
    reflecting top state makes the padded states unreachable, so a row is
    the same as when computed alone. Rows failing the boundary check have
    their cap doubled independently.
    """
    starts = np.asarray(starts, dtype=int)
    if starts.ndim != 1 or len(starts) == 0:
        raise DomainError("transition_rows needs a nonempty 1-D array of start states")
    if np.any(starts < 0):
        raise DomainError("Start states must be nonnegative")
    if not t > 0:
        raise DomainError(f"Elapsed time must be positive, got t={t}")
    batch = len(starts)
    row_caps = (_starting_caps(rates, starts, t, cfg) if caps is None
                else np.maximum(np.asarray(caps, dtype=int), starts + 1))

    done: Dict[int, np.ndarray] = {}
    pending = np.arange(batch)
    for attempt in range(cfg.max_doublings + 1):
        width = int(row_caps[pending].max()) + 1
        lam, mu = rates.evaluate(width - 1)
        lam = np.broadcast_to(np.atleast_2d(lam), (batch, width))[pending].copy()
        mu = np.broadcast_to(np.atleast_2d(mu), (batch, width))[pending].copy()
        local_caps = row_caps[pending]
        lam[np.arange(len(pending)), local_caps] = 0.0
        values = _invert_batch(lam, mu, starts[pending], local_caps, t, cfg)

        still = []
        for j, r in enumerate(pending):
            row = values[j]
            if row[-3:].sum() < cfg.tail_tolerance:
                done[r] = _tail_corrected(row, starts[r], cfg)
            else:
                still.append(r)
        if not still:
            break
        pending = np.array(still, dtype=int)
        row_caps[pending] *= 2
        logger.debug("transition_rows: doubling caps for %d row(s), attempt %d",
                     len(pending), attempt + 1)
    else:
        raise TruncationError(
            f"Truncation did not converge for start state(s) "
            f"{sorted(int(starts[r]) for r in pending)[:5]} after "
            f"{cfg.max_doublings} doublings")

    width = int(row_caps.max()) + 1
    out = np.zeros((batch, width))
    for r, row in done.items():
        out[r, :len(row)] = row
    return BatchRows(rows=out, caps=row_caps.copy())


def _tail_corrected(row: np.ndarray, a: int, cfg: SolverConfig) -> np.ndarray:
    residual = max(abs(row.sum() - 1.0), -min(row.min(), 0.0))
    if residual > cfg.target_abs_error:
        raise AccuracyError(
            f"Inversion residual {residual:.3e} exceeds target {cfg.target_abs_error:.1e} "
            f"for start state {a}")
    row = np.clip(row, 0.0, 1.0)
    return row / row.sum()


def transition_row(rates: RateSchedule, a: int, t: float = 1.0,
                   cfg: SolverConfig = DEFAULT_SOLVER, min_cap: int = 0) -> np.ndarray:
    """
    P_a.(t) by numerical Laplace inversion.

    Entries lie in [0, 1] and sum to 1 after clipping inversion noise.
    The returned row covers states 0..cap for the adaptive cap, never
    shorter than min_cap + 1.
    """
    if a < 0:
        raise DomainError(f"Start state must be nonnegative, got a={a}")
    caps = None
    if min_cap:
        base = _starting_caps(rates, np.array([a]), t, cfg)
        caps = np.maximum(base, min_cap)
    batch = transition_rows(rates, [a], t, cfg, caps=caps)
    return batch.rows[0, :batch.caps[0] + 1]


def transition_probability(rates: RateSchedule, query: TransitionQuery,
                           cfg: SolverConfig = DEFAULT_SOLVER) -> float:
    row = transition_row(rates, query.a, query.t, cfg, min_cap=query.b + 1)
    return float(row[query.b]) if query.b < len(row) else 0.0


# ============================================
# PART 4: UNIFORMIZATION ORACLE
# ============================================

def uniformization_row(rates: RateSchedule, a: int, t: float = 1.0,
                       cfg: SolverConfig = DEFAULT_SOLVER, min_cap: int = 0) -> np.ndarray:
    """
    Row a of exp(Qt) by uniformization.

    With q the largest exit rate and P = I + Q/q,
    exp(Qt) = sum_n Poisson(n; qt) P^n, summed until the Poisson tail
    drops below the tail tolerance.
    """
    if a < 0:
        raise DomainError(f"Start state must be nonnegative, got a={a}")
    if not t > 0:
        raise DomainError(f"Elapsed time must be positive, got t={t}")
    cap = int(max(_starting_caps(rates, np.array([a]), t, cfg)[0], min_cap))
    for _ in range(cfg.max_doublings + 1):
        lam, mu = _truncated_rates(rates, cap)
        if lam.ndim != 1:
            raise DomainError("uniformization_row takes a single (non-batch) rate schedule")
        exit_rate = lam + mu
        q = float(exit_rate.max())
        row = np.zeros(cap + 1)
        row[a] = 1.0
        if q == 0.0:
            return row
        kernel = sparse.diags([mu[1:] / q, 1.0 - exit_rate / q, lam[:-1] / q],
                              [-1, 0, 1], format='csr')
        kernel_t = kernel.T.tocsr()
        n_max = int(poisson.isf(cfg.tail_tolerance * 1e-2, q * t)) + 1
        weights = poisson.pmf(np.arange(n_max + 1), q * t)
        v = row.copy()
        acc = weights[0] * v
        for w in weights[1:]:
            v = kernel_t @ v
            acc += w * v
        if acc[-3:].sum() < cfg.tail_tolerance:
            total = acc.sum()
            if abs(total - 1.0) > 1e-8:
                raise AccuracyError(f"Uniformization mass {total:.12f} is not 1")
            return acc / total
        logger.debug("uniformization_row: doubling cap %d at a=%d", cap, a)
        cap *= 2
    raise TruncationError(f"Uniformization row from a={a} did not settle below cap {cap // 2}")


# ============================================
# PART 5: DISPERSION-ONLY MOMENTS
# ============================================

def dispersion_moments(a: int, theta_disp: float, t: float = 1.0) -> Tuple[float, float]:
    """Mean and variance of X(t) | X(0)=a for lambda_k = theta(1+k), mu_k = theta k."""
    if theta_disp < 0:
        raise DomainError(f"theta_disp must be nonnegative, got {theta_disp}")
    mean = a + theta_disp * t
    variance = (2 * a + 1) * theta_disp * t + theta_disp ** 2 * t ** 2
    return mean, variance


def normal_approx_pmf(a: int, theta_disp: float, support: Sequence[int], t: float = 1.0,
                      inflation: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discretized normal approximation to P_a.(t) under dispersion-only rates.

    Each integer y gets the normal mass on [y - 1/2, y + 1/2]; negative
    states are dropped and the rest renormalized. `inflation` scales the
    variance. Returns (states, probabilities).
    """
    if not theta_disp > 0:
        raise DomainError(f"normal approximation needs theta_disp > 0, got {theta_disp}")
    states = np.asarray(support, dtype=int)
    states = states[states >= 0]
    if states.size == 0:
        raise DomainError("normal approximation support has no nonnegative states")
    mean, variance = dispersion_moments(a, theta_disp, t)
    sd = math.sqrt(inflation * variance)
    upper = (states + 0.5 - mean) / sd
    lower = (states - 0.5 - mean) / sd
    # sf differences above the mean keep precision in the upper tail
    mass = np.where(lower > 0, norm.sf(lower) - norm.sf(upper), norm.cdf(upper) - norm.cdf(lower))
    total = mass.sum()
    if not total > 0:
        raise DomainError(f"normal approximation has no mass on support around a={a}")
    return states, mass / total


class NormalWindow(NamedTuple):
    """Discretized normal restricted to the integers lo..hi (elementwise arrays)."""
    mean: np.ndarray
    sd: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def dispersion_window(a, theta_disp: float, t: float = 1.0, inflation: float = 1.0,
                      width: float = 6.0) -> NormalWindow:
    """
    The normal approximation around start states `a` restricted to
    mean +- width sd and to nonnegative states. Vectorized over `a`.
    """
    if not theta_disp > 0:
        raise DomainError(f"normal approximation needs theta_disp > 0, got {theta_disp}")
    a = np.asarray(a, dtype=float)
    mean, variance = dispersion_moments(a, theta_disp, t)
    sd = np.sqrt(inflation * variance)
    lo = np.maximum(0.0, np.floor(mean - width * sd))
    hi = np.ceil(mean + width * sd)
    return NormalWindow(mean, sd, lo, hi)


def _interval_mass(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.where(lower > 0, norm.sf(lower) - norm.sf(upper), norm.cdf(upper) - norm.cdf(lower))


def window_logpmf(y, window: NormalWindow) -> np.ndarray:
    """log probability of states y under a NormalWindow; -inf outside the window."""
    y = np.asarray(y, dtype=float)
    mean, sd, lo, hi = window
    mass = _interval_mass((y - 0.5 - mean) / sd, (y + 0.5 - mean) / sd)
    total = _interval_mass((lo - 0.5 - mean) / sd, (hi + 0.5 - mean) / sd)
    inside = (y >= lo) & (y <= hi) & (mass > 0)
    with np.errstate(divide='ignore'):
        return np.where(inside, np.log(np.where(inside, mass, 1.0)) - np.log(total), -np.inf)


def window_sample(rng: np.random.Generator, window: NormalWindow) -> np.ndarray:
    """Draw integers from a NormalWindow: truncated continuous normal, rounded."""
    mean, sd, lo, hi = window
    left = norm.cdf((lo - 0.5 - mean) / sd)
    right = norm.cdf((hi + 0.5 - mean) / sd)
    u = rng.random(np.shape(mean))
    z = mean + sd * norm.ppf(left + u * (right - left))
    return np.clip(np.floor(z + 0.5), lo, hi).astype(int)
