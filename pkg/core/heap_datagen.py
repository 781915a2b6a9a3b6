"""
Heaping Lab - Panel Simulation
==============================
Simulated longitudinal panels from the latent count model:

    beta_i ~ N(0, sigma2_beta),  X_it ~ Poisson(exp(alpha + beta_i)),
    Y_it ~ g(. | X_it)  (BDP heaping or deterministic WH08 rounding)

Reports are drawn by inverse CDF from the exact reporting pmf.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.heap_engine import DEFAULT_SOLVER, SolverConfig
from core.heap_errors import DomainError
from core.heap_model import ModelParams, PanelData, wh08_report
from core.heap_report import DEFAULT_GRIDS, HeapParams, ReportingCache, check_gamma

logger = logging.getLogger(__name__)

MECHANISMS = ('bdp', 'wh08')


@dataclass(frozen=True)
class SimConfig:
    """Simulation design; defaults follow the standard simulation study."""
    n_subjects: int = 100
    repeats: int = 5
    alpha: float = 2.0
    sigma2_beta: float = 1.21
    theta_disp: float = 0.5
    theta_heap: float = 2.0
    gamma: Tuple[float, ...] = (0.5, -5.0, -10.0, -20.0)
    grids: Tuple[int, ...] = DEFAULT_GRIDS
    mechanism: str = 'bdp'
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.repeats < 1:
            raise DomainError("n_subjects and repeats must be positive")
        if self.sigma2_beta < 0 or self.theta_disp < 0 or self.theta_heap < 0:
            raise DomainError("Variances and intensities must be nonnegative")
        if self.mechanism not in MECHANISMS:
            raise DomainError(f"Unknown reporting mechanism: {self.mechanism}")
        object.__setattr__(self, 'gamma', check_gamma(self.gamma, len(self.grids)))
        object.__setattr__(self, 'grids', tuple(int(m) for m in self.grids))

    @property
    def heap_params(self) -> HeapParams:
        return HeapParams(self.theta_disp, self.theta_heap, self.gamma, self.grids)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out['gamma'] = list(self.gamma)
        out['grids'] = list(self.grids)
        return out

    @classmethod
    def from_dict(cls, values: Dict) -> 'SimConfig':
        values = dict(values)
        for key in ('gamma', 'grids'):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


def draw_from_rows(rows: Sequence[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one state from each probability row."""
    u = rng.random(len(rows))
    out = np.empty(len(rows), dtype=int)
    for n, row in enumerate(rows):
        cdf = np.cumsum(row)
        out[n] = min(int(np.searchsorted(cdf, u[n] * cdf[-1], side='right')), len(row) - 1)
    return out


def sample_reporting(x, p: HeapParams, rng: np.random.Generator,
                     cache: Optional[ReportingCache] = None,
                     cfg: SolverConfig = DEFAULT_SOLVER):
    """Reported counts for true counts x, exact draws from g(. | x)."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=int))
    cache = cache if cache is not None else ReportingCache(cfg)
    rows = cache.rows(x, p.theta_disp, p.theta_heap, p.gamma, p.grids)
    y = draw_from_rows(rows, rng)
    return int(y[0]) if scalar else y


def simulate_panel(cfg: SimConfig, solver: SolverConfig = DEFAULT_SOLVER,
                   ) -> Tuple[PanelData, ModelParams]:
    """Simulated panel plus the ground-truth parameters and latent counts."""
    rng = np.random.default_rng(cfg.seed)
    n, r = cfg.n_subjects, cfg.repeats
    beta = rng.normal(0.0, np.sqrt(cfg.sigma2_beta), size=n)
    subject = np.repeat(np.arange(n), r)
    eta = np.exp(cfg.alpha + beta[subject])
    x = rng.poisson(eta)
    if cfg.mechanism == 'wh08':
        y = np.array([wh08_report(int(xn), cfg.gamma, cfg.grids, rng) for xn in x])
    else:
        y = sample_reporting(x, cfg.heap_params, rng, cfg=solver)

    data = PanelData.from_arrays(subject_ids=subject, time=np.tile(np.arange(r), n), y=y)
    truth = ModelParams(alpha=np.array([cfg.alpha]), beta=beta[:, None],
                        sigma_beta=np.array([[cfg.sigma2_beta]]), x=x,
                        gamma=np.array(cfg.gamma))
    if cfg.mechanism == 'bdp':
        truth.theta_disp = cfg.theta_disp
        truth.omega = np.array([np.log(cfg.theta_heap)]) if cfg.theta_heap > 0 else None
    logger.info("Simulated %d subjects x %d repeats (%s); mean X %.2f, mean Y %.2f",
                n, r, cfg.mechanism, x.mean(), y.mean())
    return data, truth


def panel_frame(data: PanelData) -> pd.DataFrame:
    """
    One row per observation with the canonical column names. Covariates are
    written with their w_/z_/h_ prefixes (H repeated per observation), so
    ingest_csv reads the same design back.
    """
    frame = pd.DataFrame({
        'subject_id': data.subject_ids[data.subject],
        'time_index': data.time,
        'y': data.y,
    })
    blocks = (('w_', data.W, data.w_names), ('z_', data.Z, data.z_names),
              ('h_', data.H[data.subject], data.h_names))
    for prefix, matrix, names in blocks:
        for k in range(1, matrix.shape[1]):  # column 0 is the intercept
            name = names[k] if k < len(names) else f'x{k}'
            frame[prefix + name] = matrix[:, k]
    return frame


def write_panel(data: PanelData, path: str, truth: Optional[ModelParams] = None,
                sim: Optional[SimConfig] = None) -> str:
    """Write the panel CSV and, with a ground truth, a `<path>.truth.json` sidecar."""
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    panel_frame(data).to_csv(path, index=False)
    if truth is not None:
        sidecar = f"{os.path.splitext(path)[0]}.truth.json"
        with open(sidecar, 'w') as fh:
            json.dump({'simulation': sim.to_dict() if sim else None,
                       'truth': truth.to_record()}, fh, indent=2)
        return sidecar
    return path
