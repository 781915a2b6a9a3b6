"""
Heaping Lab - Command Line Interface
====================================
heapctl commands:

    simulate   write a simulated panel CSV (+ ground-truth sidecar)
    fit        run the sampler on a panel CSV and write chains + FitReport
    diagnose   summarize a finished run directory, export traces
    pmf        print the reporting pmf g(y|x) as CSV

Exit status: 0 success, 2 bad input or configuration, 3 sampler abort,
1 any other library failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from core.heap_datagen import SimConfig, simulate_panel, write_panel
from core.heap_engine import SolverConfig
from core.heap_errors import DomainError, HeapError, IngestionError, SamplerAbort
from core.heap_fitstats import FitReport, latent_summary, parameter_draws, summarize, trace_frame
from core.heap_model import Hyperparams, ModelParams, ModelVariant, PanelData
from core.heap_report import HeapParams, rate_table, reporting_pmf
from core.heap_sampler import Chain, SamplerConfig, run_chains

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ('subject_id', 'time_index', 'y')
# Covariate columns are routed by prefix: w_ fixed effects, z_ random effects, h_ heaping
PREFIXES = {'w_': 'W', 'z_': 'Z', 'h_': 'H'}
MANIFEST = 'manifest.json'


# ============================================
# INGESTION
# ============================================

def _integer_column(frame: pd.DataFrame, column: str, nonnegative: bool) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors='coerce')
    for idx, (raw, value) in enumerate(zip(frame[column], values)):
        line = idx + 2  # header is line 1
        if pd.isna(value) or not np.isfinite(value) or float(value) != int(value):
            raise IngestionError(f"Expected an integer, got {raw!r}", row=line, column=column)
        if nonnegative and value < 0:
            raise IngestionError(f"Expected a nonnegative count, got {raw!r}", row=line,
                                 column=column)
    return values.astype(int).to_numpy()


def _design(frame: pd.DataFrame, columns: List[str]) -> np.ndarray:
    """Numeric covariates; non-binary columns are standardized, 0/1 flags kept."""
    if not columns:
        return np.zeros((len(frame), 0))
    block = frame[columns].apply(pd.to_numeric, errors='coerce')
    bad = block.isna().to_numpy()
    if bad.any():
        idx, col = np.argwhere(bad)[0]
        raise IngestionError(f"Non-numeric covariate {frame[columns[col]].iloc[idx]!r}",
                             row=int(idx) + 2, column=columns[col])
    values = block.to_numpy(dtype=float)
    continuous = [k for k in range(values.shape[1])
                  if not set(np.unique(values[:, k])) <= {0.0, 1.0}]
    if continuous:
        values[:, continuous] = StandardScaler().fit_transform(values[:, continuous])
    return values


def ingest_csv(path: str) -> PanelData:
    """
    Read and validate a panel CSV. Required columns: subject_id, time_index, y.
    Columns prefixed w_, z_ and h_ become fixed-effect, random-effect and
    heaping covariates; h_ columns must be constant within a subject.
    """
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise IngestionError(f"Data file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IngestionError(f"Unreadable CSV {path}: {exc}") from None
    for column in REQUIRED_COLUMNS:
        if column not in frame.columns:
            raise IngestionError("Missing required column", column=column)
    if len(frame) == 0:
        raise IngestionError(f"No observations in {path}")

    y = _integer_column(frame, 'y', nonnegative=True)
    time_index = _integer_column(frame, 'time_index', nonnegative=False)
    routed = {target: [c for c in frame.columns if c.startswith(prefix)]
              for prefix, target in PREFIXES.items()}

    raw_ids = frame['subject_id']
    if not pd.api.types.is_integer_dtype(raw_ids):
        raw_ids = raw_ids.astype(str)
    labels, codes = np.unique(raw_ids.to_numpy(), return_inverse=True)
    n = len(frame)
    W = np.column_stack([np.ones(n), _design(frame, routed['W'])])
    Z = np.column_stack([np.ones(n), _design(frame, routed['Z'])])
    H_obs = _design(frame, routed['H'])
    H = np.ones((len(labels), 1 + H_obs.shape[1]))
    for k, column in enumerate(routed['H']):
        per_subject = pd.Series(H_obs[:, k]).groupby(codes).nunique()
        if (per_subject > 1).any():
            first = int(np.flatnonzero(codes == per_subject.index[per_subject > 1][0])[0])
            raise IngestionError("Heaping covariate varies within a subject",
                                 row=first + 2, column=column)
        H[:, k + 1] = pd.Series(H_obs[:, k]).groupby(codes).first().to_numpy()

    strip = lambda cols: [c[2:] for c in cols]
    data = PanelData(subject=codes, time=time_index, y=y, W=W, Z=Z, H=H, subject_ids=labels,
                     w_names=['intercept'] + strip(routed['W']),
                     z_names=['intercept'] + strip(routed['Z']),
                     h_names=['intercept'] + strip(routed['H']))
    logger.info("Ingested %s: %d observations, %d subjects, d=%d c=%d h=%d", path,
                data.n_obs, data.n_subjects, data.d, data.c, data.h)
    return data


# ============================================
# CONFIGURATION
# ============================================

def load_config(path: Optional[str]) -> Dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise DomainError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DomainError(f"Config file {path} is not valid JSON: {exc}") from None
    unknown = set(config) - {'hyperparams', 'sampler', 'solver', 'simulation'}
    if unknown:
        raise DomainError(f"Unknown config sections: {sorted(unknown)}")
    return config


def config_hash(payload: Dict) -> str:
    """sha256 of the canonical JSON form."""
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunConfig:
    data: str
    out: str
    variant: ModelVariant = ModelVariant.HEAPING
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    hyper_overrides: Dict = field(default_factory=dict)
    config: Optional[str] = None
    force: bool = False

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)

    def hyperparams(self, data: PanelData) -> Hyperparams:
        grids = tuple(self.hyper_overrides.get('grids', Hyperparams.default().grids))
        base = Hyperparams.default(data.d, data.c, data.heap_design(self.variant).shape[1], grids)
        values = base.to_dict()
        values.update(self.hyper_overrides)
        return Hyperparams.from_dict(values)

    def fingerprint(self, data_digest: str) -> Dict:
        return {
            'variant': self.variant.value,
            'sampler': self.sampler.to_dict(),
            'solver': self.solver.to_dict(),
            'hyperparams': self.hyper_overrides,
            'data_sha256': data_digest,
        }

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'RunConfig':
        config = load_config(args.config)
        sampler = dict(config.get('sampler', {}))
        for flag, key in (('iterations', 'iterations'), ('burn_in', 'burn_in'), ('thin', 'thin'),
                          ('seed', 'seed'), ('chains', 'chains')):
            if getattr(args, flag) is not None:
                sampler[key] = getattr(args, flag)
        sampler.setdefault('dump_dir', args.out)
        try:
            return cls(data=args.data, out=args.out, variant=args.variant,
                       sampler=SamplerConfig.from_dict(sampler),
                       solver=SolverConfig.from_dict(config.get('solver', {})),
                       hyper_overrides=config.get('hyperparams', {}),
                       config=args.config, force=args.force)
        except TypeError as exc:
            raise DomainError(f"Bad configuration: {exc}") from None


# ============================================
# CHAIN FILES
# ============================================

def merge_chains(chains: Sequence[Chain]) -> Chain:
    """Pool samples of independent chains; acceptance rates are averaged."""
    first = chains[0]
    blocks = set().union(*(c.acceptance for c in chains))
    acceptance = {b: float(np.mean([c.acceptance[b] for c in chains if b in c.acceptance]))
                  for b in sorted(blocks)}
    return Chain(variant=first.variant,
                 samples=[s for c in chains for s in c.samples],
                 iterations=[i for c in chains for i in c.iterations],
                 acceptance=acceptance, step_sizes=first.step_sizes, seed=first.seed,
                 wall_time=sum(c.wall_time for c in chains), config=first.config)


def chain_frame(chain: Chain) -> pd.DataFrame:
    """Wide export: one row per kept sample, one column per scalar parameter."""
    frame = pd.DataFrame({'iteration': chain.iterations})
    for name, values in parameter_draws(chain).items():
        frame[name] = values
    if chain.variant.latent:
        x = chain.draws('x')
        frame = pd.concat([frame, pd.DataFrame(x, columns=[f'x[{n}]' for n in range(x.shape[1])])],
                          axis=1)
    return frame


def write_chain(chain: Chain, folder: str, index: int) -> List[str]:
    stem = os.path.join(folder, f'chain-{index}')
    with open(f'{stem}.ndjson', 'w') as fh:
        for it, sample in zip(chain.iterations, chain.samples):
            fh.write(json.dumps({'iteration': it, **sample.to_record()}) + '\n')
    chain_frame(chain).to_csv(f'{stem}.csv', index=False)
    with open(f'{stem}.meta.json', 'w') as fh:
        json.dump(chain.metadata(), fh, indent=2)
    return [f'{stem}.ndjson', f'{stem}.csv', f'{stem}.meta.json']


def read_chain(folder: str, index: int) -> Chain:
    stem = os.path.join(folder, f'chain-{index}')
    with open(f'{stem}.meta.json') as fh:
        meta = json.load(fh)
    samples, iterations = [], []
    with open(f'{stem}.ndjson') as fh:
        for line in fh:
            record = json.loads(line)
            iterations.append(record.pop('iteration'))
            samples.append(ModelParams.from_record(record))
    return Chain(variant=ModelVariant.parse(meta['variant']), samples=samples,
                 iterations=iterations, acceptance=meta['acceptance'],
                 step_sizes=meta['step_sizes'], seed=meta['seed'], wall_time=meta['wall_time'],
                 config=SamplerConfig.from_dict(meta['config']))


def check_resume(out: str, digest: str, force: bool):
    path = os.path.join(out, MANIFEST)
    if not os.path.exists(path):
        return
    with open(path) as fh:
        previous = json.load(fh)
    if previous.get('config_hash') != digest and not force:
        raise DomainError(f"Refusing to reuse {out}: its manifest has config hash "
                          f"{previous.get('config_hash', '?')[:12]}, this run has {digest[:12]} "
                          f"(pass --force to overwrite)")


# ============================================
# COMMANDS
# ============================================

def cmd_fit(run: RunConfig) -> int:
    started = time.perf_counter()
    data = ingest_csv(run.data)
    hyper = run.hyperparams(data)
    digest = config_hash(run.fingerprint(file_digest(run.data)))
    check_resume(run.out, digest, run.force)
    os.makedirs(run.out, exist_ok=True)

    chains = run_chains(data, hyper, run.variant, run.sampler, run.solver)
    files = []
    for k, chain in enumerate(chains):
        files += write_chain(chain, run.out, k)
    pooled = merge_chains(chains)
    report = summarize(pooled, data, hyper.grids, seed=run.sampler.seed)
    report.to_json(os.path.join(run.out, 'report.json'))
    print(report.table())

    manifest = {
        'variant': run.variant.value,
        'data': os.path.abspath(run.data),
        'config': run.config,
        'config_hash': digest,
        'seed': run.sampler.seed,
        'chain_seeds': [c.seed for c in chains],
        'chains': len(chains),
        'fingerprint': run.fingerprint(file_digest(run.data)),
        'hyperparams': hyper.to_dict(),
        'files': [os.path.basename(f) for f in files] + ['report.json'],
        'wall_time': time.perf_counter() - started,
    }
    with open(os.path.join(run.out, MANIFEST), 'w') as fh:
        json.dump(manifest, fh, indent=2)
    logger.info("Run written to %s (config hash %s)", run.out, digest[:12])
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    values = dict(load_config(args.config).get('simulation', {}))
    for flag in ('subjects', 'repeats', 'seed', 'mechanism', 'theta_disp', 'theta_heap'):
        value = getattr(args, flag)
        if value is not None:
            values['n_subjects' if flag == 'subjects' else flag] = value
    sim = SimConfig.from_dict(values)
    data, truth = simulate_panel(sim)
    write_panel(data, args.out, truth, sim)
    print(f"Wrote {data.n_obs} observations for {data.n_subjects} subjects to {args.out}")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    with open(os.path.join(args.run, MANIFEST)) as fh:
        manifest = json.load(fh)
    chains = [read_chain(args.run, k) for k in range(manifest['chains'])]
    print("=" * 60)
    print(f"RUN {args.run}: {manifest['variant']}, {len(chains)} chain(s), "
          f"hash {manifest['config_hash'][:12]}")
    print("=" * 60)
    for k, chain in enumerate(chains):
        rates = ", ".join(f"{b}={r:.2f}" for b, r in chain.acceptance.items())
        print(f"  chain {k} (seed {chain.seed}): {len(chain)} samples; acceptance {rates}")
    pooled = merge_chains(chains)
    report_path = os.path.join(args.run, 'report.json')
    if os.path.exists(report_path):
        with open(report_path) as fh:
            print(FitReport(**json.load(fh)).table())
    else:
        print(summarize(pooled).table())
    trace_frame(pooled).to_csv(os.path.join(args.run, 'traces.csv'), index=False)
    if pooled.variant.latent and os.path.exists(manifest['data']):
        latent_summary(pooled, ingest_csv(manifest['data'])).to_csv(
            os.path.join(args.run, 'latent.csv'), index=False)
    return 0


def pmf_params(args: argparse.Namespace) -> HeapParams:
    grids = tuple(args.grids)
    if args.gamma is not None:
        return HeapParams(args.theta_disp, args.theta_heap, tuple(args.gamma), grids)
    if len(grids) == 1:
        return HeapParams.single_grid(args.theta_disp, args.theta_heap, grids[0])
    raise DomainError("--gamma is required with more than one grid")


def cmd_pmf(args: argparse.Namespace) -> int:
    params = pmf_params(args)
    g = reporting_pmf(params, args.x, max_y=args.max_y)
    probability = np.zeros(args.max_y + 1)
    shown = min(len(g), args.max_y + 1)
    probability[:shown] = g[:shown]
    frame = pd.DataFrame({'y': np.arange(args.max_y + 1), 'probability': probability})
    if args.rates:
        rates = rate_table(params, args.x, args.max_y)
        frame['birth'] = rates['birth']
        frame['death'] = rates['death']
    frame.to_csv(args.out or sys.stdout, index=False)
    return 0


# ============================================
# ENTRY POINT
# ============================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='heapctl', description=__doc__.split('\n\n')[0])
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    fit = commands.add_parser('fit', help='fit a model variant to a panel CSV')
    fit.add_argument('--data', required=True)
    fit.add_argument('--config')
    fit.add_argument('--variant', default='heaping', choices=[v.value for v in ModelVariant])
    fit.add_argument('--iterations', type=int)
    fit.add_argument('--burn-in', type=int, dest='burn_in')
    fit.add_argument('--thin', type=int)
    fit.add_argument('--seed', type=int)
    fit.add_argument('--chains', type=int)
    fit.add_argument('--out', required=True)
    fit.add_argument('--force', action='store_true', help='overwrite a run with another config')

    sim = commands.add_parser('simulate', help='simulate a heaped panel')
    sim.add_argument('--out', required=True)
    sim.add_argument('--config')
    sim.add_argument('--subjects', type=int)
    sim.add_argument('--repeats', type=int)
    sim.add_argument('--seed', type=int)
    sim.add_argument('--mechanism', choices=['bdp', 'wh08'])
    sim.add_argument('--theta-disp', type=float, dest='theta_disp')
    sim.add_argument('--theta-heap', type=float, dest='theta_heap')

    diag = commands.add_parser('diagnose', help='summarize a run directory')
    diag.add_argument('run')

    pmf = commands.add_parser('pmf', help='reporting pmf g(y|x) as CSV')
    pmf.add_argument('--theta-disp', type=float, required=True, dest='theta_disp')
    pmf.add_argument('--theta-heap', type=float, default=0.0, dest='theta_heap')
    pmf.add_argument('--gamma', type=float, nargs='+')
    pmf.add_argument('--grids', type=int, nargs='+', default=[5])
    pmf.add_argument('--x', type=int, required=True)
    pmf.add_argument('--max-y', type=int, required=True, dest='max_y')
    pmf.add_argument('--rates', action='store_true', help='add birth/death rate columns')
    pmf.add_argument('--out')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s [%(filename)s:%(lineno)s] %(message)s',
                        datefmt='%Y-%m-%d %H:%M:%S')
    try:
        if args.command == 'fit':
            return cmd_fit(RunConfig.from_args(args))
        if args.command == 'simulate':
            return cmd_simulate(args)
        if args.command == 'diagnose':
            return cmd_diagnose(args)
        return cmd_pmf(args)
    except SamplerAbort as exc:
        print(f"heapctl: sampler aborted: {exc}", file=sys.stderr)
        return 3
    except DomainError as exc:
        print(f"heapctl: {exc}", file=sys.stderr)
        return 2
    except HeapError as exc:
        print(f"heapctl: {exc}", file=sys.stderr)
        return 1
