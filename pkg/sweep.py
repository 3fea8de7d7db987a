"""
sweep.py - Stability sweeps: perturb the coefficients, measure E and d(C1, C2)

Two experiments:
- lipschitz_sweep             E = sup of the coefficient differences over Omega against
                              the Cauchy data distance d; E/d should stay bounded
- boundary_holder_experiment  the same with the sups taken on Sigma only; the fitted
                              log-log slope is the Holder exponent

The reference Cauchy subspace C1 is computed once. Every sample is independent and
may run on its own worker thread; records are merged by sample id, so the output
does not depend on the number of jobs.
"""
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from analyze_sweep import fit_loglog, summarize
from cauchy import CAUCHY_DEFAULTS, distance_versus_modes, sample_cauchy_space, subspace_distance
from coefficients import error_functionals
from config import build_domain, build_pair, load_config
from perturbations import create_perturbations, sweep_perturbations
from solver import assemble, make_grid
from writer import ResultWriter

RECORD_FIELDS = ['sample_id', 'magnitude', 'perturbation', 'E', 'd', 'ratio', 'status', 'modes_kept']
HOLDER_FIELDS = ['sample_id', 'magnitude', 'perturbation', 'boundary_sup', 'E', 'd', 'status']

# d at or below this counts as identical Cauchy data
ZERO_DISTANCE = 1e-12

HOLDER_EXPONENT_MAX = 1.15


@dataclass
class SweepResult:
    records: list
    summary: dict
    modes_study: list = field(default_factory=list)

    @property
    def max_ratio(self):
        return self.summary['max_ratio']

    @property
    def fit(self):
        return self.summary['fit']

    def included(self):
        return [r for r in self.records if r['status'] == 'included']


class SweepContext:
    """The pieces every sample shares: domain, reference pair, Cauchy grid and C1."""
    def __init__(self, config, writer=None):
        self.config = config
        self.writer = writer
        self.domain = build_domain(config)
        self.reference = build_pair(config['pairs']['reference'], self.domain)
        self.grid = make_grid(self.domain, config.get('grid', 32), include_d0=False)
        self.solver_options = config.get('solver', {})
        self.cauchy_options = dict(CAUCHY_DEFAULTS)
        self.cauchy_options.update(config.get('cauchy', {}))
        self.modes = self.cauchy_options['modes']
        self.policy = config.get('regime_policy', 'skip')
        self.jobs = int(config.get('jobs', 1))

        op = assemble(self.domain, self.reference, self.grid, 'cauchy', self.solver_options)
        self.C1 = sample_cauchy_space(self.domain, self.reference, self.grid, self.modes, op=op,
                                      policy=self.policy, jobs=self.jobs, writer=writer,
                                      options=self.cauchy_options)
        if self.C1.dim == 0:
            raise ValueError("The reference pair has no usable Cauchy data (eigenvalue regime)")
        self.norm = self.C1.norm

    def cauchy_space(self, pair):
        op = assemble(self.domain, pair, self.grid, 'cauchy', self.solver_options)
        return sample_cauchy_space(self.domain, pair, self.grid, self.modes, op=op, norm=self.norm,
                                   policy=self.policy, writer=self.writer, options=self.cauchy_options)

    def event(self, event, detail="", level="info"):
        if self.writer is not None:
            self.writer.event(event, detail, level)


def classify(E, d):
    """Sample status: included, excluded_zero (d = 0 or E = 0) or excluded_far (d >= 1)."""
    if d <= ZERO_DISTANCE or E == 0.0:
        return 'excluded_zero'
    if d >= 1.0:
        return 'excluded_far'
    return 'included'


def run_one_sample(context, perturbation, measure):
    """
    Perturb the reference pair, sample its Cauchy data and measure against C1.

    measure(pair1, pair2) -> E
    """
    pair2 = perturbation.apply(context.reference)
    record = {
        'sample_id': perturbation.sample_id,
        'magnitude': perturbation.magnitude,
        'perturbation': perturbation.to_json(),
        'E': float(measure(context.reference, pair2)),
        'd': math.nan,
        'ratio': math.nan,
        'status': 'skipped_regime',
        'modes_kept': 0,
    }
    C2 = context.cauchy_space(pair2)
    if C2.dim == 0:
        return record, None
    d = subspace_distance(context.C1, C2)
    record['d'] = d
    record['modes_kept'] = C2.dim
    record['status'] = classify(record['E'], d)
    if record['status'] == 'included':
        record['ratio'] = record['E'] / d
    return record, C2


def run_samples(context, perturbations, measure):
    """All samples, in sample order, on `jobs` worker threads."""
    def one(perturbation):
        return run_one_sample(context, perturbation, measure)

    if context.jobs <= 1:
        results = [one(p) for p in perturbations]
    else:
        with ThreadPoolExecutor(max_workers=context.jobs) as pool:
            results = list(pool.map(one, perturbations))

    for (record, _), p in zip(results, perturbations):
        print(f"  Sample {record['sample_id']}: magnitude={p.magnitude:g} "
              f"E={record['E']:.4g} d={record['d']:.4g} ({record['status']})")
        if record['status'] != 'included':
            context.event("sample_excluded", f"sample {record['sample_id']}: {record['status']}", level="warning")
    return results


def modes_study(context, C2, modes_list=None):
    """d against the number of boundary modes kept, for one sample's subspace."""
    if modes_list is None:
        modes_list = [m for m in (2, 4, 8, 16, 32) if m < context.modes] + [context.modes]
    modes_list = [m for m in modes_list if m <= min(context.C1.dim, C2.dim)]
    if not modes_list:
        return []
    return distance_versus_modes(context.C1, C2, modes_list)


def lipschitz_sweep(config, writer=None):
    """
    E against d(C1, C2) for perturbations of the reference pair.

    E is the sup of |gamma1 - gamma2| and |q1 - q2| over Omega (exact, by vertex
    enumeration). Samples with d = 0 or d >= 1 are logged and left out of the fit.
    """
    print("Setting up the reference Cauchy data...")
    context = SweepContext(config, writer)
    sweep_cfg = config.get('sweep', {})
    perturbations = sweep_perturbations(sweep_cfg, context.domain, config.get('seed', 42))
    print(f"Running {len(perturbations)} samples with M = {context.modes} boundary modes")

    def measure(pair1, pair2):
        return error_functionals(pair1, pair2, context.domain, context.domain.N).E

    results = run_samples(context, perturbations, measure)
    records = [r for r, _ in results]
    summary = summarize(records, drop_smallest=sweep_cfg.get('drop_smallest', 0))
    summary['modes'] = context.modes
    summary['grid'] = context.grid.to_dict()

    # M-convergence on the largest included sample
    study = []
    included = [(r, C2) for r, C2 in results if r['status'] == 'included']
    if included:
        record, C2 = max(included, key=lambda rc: (rc[0]['magnitude'], -rc[0]['sample_id']))
        study = [dict(row, sample_id=record['sample_id']) for row in modes_study(context, C2,
                                                                             sweep_cfg.get('modes_study'))]

    if writer is not None:
        writer.write_csv("sweep_records.csv", records, RECORD_FIELDS)
        writer.write_json("sweep_summary.json", summary)
        if study:
            writer.write_csv("sweep_modes.csv", study)
    return SweepResult(records=records, summary=summary, modes_study=study)


def boundary_sup(pair1, pair2, domain, samples_per_axis=17):
    """
    sup over Sigma of ||sigma1 - sigma2|| + sup over Sigma of |q1 - q2|.

    Both are taken from the slab-1 pieces on a grid of points covering Sigma,
    corners included (exact when A is the same on both sides).
    """
    x0, x1, y0, y1 = domain.sigma.bounds
    xs, ys = np.meshgrid(np.linspace(x0, x1, samples_per_axis), np.linspace(y0, y1, samples_per_axis),
                         indexing='ij')
    points = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, domain.sigma.height)], axis=-1)
    region = np.ones(len(points), dtype=int)
    g1, q1, A1 = pair1.cell_values(points, region)
    g2, q2, A2 = pair2.cell_values(points, region)
    dsigma = g1[:, None, None] * A1 - g2[:, None, None] * A2
    sigma_sup = float(np.max(np.linalg.norm(dsigma, ord=2, axis=(1, 2))))
    return sigma_sup + float(np.max(np.abs(q1 - q2)))


def boundary_holder_experiment(config, writer=None):
    """
    Boundary sups on Sigma against d(C1, C2) for perturbations supported near Sigma.

    One perturbation per magnitude. The log-log slope is the fitted exponent eta and
    C = max boundary_sup / ((d + E)^(1 - eta) d^eta) the fitted constant.
    """
    print("Setting up the reference Cauchy data...")
    context = SweepContext(config, writer)
    holder_cfg = config.get('boundary_holder', {})
    perturbations = create_perturbations(
        magnitudes=holder_cfg.get('magnitudes', [0.01, 0.02, 0.04, 0.08]),
        samples_per_magnitude=1,
        kind=holder_cfg.get('kind', 'sigma'),
        slabs=holder_cfg.get('slabs', [1]),
        domain=context.domain,
        affine=holder_cfg.get('affine', False),
        seed=config.get('seed', 42),
    )
    print(f"Running {len(perturbations)} boundary samples")

    def measure(pair1, pair2):
        return boundary_sup(pair1, pair2, context.domain)

    results = run_samples(context, perturbations, measure)
    records = []
    for (r, _), p in zip(results, perturbations):
        E = error_functionals(context.reference, p.apply(context.reference), context.domain, context.domain.N).E
        records.append({'sample_id': r['sample_id'], 'magnitude': r['magnitude'],
                        'perturbation': r['perturbation'], 'boundary_sup': r['E'], 'E': E,
                        'd': r['d'], 'status': r['status']})

    included = [r for r in records if r['status'] == 'included']
    summary = {'n_records': len(records), 'n_included': len(included), 'fit': None,
               'eta': math.nan, 'constant': math.nan, 'eta_ok': False}
    if len(included) >= 3:
        fit = fit_loglog([r['d'] for r in included], [r['boundary_sup'] for r in included])
        eta = fit['slope']
        summary['fit'] = fit
        summary['eta'] = eta
        summary['eta_ok'] = bool(0 < eta <= HOLDER_EXPONENT_MAX)
        if eta > 0:
            summary['constant'] = max(r['boundary_sup'] / ((r['d'] + r['E']) ** (1.0 - min(eta, 1.0))
                                                           * r['d'] ** min(eta, 1.0)) for r in included)
        print(f"Fitted boundary exponent eta = {eta:.4f}")
    else:
        print("Fewer than 3 usable samples; no exponent fitted")

    if writer is not None:
        writer.write_csv("boundary_holder.csv", records, HOLDER_FIELDS)
        writer.write_json("boundary_holder.json", summary)
    return SweepResult(records=records, summary=summary)


if __name__ == "__main__":
    config = load_config(sys.argv[1] if len(sys.argv) > 1 else None)
    out_dir = config.get('out_dir', 'results')
    lipschitz_sweep(config, ResultWriter(os.path.join(out_dir, 'sweep'), command='sweep'))
    print(f"\nNext step:")
    print(f"  python analyze_sweep.py {os.path.join(out_dir, 'sweep')}")
