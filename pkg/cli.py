"""
cli.py - Command-line front door for the lab

Usage:
    python3 cli.py <command> [--config cfg.json] [--grid N] [--seed S] [--jobs J]
                             [--out DIR] [--plots DIR]

Commands:
    validate          check every configured coefficient pair against the a priori bounds
    solve             manufactured-solution convergence plus one Dirichlet solve per pair
    green             Green field of the reference pair for one source
    kernel-ray        the biphase kernel H along a ray
    cauchy-distance   d(C1, C2) for the reference and perturbed pairs
    singular          S_k and its derivatives, blow-up near the next interface, Green identity
    asymptotics       fitted exponents of G - H across an interface
    three-spheres     three-sphere constants over random solutions, ball chain budget
    sweep             E against d over random perturbations
    boundary-holder   boundary sups against d, fitted Holder exponent
    report            collate the JSON outputs into report.md

Each command writes into <out>/<command>/. Exit status is 0 on success, 2 for config
errors and 3 when an eigenvalue-regime warning is escalated (regime_policy 'abort').
"""
import argparse
import json
import math
import os
import sys
import warnings

import numpy as np

from cauchy import (alessandrini_gap, distance_versus_modes, sample_cauchy_space, save_subspace,
                    sine_modes, subspace_distance)
from coefficients import constant_pair, validate
from config import ConfigError, build_domain, build_pair, load_config, parse_point, read_pair_spec
from fundamental import build_biphase, sample_ray
from geometry import ball_chain
from green_cache import GreenCache, default_cache_dir
from plot_sweep import plot_histogram, plot_loglog_rows, plot_ratio, plot_sweep
from singular import green_identity_residual, singular_blowup, singular_evaluation, singular_problem
from solver import (EigenvalueRegimeError, EigenvalueRegimeWarning, assemble, conormal_trace,
                    green_bound, make_grid, manufactured_error, solve_dirichlet, solve_green, write_field)
from stability import (asymptotic_exponent_fit, omega, optimal_radius, propagation_bound,
                       three_sphere_ensemble, uc_budget)
from sweep import boundary_holder_experiment, lipschitz_sweep
from writer import ResultWriter

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REGIME = 3


def _pair(config, name, domain, extended=False):
    if name not in config['pairs']:
        raise ConfigError(f"Unknown coefficient pair: {name}")
    return build_pair(config['pairs'][name], domain, extended)


def _cache(config):
    return GreenCache(default_cache_dir(config.get('cache_dir')))


def _dirichlet_policy(config):
    return 'abort' if config.get('regime_policy') == 'abort' else 'warn'


def cmd_validate(config, writer, plots_dir):
    domain = build_domain(config)
    for name in sorted(config['pairs']):
        report = validate(_pair(config, name, domain), domain, config.get('validate'))
        writer.write_json(f"validate_{name}.json", report.to_dict())
        status = "PASS" if report.passed else f"FAIL ({len(report.violations)} violations)"
        print(f"  {name}: {status}")
        for v in report.violations:
            writer.event("violation", f"{name}: {v['check']}: {v['message']}", level="warning")
    return EXIT_OK


def _sine_product(domain):
    """Exact solution prod sin(pi (x_i - l_i) / L_i) vanishing on the box, and its forcing."""
    lower = np.asarray(domain.box.lower)
    size = np.asarray(domain.box.size)
    k2 = float(np.sum((math.pi / size) ** 2))

    def exact(x):
        return np.prod(np.sin(math.pi * (x - lower) / size), axis=-1)

    def forcing(x):
        return -k2 * exact(x)
    return exact, forcing


def cmd_solve(config, writer, plots_dir):
    domain = build_domain(config)
    exact, forcing = _sine_product(domain)
    homogeneous = constant_pair(domain.N)

    print("Manufactured-solution convergence...")
    rows = []
    for resolution in config['solve'].get('convergence_grids', [8, 16, 32]):
        grid = make_grid(domain, resolution, include_d0=False)
        op = assemble(domain, homogeneous, grid, 'cauchy', config.get('solver'))
        max_err, l2_err = manufactured_error(op, exact, forcing)
        row = {'grid': resolution, 'h': grid.h, 'max_error': max_err, 'l2_error': l2_err, 'order': math.nan}
        if rows:
            row['order'] = math.log(rows[-1]['max_error'] / max_err) / math.log(rows[-1]['h'] / grid.h)
        rows.append(row)
        print(f"  grid {resolution}: max error {max_err:.3e}")
    writer.write_csv("convergence.csv", rows)

    grid = make_grid(domain, config['grid'], include_d0=False)
    f = sine_modes(grid.patch_shape, 1)[0][0]
    records = {'convergence': rows, 'solves': {}}
    for name in sorted(config['pairs']):
        op = assemble(domain, _pair(config, name, domain), grid, 'cauchy', config.get('solver'))
        solution = solve_dirichlet(op, f, policy=_dirichlet_policy(config))
        write_field(writer.path_for(f"{name}.field"), solution.values, grid)
        traces = [{'node': i, 'f': fi, 'flux': a, 'second_order': b} for i, (fi, a, b) in enumerate(zip(
            f, conormal_trace(op, solution.values, f, scheme='flux'),
            conormal_trace(op, solution.values, f, scheme='second_order')))]
        writer.write_csv(f"{name}_trace.csv", traces)
        records['solves'][name] = {'regime': solution.regime, 'max_abs': float(np.abs(solution.values).max())}
    writer.write_json("solve.json", records)
    return EXIT_OK


def cmd_green(config, writer, plots_dir):
    domain = build_domain(config)
    green_cfg = config['green']
    pair = _pair(config, 'reference', domain, extended=True)
    grid = make_grid(domain, config['grid'], include_d0=True)
    op = assemble(domain, pair, grid, green_cfg.get('bc', 'green'), config.get('solver'))
    cache = _cache(config)
    try:
        field = solve_green(op, green_cfg['source'], cache=cache)
        write_field(writer.path_for("green.field"), field.values, grid)
        record = {
            'source': list(field.source),
            'cell': list(field.cell),
            'h': grid.h,
            'unknowns': op.n,
            'bound': green_bound(field, green_cfg.get('min_cells', 4)),
            'cache_hits': cache.hits,
        }
    finally:
        cache.close()
    print(f"  sup |G| |x - y| = {record['bound']:.4g}")
    writer.write_json("green.json", record)
    return EXIT_OK


def cmd_kernel_ray(config, writer, plots_dir):
    ray = config['kernel_ray']
    bp = build_biphase(ray['A0'], ray['gamma_plus'], ray['gamma_minus'])
    rows = sample_ray(bp, ray['y'], ray['origin'], ray['direction'], ray['ts'])
    writer.write_csv("kernel_ray.csv", rows)
    return EXIT_OK


def cmd_cauchy_distance(config, writer, plots_dir):
    domain = build_domain(config)
    grid = make_grid(domain, config['grid'], include_d0=False)
    cauchy_cfg = config['cauchy']
    policy = config.get('regime_policy', 'skip')
    M = cauchy_cfg['modes']
    spaces = {}
    for name in ('reference', 'perturbed'):
        norm = spaces['reference'].norm if spaces else None
        spaces[name] = sample_cauchy_space(domain, _pair(config, name, domain), grid, M, norm=norm, policy=policy,
                                           jobs=config.get('jobs', 1), writer=writer, options=cauchy_cfg)
    C1, C2 = spaces['reference'], spaces['perturbed']
    if C1.dim == 0 or C2.dim == 0:
        writer.write_json("cauchy_distance.json", {'skipped': True, 'modes': M})
        return EXIT_OK

    for name, C in spaces.items():
        save_subspace(writer.path_for(f"{name}.subspace"), C)
    d = subspace_distance(C1, C2)
    d_sym = subspace_distance(C1, C2, symmetric=True)
    modes_list = sorted({m for m in (1, 2, 4, 8, M) if m <= min(C1.dim, C2.dim)})
    rows = distance_versus_modes(C1, C2, modes_list)
    writer.write_csv("cauchy_modes.csv", rows)
    gap = alessandrini_gap(C1.solutions[0], C2.solutions[0], d_sym, C1.norm, trace=cauchy_cfg.get('trace'))
    print(f"  d = {d:.6g}, symmetric d = {d_sym:.6g}")
    writer.write_json("cauchy_distance.json", {
        'modes': M, 'kept': [C1.dim, C2.dim], 'd': d, 'd_sym': d_sym,
        'gram_cond': [C1.gram_cond, C2.gram_cond], 'gap': gap.to_dict(),
    })
    return EXIT_OK


def cmd_singular(config, writer, plots_dir):
    domain = build_domain(config)
    s = config['singular']
    k = s['k']
    cache = _cache(config)
    try:
        problem = singular_problem(domain, _pair(config, 'reference', domain), _pair(config, 'perturbed', domain),
                                   config['grid'], bc=s.get('bc'), cache=cache, solver_options=config.get('solver'))
        evaluation = singular_evaluation(problem, k, s['y'], s['z'], derivatives=s.get('derivatives', True))
        blowup = singular_blowup(problem, k, s['blowup_radii_cells'])
        identity = green_identity_residual(problem, k, s['identity_y'], s['identity_z'])
    finally:
        cache.close()
    print(f"  S_{k}(y, z) = {evaluation.value}")
    print(f"  blow-up slope {blowup['slope']:.3f}, identity residual {identity.residual:.3g}")
    writer.write_csv("singular_blowup.csv", blowup['rows'])
    writer.write_json("singular.json", {
        'evaluation': evaluation.to_dict(),
        'blowup': {key: v for key, v in blowup.items() if key != 'rows'},
        'identity': identity.to_dict(),
    })
    if plots_dir:
        plot_loglog_rows(blowup['rows'], 'r', ['abs_value'], plots_dir, 'blowup.svg',
                         f"|S_{k}(y, y)| near the interface", 'distance to U_k')
    return EXIT_OK


def cmd_asymptotics(config, writer, plots_dir):
    domain = build_domain(config)
    a = config['asymptotics']
    cache = _cache(config)
    try:
        result = asymptotic_exponent_fit(domain, _pair(config, a.get('pair', 'jump'), domain), config['grid'],
                                         interface=a['interface'], radii_cells=a['radii_cells'],
                                         estimates=a.get('estimates'), cache=cache,
                                         solver_options=config.get('solver'), options={'bc': a.get('bc', 'green')},
                                         jobs=config.get('jobs', 1))
    finally:
        cache.close()
    for name, fit in result['fits'].items():
        low, high = fit['theta_ci']
        print(f"  {name}: slope {fit['slope']:.3f}, theta {fit['theta']:.3f} [{low:.3f}, {high:.3f}]")
    writer.write_csv("asymptotics.csv", result['rows'])
    writer.write_json("asymptotics.json", {key: v for key, v in result.items() if key != 'rows'})
    if plots_dir:
        plot_loglog_rows(result['rows'], 'distance', [f"{name}_diff" for name in result['fits']], plots_dir,
                         'asymptotics.svg', 'Derivatives of G - H across the interface', '|x - y|')
    return EXIT_OK


def cmd_three_spheres(config, writer, plots_dir):
    domain = build_domain(config)
    t = config['three_spheres']
    grid = make_grid(domain, config['grid'], include_d0=False)
    result = three_sphere_ensemble(domain, _pair(config, 'reference', domain), grid, t['center'], t['r3'],
                                   t['ensemble'], modes=t.get('modes', 8), seed=config.get('seed', 42),
                                   policy=config.get('regime_policy', 'skip'), jobs=config.get('jobs', 1),
                                   writer=writer)
    if result is None:
        writer.write_json("three_spheres.json", {'skipped': True})
        return EXIT_OK
    r1 = result['radii'][0]
    writer.write_csv("three_spheres.csv", [dict(c.to_dict(), sample=i) for i, c in enumerate(result['checks'])])

    start = (domain.sigma.center[0], domain.sigma.center[1], domain.box.lower[2] - 0.5 * domain.depth)
    record = {key: v for key, v in result.items() if key not in ('checks', 'constants')}
    try:
        chain = ball_chain(domain, start, t['chain_target'], r1, grid.h)
        budget = uc_budget(r1, t.get('r', r1), len(chain))
        record['chain'] = [list(c) for c in chain]
        record['budget'] = budget.to_dict()
        record['propagation_factor'] = propagation_bound(math.exp(-4.0), 1.0 - math.exp(-4.0), budget)
    except ValueError as e:
        writer.event("ball_chain_failed", str(e), level="warning")
        record['chain'] = None
    print(f"  beta = {result['beta']:.4f}, C_inf = {result['C_inf']:.4g}, p99/median = {result['tightness']:.3g}")
    writer.write_json("three_spheres.json", record)
    if plots_dir:
        plot_histogram(list(result['constants']), plots_dir, 'three_spheres.svg',
                       'Fitted three-sphere constants', 'C')
    return EXIT_OK


def cmd_sweep(config, writer, plots_dir):
    result = lipschitz_sweep(config, writer)
    writer.write_csv("summary_aggregated.csv", result.summary['aggregated'])
    print(f"  max E/d = {result.max_ratio:.4g}")
    if result.fit is not None:
        print(f"  log E vs log d slope = {result.fit['slope']:.4f}")
    if plots_dir and result.included():
        points = [{'magnitude': r['magnitude'], 'd': r['d'], 'E': r['E']} for r in result.included()]
        plot_sweep(points, result.fit, plots_dir)
        plot_ratio(result.summary['aggregated'], plots_dir)
    return EXIT_OK


def cmd_boundary_holder(config, writer, plots_dir):
    result = boundary_holder_experiment(config, writer)
    if plots_dir and result.included():
        points = [{'magnitude': r['magnitude'], 'd': r['d'], 'E': r['boundary_sup']} for r in result.included()]
        plot_sweep(points, result.fit, plots_dir, ylabel='sup on Sigma', name='boundary_holder.svg')
    return EXIT_OK


def _load(out_dir, command, name):
    path = os.path.join(out_dir, command, name)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return json.load(f)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, dict) and set(value) == {'real', 'imag'}:
        return f"{value['real']:.6g}{value['imag']:+.6g}j"
    return str(value)


def build_report(out_dir):
    """Markdown with one section per estimate; missing outputs are listed as not run."""
    lines = ["# Stability lab report", ""]

    def section(title, record, keys):
        lines.append(f"## {title}")
        lines.append("")
        if record is None:
            lines.append("_not run_")
        else:
            for key in keys:
                value = record
                for part in key.split('.'):
                    value = value.get(part) if isinstance(value, dict) else None
                lines.append(f"- {key}: {_fmt(value)}")
        lines.append("")

    section("Green function bound", _load(out_dir, 'green', 'green.json'), ['bound', 'h'])
    section("Dirichlet solves", _load(out_dir, 'solve', 'solve.json'), ['solves'])
    section("Cauchy data distance", _load(out_dir, 'cauchy-distance', 'cauchy_distance.json'),
            ['modes', 'd', 'd_sym', 'gap.lhs', 'gap.rhs', 'gap.violated'])
    section("Singular solution", _load(out_dir, 'singular', 'singular.json'),
            ['evaluation.value', 'blowup.slope', 'blowup.stderr', 'identity.residual'])
    asym = _load(out_dir, 'asymptotics', 'asymptotics.json')
    section("Asymptotics of G - H", asym,
            [f"fits.{name}.{key}" for name in sorted((asym or {}).get('fits', {}))
             for key in ('slope', 'theta', 'theta_ci')])
    section("Three-sphere inequality and propagation", _load(out_dir, 'three-spheres', 'three_spheres.json'),
            ['beta', 'C_inf', 'median', 'p99', 'tightness', 'tight', 'budget.tau', 'budget.N1', 'budget.exponent',
             'propagation_factor'])
    section("Lipschitz sweep", _load(out_dir, 'sweep', 'sweep_summary.json'),
            ['n_included', 'max_ratio', 'fit.slope', 'fit.ci_low', 'fit.ci_high', 'slope_ok', 'trend.slope',
             'trend.diverging'])
    section("Boundary Holder estimate", _load(out_dir, 'boundary-holder', 'boundary_holder.json'),
            ['n_included', 'eta', 'eta_ok', 'constant'])

    lines.append("## Modulus of continuity")
    lines.append("")
    lines.append("| eta | j | omega^(j)(e^-4) |")
    lines.append("|---|---|---|")
    for eta in (0.5, 1.0):
        for j in (0, 1, 2, 3):
            lines.append(f"| {eta:g} | {j} | {omega(math.exp(-4.0), eta, j):.6g} |")
    lines.append("")
    budget = uc_budget(1.0, 1.0, 1)
    lines.append(f"tau at r = r1 = 1: {budget.tau:.6f}; optimal radius for ratio e^-4, theta 0.5: "
                 f"{optimal_radius(math.exp(-4.0), 0.5):.6f}")
    lines.append("")
    return "\n".join(lines)


def cmd_report(config, writer, plots_dir):
    out_dir = os.path.dirname(writer.out_dir.rstrip(os.sep)) or '.'
    path = writer.write_text("report.md", build_report(out_dir))
    print(f"  Report: {path}")
    return EXIT_OK


COMMANDS = {
    'validate': cmd_validate,
    'solve': cmd_solve,
    'green': cmd_green,
    'kernel-ray': cmd_kernel_ray,
    'cauchy-distance': cmd_cauchy_distance,
    'singular': cmd_singular,
    'asymptotics': cmd_asymptotics,
    'three-spheres': cmd_three_spheres,
    'sweep': cmd_sweep,
    'boundary-holder': cmd_boundary_holder,
    'report': cmd_report,
}


def get_command(name):
    if name not in COMMANDS:
        raise ValueError(f"Unknown command: {name}")
    return COMMANDS[name]


def build_parser():
    parser = argparse.ArgumentParser(description="Lipschitz stability lab")
    parser.add_argument('command', choices=list(COMMANDS))
    parser.add_argument('--config', help="JSON config file (defaults are used for missing sections)")
    parser.add_argument('--grid', type=int, help="cells across the height of Omega")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--jobs', type=int)
    parser.add_argument('--out', help="output directory")
    parser.add_argument('--plots', help="directory for SVG plots")
    parser.add_argument('--pair1', help="JSON file replacing the reference pair")
    parser.add_argument('--pair2', help="JSON file replacing the perturbed pair")
    parser.add_argument('--modes', type=int, help="boundary modes M for cauchy-distance and sweeps")
    parser.add_argument('--k', type=int, help="chain index for singular")
    parser.add_argument('--y', help="first source for singular, as x,y,z")
    parser.add_argument('--z', help="second source for singular, as x,y,z")
    return parser


def apply_flags(config, args):
    """Command-specific flags on top of the loaded config."""
    if args.pair1:
        config['pairs']['reference'] = read_pair_spec(args.pair1)
    if args.pair2:
        config['pairs']['perturbed'] = read_pair_spec(args.pair2)
    if args.modes is not None:
        if args.modes < 1:
            raise ConfigError(f"--modes must be at least 1, got {args.modes}")
        config['cauchy']['modes'] = args.modes
    if args.k is not None:
        config['singular']['k'] = args.k
    if args.y:
        config['singular']['y'] = parse_point(args.y)
    if args.z:
        config['singular']['z'] = parse_point(args.z)
    return config


def run(command, config, plots_dir=None):
    """Run one command; returns the exit status."""
    writer = ResultWriter(os.path.join(config.get('out_dir', 'results'), command), command=command)
    writer.event("start", json.dumps({'grid': config['grid'], 'seed': config['seed'], 'jobs': config['jobs']}))
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EigenvalueRegimeWarning)
            status = get_command(command)(config, writer, plots_dir)
        for w in caught:
            if issubclass(w.category, EigenvalueRegimeWarning):
                writer.event("eigenvalue_regime", str(w.message), level="warning")
    except ValueError as e:
        # ConfigError, or a setup the modules reject (bad radii, slabs, points)
        writer.event("config_error", str(e), level="error")
        print(f"Config error: {e}")
        return EXIT_CONFIG
    except EigenvalueRegimeError as e:
        writer.event("eigenvalue_regime", str(e), level="error")
        print(f"Aborted: {e}")
        return EXIT_REGIME
    writer.event("done")
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {'grid': args.grid, 'seed': args.seed, 'jobs': args.jobs, 'out_dir': args.out}
    try:
        config = apply_flags(load_config(args.config, overrides), args)
    except ConfigError as e:
        print(f"Config error: {e}")
        return EXIT_CONFIG

    print(f"Running {args.command}...")
    status = run(args.command, config, args.plots)
    if status == EXIT_OK and args.command != 'report':
        print(f"\nNext step:")
        print(f"  python3 cli.py report --out {config.get('out_dir', 'results')}")
    return status


if __name__ == "__main__":
    sys.exit(main())
