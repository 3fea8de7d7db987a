"""
config.py - Reads run configs and fills in defaults

Configs are JSON files. Every section is optional; whatever is missing comes from
DEFAULT_CONFIG below. Two environment variables change a run:
- LAB_CACHE_DIR  where Green fields are cached (overrides 'cache_dir')
- CI             shrink every experiment to a minimal run
"""
import copy
import json
import os

from coefficients import extend_to_D0, pair_from_dict
from geometry import domain_from_dict

MIN_CLI_GRID = 16

DEFAULT_CONFIG = {
    # Unit box, two slabs, Sigma = [0.25, 0.75]^2 on the bottom face
    'geometry': {
        'box': {'lower': [0.0, 0.0, 0.0], 'upper': [1.0, 1.0, 1.0]},
        'r0': 0.75,
        'cuts': [0.5],
        'sigma': {'center': [0.5, 0.5], 'half_widths': [0.25, 0.25]},
        'depth': 0.25,
    },
    'pairs': {
        'reference': {'slabs': [{'a': 1.0}, {'a': 1.0}], 'A': {'name': 'identity'}},
        'perturbed': {'slabs': [{'a': 1.0}, {'a': 1.1}], 'A': {'name': 'identity'}},
        'jump': {'slabs': [{'a': 1.0}, {'a': 2.0}], 'A': {'name': 'identity'}},
    },
    'grid': 32,
    'seed': 42,
    'jobs': 1,
    'cache_dir': None,
    'out_dir': 'results',
    'regime_policy': 'skip',
    'solver': {},
    'validate': {},
    'solve': {
        'convergence_grids': [8, 16, 32],
    },
    'cauchy': {
        'modes': 16,
        'gram_cond_cap': 1e8,
        'max_nodes': 2500,
    },
    'green': {
        'source': [0.5, 0.5, -0.125],
        'min_cells': 4,
        'bc': 'green',
    },
    'kernel_ray': {
        'A0': [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        'gamma_plus': 2.0,
        'gamma_minus': 1.0,
        'y': [0.0, 0.0, -0.5],
        'origin': [0.0, 0.0, 0.0],
        'direction': [0.0, 0.0, 1.0],
        'ts': [-0.4, -0.2, -0.1, 0.1, 0.2, 0.4, 0.8],
    },
    'singular': {
        'k': 1,
        'y': [0.5, 0.5, 0.125],
        'z': [0.5, 0.5, 0.125],
        'derivatives': True,
        'blowup_radii_cells': [4, 5, 6, 7, 8, 9],
        # both in D0, for the Green identity check
        'identity_y': [0.5, 0.5, -0.125],
        'identity_z': [0.40625, 0.59375, -0.125],
    },
    'asymptotics': {
        'pair': 'jump',
        'interface': 2,
        'radii_cells': [4, 5, 6, 7, 8, 9],
        'estimates': None,
        'bc': 'green',
    },
    'three_spheres': {
        'center': [0.5, 0.5, 0.5],
        'r3': 0.3,
        'ensemble': 50,
        'modes': 8,
        'chain_target': [0.5, 0.5, 0.375],
    },
    'sweep': {
        'magnitudes': [0.01, 0.02, 0.04, 0.08, 0.1],
        'samples_per_magnitude': 4,
        'kind': 'gamma',
        'slabs': [2],
        'affine': True,
        'perturbations': None,
    },
    'boundary_holder': {
        'magnitudes': [0.01, 0.02, 0.04, 0.08],
        'kind': 'sigma',
        'slabs': [1],
    },
}


class ConfigError(ValueError):
    """The config file is unreadable or describes an invalid setup."""


def merge_defaults(config, defaults=None):
    """Deep merge: dicts merge key by key, anything else in config wins."""
    merged = copy.deepcopy(DEFAULT_CONFIG if defaults is None else defaults)
    for key, value in (config or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_defaults(value, merged[key])
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_ci_overrides(config):
    """Shrink everything to one magnitude, one sample and grid 16 when CI is set."""
    if not os.environ.get("CI"):
        return config
    print("CI mode detected - running minimal experiments")
    config = copy.deepcopy(config)
    config['grid'] = MIN_CLI_GRID
    config['sweep']['magnitudes'] = config['sweep']['magnitudes'][:1]
    config['sweep']['samples_per_magnitude'] = 1
    if config['sweep'].get('perturbations'):
        config['sweep']['perturbations'] = config['sweep']['perturbations'][:1]
    config['boundary_holder']['magnitudes'] = config['boundary_holder']['magnitudes'][:1]
    config['three_spheres']['ensemble'] = 1
    config['cauchy']['modes'] = min(config['cauchy']['modes'], 4)
    config['solve']['convergence_grids'] = config['solve']['convergence_grids'][:2]
    # grid 16 leaves no room for second source derivatives or wide pair radii
    config['singular']['derivatives'] = False
    config['asymptotics']['radii_cells'] = [3, 4, 5, 6, 7]
    config['asymptotics']['estimates'] = ['grad_x']
    return config


def load_config(path=None, overrides=None):
    """
    Read a JSON config, merge defaults, apply overrides and the CI switch.

    overrides: dict of top-level values from the command line (grid, seed, jobs, ...)
    """
    raw = {}
    if path:
        try:
            with open(path, 'r') as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")

    config = merge_defaults(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            config[key] = value
    config = apply_ci_overrides(config)
    check_config(config)
    return config


def check_config(config):
    if int(config.get('grid', 0)) < MIN_CLI_GRID:
        raise ConfigError(f"Grid resolution must be at least {MIN_CLI_GRID}, got {config.get('grid')}")
    if config.get('regime_policy', 'skip') not in ('skip', 'abort'):
        raise ConfigError(f"Unknown regime policy: {config.get('regime_policy')}")
    if int(config.get('jobs', 1)) < 1:
        raise ConfigError(f"jobs must be at least 1, got {config.get('jobs')}")


def build_domain(config):
    try:
        return domain_from_dict(config['geometry'])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid geometry: {e}") from e


def build_pair(spec, domain, extended=False):
    """Coefficient pair from its JSON spec, optionally extended to D0."""
    try:
        pair = pair_from_dict(spec, domain.N)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid coefficient pair: {e}") from e
    return extend_to_D0(pair) if extended else pair


def read_pair_spec(path):
    """A coefficient pair spec from its own JSON file (same shape as an entry of 'pairs')."""
    try:
        with open(path, 'r') as f:
            spec = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read coefficient pair {path}: {e}") from e
    if not isinstance(spec, dict) or 'slabs' not in spec:
        raise ConfigError(f"Coefficient pair {path} needs a 'slabs' list")
    return spec


def parse_point(text):
    """Parse "0.5,0.5,0.45" into [0.5, 0.5, 0.45]."""
    try:
        point = [float(v) for v in text.split(',')]
    except ValueError as e:
        raise ConfigError(f"Cannot parse point {text!r}: {e}") from e
    if len(point) != 3:
        raise ConfigError(f"A point needs 3 coordinates, got {text!r}")
    return point
