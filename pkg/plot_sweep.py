"""
plot_sweep.py - SVG plots of the stability experiments

- sweep.svg          log E against log d with the fitted line
- ratio.svg          mean E/d per perturbation magnitude, with error bars
- blowup.svg / asymptotics.svg / three_spheres.svg from the matching CLI outputs
"""
import csv
import json
import math
import os
import sys

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    HAS_MATPLOTLIB = True
except ImportError:
    HAS_MATPLOTLIB = False

import numpy as np

from analyze_sweep import aggregate_by_magnitude


def _require_matplotlib():
    if not HAS_MATPLOTLIB:
        print("matplotlib not installed")
        print("Install it with: pip install matplotlib")
        raise SystemExit(1)


def load_records(results_dir, name="sweep_records.csv"):
    """Included sweep records as (d, E) floats"""
    path = os.path.join(results_dir, name)
    if not os.path.exists(path):
        print(f"Error: {path} not found!")
        print("Run the sweep first")
        return []
    points = []
    with open(path, 'r', newline='') as f:
        for row in csv.DictReader(f):
            if row['status'] == 'included':
                points.append({'magnitude': float(row['magnitude']), 'd': float(row['d']), 'E': float(row['E'])})
    return points


def _save(output_dir, name):
    os.makedirs(output_dir, exist_ok=True)
    output_file = os.path.join(output_dir, name)
    plt.tight_layout()
    plt.savefig(output_file, format='svg', metadata={'Date': None})
    plt.close()
    print(f"Saved: {output_file}")
    return output_file


def plot_sweep(points, fit, output_dir, ylabel="E", name="sweep.svg"):
    """Scatter of log E vs log d, coloured by magnitude, with the fitted line."""
    _require_matplotlib()
    plt.figure(figsize=(8, 6))
    magnitudes = sorted({p['magnitude'] for p in points})
    for i, m in enumerate(magnitudes):
        pts = [p for p in points if p['magnitude'] == m]
        plt.loglog([p['d'] for p in pts], [p['E'] for p in pts], 'o', color=f"C{i % 10}",
                   markersize=7, alpha=0.8, label=f"magnitude {m:g}")

    if fit is not None and points:
        ds = np.array([p['d'] for p in points])
        line = np.geomspace(ds.min(), ds.max(), 50)
        plt.loglog(line, np.exp(fit['intercept']) * line ** fit['slope'], 'k--', linewidth=1,
                   label=f"slope {fit['slope']:.3f}")

    plt.xlabel('d(C1, C2)', fontsize=12)
    plt.ylabel(ylabel, fontsize=12)
    plt.title('Coefficient error against Cauchy data distance', fontsize=13)
    plt.grid(True, which='both', alpha=0.3)
    plt.legend(fontsize=9)
    return _save(output_dir, name)


def plot_ratio(aggregated, output_dir):
    """Mean E/d per magnitude; a flat curve is what Lipschitz stability looks like."""
    _require_matplotlib()
    plt.figure(figsize=(8, 5))
    mags = [row['magnitude'] for row in aggregated]
    plt.errorbar(mags, [row['mean_ratio'] for row in aggregated], yerr=[row['std_ratio'] for row in aggregated],
                 fmt='o-', color='C0', capsize=5, markersize=7)
    plt.xscale('log')
    plt.xlabel('perturbation magnitude', fontsize=12)
    plt.ylabel('E / d', fontsize=12)
    plt.ylim(bottom=0)
    plt.grid(True, alpha=0.3)
    return _save(output_dir, 'ratio.svg')


def plot_loglog_rows(rows, x_key, y_keys, output_dir, name, title, xlabel):
    """Generic log-log line plot for blow-up and asymptotic tables."""
    _require_matplotlib()
    plt.figure(figsize=(8, 5))
    xs = [row[x_key] for row in rows]
    for i, key in enumerate(y_keys):
        ys = [abs(row[key]) for row in rows]
        if all(y > 0 for y in ys):
            plt.loglog(xs, ys, 'o-', color=f"C{i % 10}", label=key)
    plt.xlabel(xlabel, fontsize=12)
    plt.title(title, fontsize=13)
    plt.grid(True, which='both', alpha=0.3)
    plt.legend(fontsize=9)
    return _save(output_dir, name)


def plot_histogram(values, output_dir, name, title, xlabel):
    _require_matplotlib()
    values = [v for v in values if math.isfinite(v)]
    plt.figure(figsize=(8, 5))
    plt.hist(values, bins=max(5, min(30, len(values) // 2)), color='C0', alpha=0.8)
    plt.xlabel(xlabel, fontsize=12)
    plt.title(title, fontsize=13)
    plt.grid(True, alpha=0.3)
    return _save(output_dir, name)


def main():
    if len(sys.argv) > 1:
        results_dir = sys.argv[1]
    else:
        results_dir = "results"

    print(f"Loading results from {results_dir}/")
    points = load_records(results_dir)
    if not points:
        print("No results found!")
        return

    print(f"Found {len(points)} data points")
    fit = None
    fit_file = os.path.join(results_dir, "fit.json")
    if os.path.exists(fit_file):
        with open(fit_file) as f:
            fit = json.load(f).get('fit')

    figures_dir = os.path.join(results_dir, "figures")
    print("Creating sweep plot...")
    plot_sweep(points, fit, figures_dir)

    aggregated = aggregate_by_magnitude([dict(p, status='included', ratio=p['E'] / p['d']) for p in points])
    plot_ratio(aggregated, figures_dir)

    print(f"\nPlots saved to: {figures_dir}/")


if __name__ == "__main__":
    main()
