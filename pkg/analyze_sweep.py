"""
analyze_sweep.py - Fit and summarize the results of a stability sweep

Reads sweep_records.csv from a results directory and produces:
- fit.json                   log E vs log d regression with a 95% confidence interval
- summary_aggregated.csv     mean/std of E/d per perturbation magnitude
- the ratio trend: does E/d grow as the perturbations get smaller?

fit_loglog is also used by the exponent fits in stability.py and singular.py.
"""
import csv
import json
import math
import os
import statistics
import sys
from collections import defaultdict

import numpy as np
from scipy import stats

# E/d trend slope (log mean ratio vs log magnitude) below this counts as diverging
TREND_TOLERANCE = -0.15

# log E vs log d slope expected of a Lipschitz estimate, with discretisation slack
SLOPE_RANGE = (0.85, 1.15)


def fit_loglog(x, y, drop_smallest=0, confidence=0.95):
    """
    Ordinary least squares of log y against log x.

    The `drop_smallest` points with the smallest x are left out. Returns slope,
    intercept, their standard errors and the two-sided confidence interval of the
    slope.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"x and y differ in length: {x.size} vs {y.size}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("Log-log fits need positive data")
    order = np.argsort(x, kind='stable')[drop_smallest:]
    if order.size < 3:
        raise ValueError(f"Need at least 3 points after dropping {drop_smallest}, got {order.size}")

    fit = stats.linregress(np.log(x[order]), np.log(y[order]))
    t = stats.t.ppf(0.5 + 0.5 * confidence, order.size - 2)
    return {
        'slope': float(fit.slope),
        'intercept': float(fit.intercept),
        'stderr': float(fit.stderr),
        'intercept_stderr': float(fit.intercept_stderr),
        'ci_low': float(fit.slope - t * fit.stderr),
        'ci_high': float(fit.slope + t * fit.stderr),
        'r_value': float(fit.rvalue),
        'n_points': int(order.size),
        'dropped': int(drop_smallest),
    }


def aggregate_by_magnitude(records):
    """Mean and standard deviation of E, d and E/d over the included samples of each magnitude."""
    grouped = defaultdict(list)
    for r in records:
        if r['status'] == 'included':
            grouped[float(r['magnitude'])].append(r)

    aggregated = []
    for magnitude in sorted(grouped):
        samples = grouped[magnitude]
        ratios = [float(s['ratio']) for s in samples]
        ds = [float(s['d']) for s in samples]
        Es = [float(s['E']) for s in samples]
        aggregated.append({
            'magnitude': magnitude,
            'n_samples': len(samples),
            'mean_E': sum(Es) / len(Es),
            'mean_d': sum(ds) / len(ds),
            'mean_ratio': sum(ratios) / len(ratios),
            'std_ratio': statistics.stdev(ratios) if len(ratios) > 1 else 0.0,
            'max_ratio': max(ratios),
        })
    return aggregated


def ratio_trend(aggregated):
    """
    Slope of log(mean E/d) against log(magnitude).

    A clearly negative slope means E/d grows as the perturbations shrink. Needs two
    magnitudes at least a decade apart to say anything.
    """
    if len(aggregated) < 2:
        return {'slope': math.nan, 'span_decades': 0.0, 'diverging': False, 'conclusive': False}
    mags = np.array([row['magnitude'] for row in aggregated])
    ratios = np.array([row['mean_ratio'] for row in aggregated])
    fit = stats.linregress(np.log(mags), np.log(ratios))
    span = float(np.log10(mags.max() / mags.min()))
    return {
        'slope': float(fit.slope),
        'span_decades': span,
        'diverging': bool(fit.slope < TREND_TOLERANCE),
        'conclusive': span >= 1.0 - 1e-9,
    }


def slope_in_range(fit, slope_range=SLOPE_RANGE):
    """True when a log E vs log d fit exists and its slope lies in slope_range."""
    if fit is None:
        return False
    low, high = slope_range
    return bool(low <= fit['slope'] <= high)


def summarize(records, drop_smallest=0):
    """Everything analyze_sweep reports, from in-memory records."""
    included = [r for r in records if r['status'] == 'included']
    summary = {
        'n_records': len(records),
        'n_included': len(included),
        'excluded': {},
        'max_ratio': max((float(r['ratio']) for r in included), default=math.nan),
    }
    for r in records:
        if r['status'] != 'included':
            summary['excluded'][r['status']] = summary['excluded'].get(r['status'], 0) + 1

    if len(included) - drop_smallest >= 3:
        summary['fit'] = fit_loglog([float(r['d']) for r in included], [float(r['E']) for r in included],
                                    drop_smallest=drop_smallest)
    else:
        summary['fit'] = None
    summary['slope_ok'] = slope_in_range(summary['fit'])
    summary['aggregated'] = aggregate_by_magnitude(records)
    summary['trend'] = ratio_trend(summary['aggregated'])
    return summary


def read_records(results_dir, name="sweep_records.csv"):
    path = os.path.join(results_dir, name)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, 'r', newline='') as f:
        return list(csv.DictReader(f))


def analyze_sweep(results_dir="results", records_name="sweep_records.csv"):
    """Fit and aggregate a finished sweep; writes fit.json and summary_aggregated.csv."""
    try:
        records = read_records(results_dir, records_name)
    except FileNotFoundError:
        print(f"Error: {records_name} not found in {results_dir}!")
        print("Run the sweep first: python cli.py sweep")
        return None

    print(f"Analyzing {len(records)} samples...")
    summary = summarize(records)

    fit_file = os.path.join(results_dir, "fit.json")
    with open(fit_file, 'w') as f:
        json.dump({k: v for k, v in summary.items() if k != 'aggregated'}, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"Fit saved to: {fit_file}")

    agg_file = os.path.join(results_dir, "summary_aggregated.csv")
    if summary['aggregated']:
        with open(agg_file, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=summary['aggregated'][0].keys())
            writer.writeheader()
            for row in summary['aggregated']:
                writer.writerow({k: (f"{v:.12e}" if isinstance(v, float) else v) for k, v in row.items()})
        print(f"Aggregated results saved to: {agg_file}")

    print("\nAggregated results:")
    for row in summary['aggregated']:
        print(f"\nmagnitude={row['magnitude']:g} ({row['n_samples']} samples)")
        print(f"  E/d: {row['mean_ratio']:.4g} +/- {row['std_ratio']:.4g} (max {row['max_ratio']:.4g})")
        print(f"  d:   {row['mean_d']:.4g}")

    fit = summary['fit']
    if fit is not None:
        print(f"\nlog E vs log d slope: {fit['slope']:.4f} "
              f"[{fit['ci_low']:.4f}, {fit['ci_high']:.4f}]")
        if not summary['slope_ok']:
            print(f"WARNING: slope outside [{SLOPE_RANGE[0]}, {SLOPE_RANGE[1]}]")
    print(f"Empirical Lipschitz constant (max E/d): {summary['max_ratio']:.4g}")
    if summary['trend']['diverging']:
        print("WARNING: E/d grows as the perturbation shrinks")

    print(f"\n\nNext step:")
    print(f"  python plot_sweep.py {results_dir}")
    return summary


if __name__ == "__main__":
    if len(sys.argv) > 1:
        results_dir = sys.argv[1]
    else:
        results_dir = "results"

    analyze_sweep(results_dir)
