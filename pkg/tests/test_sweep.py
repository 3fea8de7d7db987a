"""
test_sweep.py - Tests for perturbations, the stability sweep and its analysis
"""
import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json
import math
import tempfile

from analyze_sweep import (SLOPE_RANGE, aggregate_by_magnitude, analyze_sweep, fit_loglog, ratio_trend, slope_in_range,
                           summarize)
from coefficients import constant_pair, sup_over_box
from config import DEFAULT_CONFIG, merge_defaults
from geometry import domain_from_dict
from perturbations import Perturbation, create_perturbations, perturbation_from_dict, sweep_perturbations
from sweep import (HOLDER_EXPONENT_MAX, HOLDER_FIELDS, RECORD_FIELDS, boundary_holder_experiment, boundary_sup, classify,
                   lipschitz_sweep)
from writer import ResultWriter


def default_domain():
    return domain_from_dict(DEFAULT_CONFIG['geometry'])


def small_config():
    return merge_defaults({
        'grid': 16,
        'cauchy': {'modes': 4},
        'sweep': {'magnitudes': [0.05, 0.1], 'samples_per_magnitude': 1, 'kind': 'gamma', 'slabs': [2]},
    })


def test_random_perturbations():
    domain = default_domain()
    perts = create_perturbations([0.01, 0.1], 3, 'mixed', [1, 2], domain, seed=5)
    assert len(perts) == 6
    assert [p.sample_id for p in perts] == list(range(6))
    for p in perts:
        for m, piece in list(p.gamma_pieces.items()) + list(p.q_pieces.items()):
            sup, _ = sup_over_box(piece, *domain.partition.slab_bounds(m))
            assert math.isclose(sup, p.magnitude, rel_tol=1e-12), f"sup {sup} for magnitude {p.magnitude}"

    again = create_perturbations([0.01, 0.1], 3, 'mixed', [1, 2], domain, seed=5)
    assert [p.to_json() for p in again] == [p.to_json() for p in perts], "Same seed, same draws"

    flat = create_perturbations([0.2], 1, 'q', [2], domain, affine=False)
    assert flat[0].q_pieces[2].gradient == (0.0, 0.0, 0.0) and abs(flat[0].q_pieces[2].offset) == 0.2
    assert not flat[0].gamma_pieces
    print("PASS: Random perturbations")


def test_perturbation_errors():
    domain = default_domain()
    for args in (([0.1], 1, 'A', [1]), ([0.1], 1, 'gamma', [3]), ([0.1], 0, 'gamma', [1]),
                 ([-0.1], 1, 'gamma', [1])):
        try:
            create_perturbations(*args, domain)
            assert False, f"{args} should be rejected"
        except ValueError:
            pass
    try:
        Perturbation(0, 0.1, gamma_pieces={4: None}).apply(constant_pair(2))
        assert False, "Slab 4 does not exist"
    except ValueError as e:
        assert "slab 4" in str(e)
    print("PASS: Perturbation errors")


def test_explicit_perturbations():
    p = perturbation_from_dict({'gamma': {'2': 0.02}, 'q': {'1': {'offset': -0.1, 'gradient': [0, 0, 0.1]}}}, 7)
    assert p.sample_id == 7 and p.magnitude == 0.1, "Magnitude defaults to the largest offset"
    pair = p.apply(constant_pair(2))
    assert math.isclose(pair.gamma.pieces[2].offset, 1.02)
    assert pair.q.pieces[1].gradient == (0.0, 0.0, 0.1)
    try:
        perturbation_from_dict({'magnitude': 0.1}, 0)
        assert False
    except ValueError as e:
        assert "changes nothing" in str(e)

    listed = sweep_perturbations({'perturbations': [{'gamma': {'2': 0.01}}, {'q': {'2': 0.5}}]}, default_domain())
    assert [q.magnitude for q in listed] == [0.01, 0.5]
    print("PASS: Explicit perturbations")


def test_classify():
    assert classify(0.1, 0.01) == 'included'
    assert classify(0.1, 0.0) == 'excluded_zero'
    assert classify(0.0, 0.3) == 'excluded_zero'
    assert classify(0.1, 1.0) == 'excluded_far'
    print("PASS: Classify")


def test_fit_loglog_recovers_power_law():
    x = [0.01, 0.02, 0.04, 0.08, 0.16]
    y = [3.0 * v ** 2 for v in x]
    fit = fit_loglog(x, y)
    assert math.isclose(fit['slope'], 2.0, rel_tol=1e-10)
    assert math.isclose(math.exp(fit['intercept']), 3.0, rel_tol=1e-9)
    assert fit['ci_low'] <= 2.0 <= fit['ci_high']

    noisy = fit_loglog([1, 2, 3, 4, 5, 6], [50, 40, 2, 4, 6, 8], drop_smallest=2)
    assert noisy['n_points'] == 4 and noisy['dropped'] == 2
    try:
        fit_loglog([1, 2, 3], [1, 2, 3], drop_smallest=1)
        assert False, "Two points left"
    except ValueError:
        pass
    print("PASS: fit_loglog recovers a power law")


def test_summaries():
    records = [
        {'magnitude': 0.1, 'E': 0.1, 'd': 0.05, 'ratio': 2.0, 'status': 'included'},
        {'magnitude': 0.1, 'E': 0.1, 'd': 0.025, 'ratio': 4.0, 'status': 'included'},
        {'magnitude': 0.01, 'E': 0.01, 'd': 0.005, 'ratio': 2.0, 'status': 'included'},
        {'magnitude': 0.01, 'E': 0.01, 'd': 0.0, 'ratio': math.nan, 'status': 'excluded_zero'},
    ]
    aggregated = aggregate_by_magnitude(records)
    assert [row['magnitude'] for row in aggregated] == [0.01, 0.1]
    assert aggregated[1]['mean_ratio'] == 3.0 and aggregated[1]['max_ratio'] == 4.0
    assert aggregated[0]['std_ratio'] == 0.0

    trend = ratio_trend(aggregated)
    assert trend['conclusive'], "The magnitudes span a decade"
    assert not trend['diverging'], "E/d is larger for the larger perturbation"

    summary = summarize(records)
    assert summary['n_included'] == 3
    assert summary['excluded'] == {'excluded_zero': 1}
    assert summary['max_ratio'] == 4.0
    assert summary['fit'] is not None
    print("PASS: Summaries")


def test_slope_ok():
    """E proportional to d passes the slope check, E proportional to sqrt(d) does not"""
    ds = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05]

    def records(power):
        out = []
        for i, d in enumerate(ds):
            E = 2.0 * d ** power
            out.append({'magnitude': E, 'E': E, 'd': d, 'ratio': E / d, 'status': 'included', 'sample_id': i})
        return out

    linear = summarize(records(1.0))
    assert math.isclose(linear['fit']['slope'], 1.0, rel_tol=1e-10)
    assert linear['slope_ok']
    root = summarize(records(0.5))
    assert math.isclose(root['fit']['slope'], 0.5, rel_tol=1e-10)
    assert not root['slope_ok'], "A slope of 0.5 is not Lipschitz"

    assert slope_in_range(fit_loglog([1, 2, 4, 8], [3, 6.6, 13.2, 29.0]))
    assert not slope_in_range(None), "No fit, no pass"
    assert SLOPE_RANGE == (0.85, 1.15)
    print("PASS: Slope check")


def test_boundary_sup():
    domain = default_domain()
    pair1 = constant_pair(2)
    pair2 = constant_pair(2, gamma=[1.1, 3.0], q=[-0.2, 0.0])
    assert math.isclose(boundary_sup(pair1, pair2, domain), 0.1 + 0.2), "Only slab 1 touches Sigma"
    print("PASS: Boundary sup")


def test_small_sweep():
    """Two gamma perturbations of slab 2 at grid 16"""
    config = small_config()
    with tempfile.TemporaryDirectory() as tmp:
        writer = ResultWriter(os.path.join(tmp, "sweep"), command="sweep", echo=False)
        result = lipschitz_sweep(config, writer)
        assert len(result.records) == 2
        for record in result.records:
            assert math.isclose(record['E'], record['magnitude'], rel_tol=1e-12), "E is the slab-2 sup"
            assert 0.0 < record['d'] < 1.0
            assert record['status'] == 'included'
            assert math.isclose(record['ratio'], record['E'] / record['d'])
            assert record['modes_kept'] == 4
        assert result.fit is None, "Two samples are not enough for a fit"

        summary = analyze_sweep(os.path.join(tmp, "sweep"))
        assert summary['n_included'] == 2
        with open(os.path.join(tmp, "sweep", "fit.json")) as f:
            assert json.load(f)['n_records'] == 2
        with open(os.path.join(tmp, "sweep", "sweep_records.csv")) as f:
            assert f.readline().strip() == ",".join(RECORD_FIELDS)

    threaded = dict(config, jobs=2)
    again = lipschitz_sweep(threaded)
    assert [r['d'] for r in again.records] == [r['d'] for r in result.records], "Jobs do not change results"
    print("PASS: Small sweep")


def test_boundary_holder_experiment():
    """Constant gamma offsets on slab 1: boundary sup, E and d all scale together"""
    config = merge_defaults({
        'grid': 16,
        'cauchy': {'modes': 4},
        'boundary_holder': {'magnitudes': [0.02, 0.04, 0.08], 'kind': 'sigma', 'slabs': [1]},
    })
    with tempfile.TemporaryDirectory() as tmp:
        writer = ResultWriter(os.path.join(tmp, "boundary-holder"), command="boundary-holder", echo=False)
        result = boundary_holder_experiment(config, writer)
        with open(writer.path_for("boundary_holder.json")) as f:
            saved = json.load(f)
        with open(writer.path_for("boundary_holder.csv")) as f:
            assert f.readline().strip() == ",".join(HOLDER_FIELDS)

    assert len(result.records) == 3
    for record in result.records:
        assert record['status'] == 'included'
        assert math.isclose(record['boundary_sup'], record['magnitude'], rel_tol=1e-12), "A is the identity"
        assert math.isclose(record['E'], record['magnitude'], rel_tol=1e-12)
    ds = [r['d'] for r in result.records]
    assert ds == sorted(ds), f"d should grow with the perturbation: {ds}"

    summary = result.summary
    assert summary['n_included'] == 3 and summary['fit'] is not None
    assert 0 < summary['eta'] <= HOLDER_EXPONENT_MAX, f"eta = {summary['eta']:.4f}"
    assert summary['eta_ok']
    eta = min(summary['eta'], 1.0)
    expected = max(r['boundary_sup'] / ((r['d'] + r['E']) ** (1 - eta) * r['d'] ** eta) for r in result.records)
    assert math.isclose(summary['constant'], expected) and summary['constant'] > 0
    assert saved['eta_ok'] is True and math.isclose(saved['eta'], summary['eta'])
    print("PASS: Boundary Holder experiment")


def run_all_tests():
    """Run all tests"""
    print("\nRunning sweep tests...")

    test_random_perturbations()
    test_perturbation_errors()
    test_explicit_perturbations()
    test_classify()
    test_fit_loglog_recovers_power_law()
    test_summaries()
    test_slope_ok()
    test_boundary_sup()
    test_small_sweep()
    test_boundary_holder_experiment()

    print("\nAll tests passed")


if __name__ == "__main__":
    run_all_tests()
