"""
test_coefficients.py - Tests for the coefficient pairs, validation and error functionals
"""
import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np

from coefficients import (AffinePiece, PiecewiseAffineField, affine_bound_from_interface, constant_pair,
                          error_functionals, evaluate, extend_to_D0, get_matrix_field, interface_samples,
                          norm_equivalence_constants, pair_from_dict, perturb_pair, sup_over_box, triple_norm,
                          validate)
from config import DEFAULT_CONFIG
from geometry import domain_from_dict


def default_domain():
    return domain_from_dict(DEFAULT_CONFIG['geometry'])


def test_sup_over_box_is_exact():
    piece = AffinePiece(0.1, (0.2, 0.0, -0.5))
    sup, at = sup_over_box(piece, (0, 0, 0), (1, 1, 1))
    assert math.isclose(sup, 0.4), f"Expected 0.4, got {sup}"
    assert at == (0.0, 0.0, 1.0) or at == (0.0, 1.0, 1.0)

    # dense sampling never beats the vertices
    xs = np.random.default_rng(0).uniform(0, 1, size=(2000, 3))
    assert np.abs(piece(xs)).max() <= sup + 1e-12
    print("PASS: sup over a box is exact")


def test_triple_norm():
    field = PiecewiseAffineField((AffinePiece(1.0), AffinePiece(0.5, (0.0, 0.3, 0.4)), AffinePiece(-2.0)))
    assert math.isclose(triple_norm(field), 2.0)
    assert math.isclose(field.pieces[1].norm, 1.0)
    print("PASS: Triple norm")


def test_interface_points_take_lower_slab():
    domain = default_domain()
    pair = constant_pair(2, gamma=[1.0, 2.0], q=[0.0, 3.0])
    assert evaluate(pair, domain, (0.5, 0.5, 0.5), 'gamma') == 1.0
    assert evaluate(pair, domain, (0.5, 0.5, 0.5 + 1e-6), 'gamma') == 2.0
    assert evaluate(pair, domain, (0.5, 0.5, 0.75), 'q') == 3.0
    sigma = evaluate(pair, domain, (0.5, 0.5, 0.75), 'sigma')
    assert np.allclose(sigma, 2.0 * np.eye(3))
    print("PASS: Interface points take the lower slab")


def test_d0_needs_extension():
    domain = default_domain()
    pair = constant_pair(2, gamma=3.0)
    try:
        evaluate(pair, domain, (0.5, 0.5, -0.1), 'gamma')
        assert False, "D0 values need an extended pair"
    except ValueError as e:
        assert "extend" in str(e)

    extended = extend_to_D0(pair)
    assert evaluate(extended, domain, (0.5, 0.5, -0.1), 'gamma') == 1.0
    assert evaluate(extended, domain, (0.5, 0.5, -0.1), 'q') == 1.0
    assert np.allclose(evaluate(extended, domain, (0.5, 0.5, -0.1), 'sigma'), np.eye(3))
    assert evaluate(extended, domain, (0.5, 0.5, 0.3), 'gamma') == 3.0, "Omega values are untouched"
    print("PASS: D0 needs extension")


def test_error_functionals():
    domain = default_domain()
    pair1 = constant_pair(2)
    pair2 = constant_pair(2, gamma=[1.0, 1.1], q=[0.0, -0.05])

    ef = error_functionals(pair1, pair2, domain, 1)
    assert math.isclose(ef.E, 0.1), f"E is the larger of the two sups (0.1, not 0.15), got {ef.E}"
    assert ef.delta == 0.0 and ef.delta_tilde == 0.0, "Slab 1 is identical"

    ef = error_functionals(pair1, pair2, domain, 2)
    assert math.isclose(ef.delta, 0.1)
    assert math.isclose(ef.delta_tilde, 0.05)
    assert math.isclose(ef.delta_star, 0.1)

    try:
        error_functionals(pair1, constant_pair(3), domain, 1)
        assert False, "Mismatched partitions should raise"
    except ValueError:
        pass
    print("PASS: Error functionals")


def test_validate_reports_violations():
    domain = default_domain()
    report = validate(constant_pair(2), domain)
    assert report.passed, f"The constant pair should pass: {report.violations}"
    assert math.isclose(report.estimates['gamma_min'], 1.0)

    report = validate(constant_pair(2, gamma=[1.0, 25.0]), domain)
    assert not report.passed
    checks = {v['check'] for v in report.violations}
    assert 'gamma_bounds' in checks and 'sigma_bound' in checks, f"Got {checks}"
    witness = [v for v in report.violations if v['check'] == 'gamma_bounds'][0]['witness']
    assert witness[2] >= 0.5, "The witness lies in slab 2"

    skewed = constant_pair(2, A=get_matrix_field('constant', {'matrix': [[1, 0.2, 0], [0, 1, 0], [0, 0, 1]]}))
    assert 'symmetry' in {v['check'] for v in validate(skewed, domain).violations}

    flat = constant_pair(2, A=get_matrix_field('constant', {'matrix': [[0.1, 0, 0], [0, 1, 0], [0, 0, 1]]}))
    assert 'ellipticity' in {v['check'] for v in validate(flat, domain).violations}

    bumped = constant_pair(2, A=get_matrix_field('sin_bump'))
    assert validate(bumped, domain).passed, "The default sin bump is elliptic and smooth"

    wrong = constant_pair(3)
    assert validate(wrong, domain).violations[0]['check'] == 'partition'
    print("PASS: Validate reports violations")


def test_affine_bound_from_interface():
    """Interface samples plus the normal slope pin the affine difference down"""
    domain = default_domain()
    piece = AffinePiece(0.1, (0.05, -0.02, 0.3))
    anchor = domain.anchors()[1]
    samples = interface_samples(anchor, domain.r0)
    values = [float(piece(np.asarray(s))) for s in samples]
    lower, upper = domain.partition.slab_bounds(2)

    result = affine_bound_from_interface(samples, values, 0.3, lower, upper)
    assert math.isclose(result.piece.offset, 0.1, abs_tol=1e-12)
    assert np.allclose(result.piece.gradient, piece.gradient, atol=1e-12)
    assert math.isclose(result.exact_sup, 0.45, rel_tol=1e-12)
    assert result.bound >= result.exact_sup

    try:
        affine_bound_from_interface(samples[:2], values[:2], 0.3, lower, upper)
        assert False, "Two samples cannot fix the tangential gradient"
    except ValueError as e:
        assert "Degenerate" in str(e)
    print("PASS: Affine bound from interface samples")


def test_norm_equivalence_constants():
    domain = default_domain()
    c1, c2 = norm_equivalence_constants(domain)
    assert 0 < c1 <= 1 <= c2
    rng = np.random.default_rng(3)
    for _ in range(50):
        pieces = (AffinePiece(1.0),) + tuple(AffinePiece(rng.normal(), rng.normal(size=3)) for _ in range(2))
        field = PiecewiseAffineField(pieces)
        sup = max(sup_over_box(field.pieces[m], *domain.partition.slab_bounds(m))[0] for m in (1, 2))
        tn = triple_norm(field)
        assert c1 * tn <= sup + 1e-12, f"Lower constant fails: {c1 * tn} > {sup}"
        assert sup <= c2 * tn + 1e-12, f"Upper constant fails: {sup} > {c2 * tn}"
    print("PASS: Norm equivalence constants")


def test_pair_from_dict():
    pair = pair_from_dict({'slabs': [{'a': 1.0, 'c': 0.5}, {'a': 2.0, 'b': [0, 0, 0.1]}]}, 2)
    assert pair.gamma.pieces[2].gradient == (0.0, 0.0, 0.1)
    assert pair.q.pieces[1].offset == 0.5
    assert pair.A.name == 'identity'
    for bad in ({'slabs': []}, {'slabs': [{'a': 1.0}]}):
        try:
            pair_from_dict(bad, 2)
            assert False, f"{bad} should be rejected"
        except ValueError:
            pass
    try:
        get_matrix_field('spiral')
        assert False
    except ValueError as e:
        assert "Unknown matrix field" in str(e)
    print("PASS: Pair from dict")


def test_perturb_pair():
    pair = constant_pair(2)
    bumped = perturb_pair(pair, {2: AffinePiece(0.1)}, {1: AffinePiece(-0.2, (0, 0, 1))})
    assert math.isclose(bumped.gamma.pieces[2].offset, 1.1)
    assert bumped.gamma.pieces[1] == pair.gamma.pieces[1]
    assert bumped.q.pieces[1].gradient == (0.0, 0.0, 1.0)
    print("PASS: Perturb pair")


def run_all_tests():
    """Run all tests"""
    print("\nRunning coefficient tests...")

    test_sup_over_box_is_exact()
    test_triple_norm()
    test_interface_points_take_lower_slab()
    test_d0_needs_extension()
    test_error_functionals()
    test_validate_reports_violations()
    test_affine_bound_from_interface()
    test_norm_equivalence_constants()
    test_pair_from_dict()
    test_perturb_pair()

    print("\nAll tests passed")


if __name__ == "__main__":
    run_all_tests()
