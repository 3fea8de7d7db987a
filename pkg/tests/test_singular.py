"""
test_singular.py - Tests for S_k, its slice solve, the blow-up fit and the Green identity
"""
import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

from coefficients import constant_pair, pair_from_dict
from config import DEFAULT_CONFIG
from geometry import domain_from_dict
from singular import (green_identity_residual, singular_blowup, singular_problem, singular_S, singular_slice,
                      slice_residual)


def default_domain():
    return domain_from_dict(DEFAULT_CONFIG['geometry'])


def jump_problem(resolution=16, **kwargs):
    domain = default_domain()
    return singular_problem(domain, constant_pair(2), constant_pair(2, gamma=[1.0, 2.0]), resolution,
                            bc='green-real', **kwargs)


def test_problem_needs_green_operator():
    domain = default_domain()
    try:
        singular_problem(domain, constant_pair(2), constant_pair(2), 8, bc='cauchy')
        assert False, "S_k is built from Green fields"
    except ValueError as e:
        assert "Green operator" in str(e)
    print("PASS: Problem needs a Green operator")


def test_identical_pairs_give_zero():
    domain = default_domain()
    problem = singular_problem(domain, constant_pair(2), constant_pair(2), 16, bc='green-real')
    y = (0.5, 0.5, 0.21875)
    assert singular_S(problem, 1, y, y).value == 0.0
    try:
        singular_blowup(problem, 1, [4, 5, 6, 7])
        assert False, "Nothing to fit when S vanishes"
    except ValueError as e:
        assert "vanishes" in str(e)
    print("PASS: Identical pairs give zero")


def test_source_placement():
    problem = jump_problem()
    try:
        singular_S(problem, 1, (0.5, 0.5, 0.46875), (0.5, 0.5, 0.21875))
        assert False, "y is one cell below U_1"
    except ValueError as e:
        assert "from U_1" in str(e)
    try:
        singular_S(problem, 1, (0.5, 0.5, 0.75), (0.5, 0.5, 0.21875))
        assert False, "y is inside U_1"
    except ValueError as e:
        assert "not in W_1" in str(e)
    try:
        singular_blowup(problem, 2, [4, 5, 6, 7])
        assert False, "U_N is empty"
    except ValueError as e:
        assert "empty" in str(e)
    print("PASS: Source placement")


def test_slice_matches_pointwise_quadrature():
    """One transposed solve gives S_k(y, z) for every y"""
    problem = jump_problem()
    z = (0.5, 0.5, 0.21875)
    values = singular_slice(problem, 1, z)
    for y in ((0.5, 0.5, 0.21875), (0.34375, 0.59375, 0.15625), (0.5, 0.5, -0.09375)):
        direct = singular_S(problem, 1, y, z).value
        sliced = values[problem.grid.cell_id[problem.grid.locate(y)]]
        assert math.isclose(sliced, direct, rel_tol=1e-8), f"Slice {sliced} vs quadrature {direct} at {y}"
    assert slice_residual(problem, 1, z, values) < 1e-8, "The slice solves the pair-1 equation in W_1"
    print("PASS: Slice matches pointwise quadrature")


def test_blowup_near_interface():
    """|S_1(y, y)| grows like 1/r as y approaches the jump"""
    problem = jump_problem(24, solver_options={'direct_max_unknowns': 20000})
    result = singular_blowup(problem, 1, [4, 5, 6, 7, 8, 9])
    assert len(result['rows']) == 6 and result['dropped'] == 2
    assert result['bound_slope'] == (-1.4, -0.7)
    # the ceiling holds at any resolution; the walls of the unit box are within 2r of
    # these radii, which steepens the slope past the floor until r / h is much larger
    assert result['slope'] <= -0.7, f"Slope {result['slope']:.3f} shows too little blow-up"

    # bound_ok needs the slope inside the band, on either side
    problem.options.update(blowup_slope_floor=result['slope'] - 0.05, blowup_slope_ceiling=-0.7)
    assert singular_blowup(problem, 1, [4, 5, 6, 7, 8, 9])['bound_ok']
    problem.options['blowup_slope_ceiling'] = result['slope'] - 0.05
    assert not singular_blowup(problem, 1, [4, 5, 6, 7, 8, 9])['bound_ok'], "Too little blow-up is caught"
    problem.options.update(blowup_slope_floor=result['slope'] + 0.05, blowup_slope_ceiling=0.0)
    assert not singular_blowup(problem, 1, [4, 5, 6, 7, 8, 9])['bound_ok'], "Too much blow-up is caught"
    rs = [row['r'] for row in result['rows']]
    assert rs == sorted(rs)
    assert all(row['bound_constant'] > 0 and math.isfinite(row['bound_constant']) for row in result['rows'])
    print("PASS: Blow-up near the interface")


def test_green_identity():
    """Sigma boundary term matches S_1 plus the W_1 volume term"""
    domain = default_domain()
    pairs = DEFAULT_CONFIG['pairs']
    problem = singular_problem(domain, pair_from_dict(pairs['reference'], 2), pair_from_dict(pairs['perturbed'], 2), 16)
    s = DEFAULT_CONFIG['singular']
    identity = green_identity_residual(problem, 1, s['identity_y'], s['identity_z'])
    assert abs(identity.lhs) > 0
    assert identity.w_part == 0.0, "The pairs agree on slab 1"
    assert identity.residual < 0.1, f"Identity residual {identity.residual:.3g}"

    try:
        green_identity_residual(problem, 1, (0.5, 0.5, 0.25), s['identity_z'])
        assert False, "Sources must lie in D0"
    except ValueError as e:
        assert "D0" in str(e)
    print("PASS: Green identity")


def run_all_tests():
    """Run all tests"""
    print("\nRunning singular solution tests...")

    test_problem_needs_green_operator()
    test_identical_pairs_give_zero()
    test_source_placement()
    test_slice_matches_pointwise_quadrature()
    test_blowup_near_interface()
    test_green_identity()

    print("\nAll tests passed")


if __name__ == "__main__":
    run_all_tests()
