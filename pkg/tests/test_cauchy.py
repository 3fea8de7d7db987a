"""
test_cauchy.py - Tests for the trace norms, sampled Cauchy subspaces and their distance
"""
import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math
import tempfile

import numpy as np

from cauchy import (CauchySubspace, alessandrini_gap, boundary_norm, boundary_pairing, distance_versus_modes,
                    load_subspace, sample_cauchy_space, save_subspace, sine_modes, spectral_ratio,
                    subspace_distance, volume_form)
from coefficients import constant_pair
from config import DEFAULT_CONFIG
from geometry import domain_from_dict
from solver import make_grid

MODES = 6


def default_domain():
    return domain_from_dict(DEFAULT_CONFIG['geometry'])


def sampled(pair, M=MODES):
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    return sample_cauchy_space(domain, pair, grid, M)


def test_boundary_norm_eigenbasis():
    norm = boundary_norm((4, 3), 0.125)
    gram = norm.h ** 2 * norm.vectors.T @ norm.vectors
    assert np.allclose(gram, np.eye(12)), "Eigenvectors are orthonormal for h^2 sum f g"
    assert np.all(np.diff(norm.eigenvalues) >= 0)

    modes, labels = sine_modes((4, 3), 5)
    assert labels[0] == (1, 1)
    first = modes[0]
    expected = (1.0 + norm.eigenvalues[0]) ** 0.25 * norm.l2(first)
    assert math.isclose(norm.norm(first), expected, rel_tol=1e-12), "Sine modes are exact eigenvectors"
    assert math.isclose(norm.norm(first, s=0.0), norm.l2(first), rel_tol=1e-12)

    try:
        sine_modes((4, 3), 13)
        assert False, "Only 12 nodes"
    except ValueError:
        pass
    print("PASS: Boundary norm eigenbasis")


def test_identical_pairs_have_zero_distance():
    S1 = sampled(constant_pair(2, gamma=[1.0, 1.5]))
    S2 = sampled(constant_pair(2, gamma=[1.0, 1.5]))
    assert S1.dim == MODES
    assert S1.gram_error() < 1e-10
    assert subspace_distance(S1, S2) < 1e-8
    assert subspace_distance(S1, S2, symmetric=True) < 1e-8
    print("PASS: Identical pairs have zero distance")


def test_distance_of_different_pairs():
    S1 = sampled(constant_pair(2))
    S2 = sampled(constant_pair(2, gamma=[1.3, 1.0], q=[-2.0, 0.0]))
    d = subspace_distance(S1, S2)
    d_sym = subspace_distance(S1, S2, symmetric=True)
    assert 0.0 < d <= 1.0, f"d = {d}"
    assert d <= d_sym <= 1.0
    assert max(d, subspace_distance(S2, S1)) == d_sym

    rows = distance_versus_modes(S1, S2, [2, 4, MODES])
    assert [row['modes'] for row in rows] == [2, 4, MODES]
    assert all(row['kept1'] <= row['modes'] for row in rows)
    assert math.isclose(rows[-1]['d'], d, rel_tol=1e-9)
    print("PASS: Distance of different pairs")


def test_distance_needs_matching_norms():
    S1 = sampled(constant_pair(2))
    other = CauchySubspace.from_vectors([np.ones(2 * 16)])
    try:
        subspace_distance(S1, other)
        assert False, "A plain subspace has no trace norm"
    except ValueError as e:
        assert "different boundary norms" in str(e)
    empty = CauchySubspace(basis=np.zeros((32, 0)), norm=S1.norm)
    try:
        subspace_distance(S1, empty)
        assert False
    except ValueError as e:
        assert "empty" in str(e)
    print("PASS: Distance needs matching norms")


def test_dirichlet_to_neumann_is_positive():
    S = sampled(constant_pair(2))
    for index in range(3):
        ratio = spectral_ratio(S.norm, S.pairs[index], index)
        assert ratio.real > 0, f"DtN symbol of mode {index} is {ratio}"
        assert abs(ratio.imag) < 1e-12
    print("PASS: Dirichlet-to-Neumann is positive")


def test_alessandrini_identity_and_bound():
    """Flux traces make the volume integral equal the boundary pairing"""
    S1 = sampled(constant_pair(2))
    S2 = sampled(constant_pair(2, gamma=[1.3, 1.0], q=[-2.0, 0.0]))
    d = subspace_distance(S1, S2)
    for i, j in ((0, 0), (0, 1), (2, 1)):
        sol1, sol2 = S1.solutions[i], S2.solutions[j]
        volume = volume_form(sol1, sol2)
        gap = alessandrini_gap(sol1, sol2, d, S1.norm)
        pairing = boundary_pairing(S1.norm, S1.pairs[i], S2.pairs[j])
        assert abs(volume - pairing) <= 1e-8 * max(abs(volume), 1e-12), f"{volume} != {pairing}"
        assert gap.lhs > 0
        assert not gap.violated, f"|I| = {gap.lhs} exceeds d ||.|| ||.|| = {gap.rhs}"
    print("PASS: Alessandrini identity and bound")


def test_sampling_preconditions():
    domain = default_domain()
    pair = constant_pair(2)
    try:
        sample_cauchy_space(domain, pair, make_grid(domain, 8, include_d0=True), 4)
        assert False, "Cauchy data live on the grid without D0"
    except ValueError:
        pass
    try:
        sample_cauchy_space(domain, pair, make_grid(domain, 8, include_d0=False), 4, policy='ignore')
        assert False
    except ValueError as e:
        assert "Unknown regime policy" in str(e)
    print("PASS: Sampling preconditions")


def test_subspace_dump():
    S = sampled(constant_pair(2))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_subspace(os.path.join(tmp, "C1.bin"), S)
        loaded = load_subspace(path)
    assert loaded.dim == S.dim
    assert loaded.modes == S.modes
    assert subspace_distance(S, loaded, symmetric=True) < 1e-12
    print("PASS: Subspace dump")


def run_all_tests():
    """Run all tests"""
    print("\nRunning Cauchy data tests...")

    test_boundary_norm_eigenbasis()
    test_identical_pairs_have_zero_distance()
    test_distance_of_different_pairs()
    test_distance_needs_matching_norms()
    test_dirichlet_to_neumann_is_positive()
    test_alessandrini_identity_and_bound()
    test_sampling_preconditions()
    test_subspace_dump()

    print("\nAll tests passed")


if __name__ == "__main__":
    run_all_tests()
