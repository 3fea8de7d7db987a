"""
test_solver.py - Tests for the finite-volume operator, Green fields and Dirichlet solves
"""
import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math
import tempfile
import warnings

import numpy as np

from cauchy import sine_modes
from coefficients import constant_pair, extend_to_D0
from config import DEFAULT_CONFIG
from geometry import domain_from_dict
from solver import (EigenvalueRegimeError, EigenvalueRegimeWarning, assemble, cell_gradient, conormal_trace,
                    dirichlet_regime, green_bound, green_source_derivatives, gradient_matrices, make_grid,
                    manufactured_error, read_field, solve_dirichlet, solve_green, solve_many, write_field)


def default_domain():
    return domain_from_dict(DEFAULT_CONFIG['geometry'])


def sine_product(domain):
    lower = np.asarray(domain.box.lower)
    size = np.asarray(domain.box.size)

    def exact(x):
        return np.prod(np.sin(math.pi * (x - lower) / size), axis=-1)

    def forcing(x):
        return -float(np.sum((math.pi / size) ** 2)) * exact(x)
    return exact, forcing


def test_make_grid():
    domain = default_domain()
    grid = make_grid(domain, 16, include_d0=True)
    assert grid.shape == (16, 16, 20), f"Got shape {grid.shape}"
    assert grid.n_active == 16 ** 3 + 8 * 8 * 4
    assert grid.sigma_cells == (4, 12, 4, 12)
    assert grid.patch_shape == (8, 8)
    assert grid.locate((0.5, 0.5, 0.25)) == (8, 8, 8)

    plain = make_grid(domain, 16, include_d0=False)
    assert plain.shape == (16, 16, 16) and plain.n_active == 16 ** 3

    try:
        make_grid(domain, 6)
        assert False, "D0 depth 0.25 is not a multiple of 1/6"
    except ValueError as e:
        assert "Misaligned" in str(e)
    print("PASS: make_grid")


def test_assemble_preconditions():
    domain = default_domain()
    pair = constant_pair(2)
    with_d0 = make_grid(domain, 8, include_d0=True)
    without = make_grid(domain, 8, include_d0=False)
    for args, fragment in (((pair, without, 'green'), "Omega0"),
                           ((pair, with_d0, 'green-real'), "Extend"),
                           ((extend_to_D0(pair), with_d0, 'cauchy'), "without D0"),
                           ((pair, without, 'neumann'), "Unknown boundary")):
        try:
            assemble(domain, *args)
            assert False, f"assemble{args[1:]} should raise"
        except ValueError as e:
            assert fragment in str(e), f"Unexpected message: {e}"
    print("PASS: Assemble preconditions")


def test_manufactured_convergence():
    """Max error of the homogeneous Laplacian drops like h^2"""
    domain = default_domain()
    exact, forcing = sine_product(domain)
    errors = []
    for resolution in (8, 16):
        op = assemble(domain, constant_pair(2), make_grid(domain, resolution, include_d0=False), 'cauchy')
        max_err, l2_err = manufactured_error(op, exact, forcing)
        assert l2_err <= max_err
        errors.append(max_err)
    order = math.log2(errors[0] / errors[1])
    assert order > 1.5, f"Observed order {order:.2f} from errors {errors}"
    assert errors[1] < 0.02
    print("PASS: Manufactured convergence")


def test_green_symmetry():
    """G(x, y) = G(y, x) for the real and the Robin operator"""
    domain = default_domain()
    pair = extend_to_D0(constant_pair(2, gamma=[1.0, 2.0]))
    grid = make_grid(domain, 16, include_d0=True)
    y1, y2 = (0.5, 0.5, 0.25), (0.3, 0.6, 0.75)
    for bc in ('green-real', 'green'):
        op = assemble(domain, pair, grid, bc)
        G1 = solve_green(op, y1)
        G2 = solve_green(op, y2)
        a, b = G1.at(y2), G2.at(y1)
        assert abs(a - b) <= 1e-9 * abs(a), f"{bc}: G(y2, y1) = {a} but G(y1, y2) = {b}"
        assert abs(a) > 0
    print("PASS: Green symmetry")


def test_green_bound():
    domain = default_domain()
    op = assemble(domain, extend_to_D0(constant_pair(2)), make_grid(domain, 16, include_d0=True), 'green-real')
    field = solve_green(op, (0.5, 0.5, 0.25))
    assert field.values[op.grid.cell_id[field.cell]] > 0, "G is positive at the source"
    bound = green_bound(field, 4)
    assert 0.01 < bound < 0.1, f"sup |G| r = {bound}, Gamma gives 1/(4 pi) = 0.0796"

    try:
        solve_green(op, (0.5, 0.5, 0.03))
        assert False, "A source next to Sigma needs allow_near"
    except ValueError as e:
        assert "closer than" in str(e)
    print("PASS: Green bound")


def test_green_cache_hit_is_identical():
    from green_cache import GreenCache
    domain = default_domain()
    op = assemble(domain, extend_to_D0(constant_pair(2)), make_grid(domain, 8, include_d0=True), 'green')
    cache = GreenCache()
    cold = solve_green(op, (0.5, 0.5, 0.3), cache=cache, allow_near=True)
    warm = solve_green(op, (0.5, 0.5, 0.3), cache=cache, allow_near=True)
    assert cache.hits == 1 and cache.misses == 1
    assert np.array_equal(cold.values, warm.values)
    cache.close()
    print("PASS: Green cache hit is identical")


def test_flux_trace_reciprocity():
    """sum f_i (flux of v)_i = sum g_i (flux of u)_i for the symmetric Cauchy operator"""
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    op = assemble(domain, constant_pair(2, gamma=[1.0, 1.5], q=[0.5, -1.0]), grid, 'cauchy')
    modes, _ = sine_modes(grid.patch_shape, 2)
    u = solve_dirichlet(op, modes[0])
    v = solve_dirichlet(op, modes[1])
    lhs = np.sum(modes[0] * conormal_trace(op, v.values, modes[1], scheme='flux'))
    rhs = np.sum(modes[1] * conormal_trace(op, u.values, modes[0], scheme='flux'))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0), f"{lhs} != {rhs}"
    assert u.regime == 'definite'

    try:
        conormal_trace(op, u.values, modes[0], scheme='spectral')
        assert False
    except ValueError as e:
        assert "Unknown trace scheme" in str(e)
    print("PASS: Flux trace reciprocity")


def test_eigenvalue_regime():
    """q at the first discrete Dirichlet eigenvalue is flagged, q above it is indefinite"""
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    base = assemble(domain, constant_pair(2), grid, 'cauchy')
    assert dirichlet_regime(base) == 'definite'
    lam = float(np.linalg.eigvalsh(-base.matrix.toarray())[0])

    near = assemble(domain, constant_pair(2, q=lam), grid, 'cauchy')
    assert dirichlet_regime(near) == 'near_eigenvalue'
    f = np.zeros(grid.patch_shape[0] * grid.patch_shape[1])
    try:
        solve_dirichlet(near, f, policy='abort')
        assert False, "Policy abort should raise"
    except EigenvalueRegimeError:
        pass
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        solution = solve_dirichlet(near, f, policy='warn')
    assert any(issubclass(w.category, EigenvalueRegimeWarning) for w in caught)
    assert solution.regime == 'near_eigenvalue'

    above = assemble(domain, constant_pair(2, q=lam + 5.0), grid, 'cauchy')
    assert dirichlet_regime(above) == 'indefinite'
    print("PASS: Eigenvalue regime")


def test_robin_solves_where_dirichlet_fails():
    """The complex Robin Green system stays solvable at and above a Dirichlet eigenvalue"""
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    base = assemble(domain, constant_pair(2), grid, 'cauchy')
    lam = float(np.linalg.eigvalsh(-base.matrix.toarray())[0])
    robin_grid = make_grid(domain, 8, include_d0=True)
    y = (0.4375, 0.4375, 0.3125)

    for q, regime in ((lam, 'near_eigenvalue'), (lam + 5.0, 'indefinite')):
        pair = constant_pair(2, q=q)
        assert dirichlet_regime(assemble(domain, pair, grid, 'cauchy')) == regime
        op = assemble(domain, extend_to_D0(pair), robin_grid, 'green')
        G = solve_green(op, y, allow_near=True)
        rhs = np.zeros(op.n, dtype=complex)
        rhs[G.grid.cell_id[G.cell]] = -1.0 / robin_grid.h ** 3
        residual = np.linalg.norm(op.matrix @ G.values - rhs) / np.linalg.norm(rhs)
        assert residual < 1e-8, f"q = {q:.4g}: relative residual {residual:.2e}"
        assert np.all(np.isfinite(G.values)) and np.max(np.abs(G.values.imag)) > 0
    print("PASS: Robin solves where Dirichlet fails")


def test_cell_gradient_of_linear_field():
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    centers = grid.active_centers()
    u = 2.0 * centers[:, 0] - centers[:, 2]
    grads = cell_gradient(u, grid)
    ids = grid.cell_id
    interior = ids[1:-1, 1:-1, 1:-1].ravel()
    assert np.allclose(grads[interior], [2.0, 0.0, -1.0])
    print("PASS: Cell gradient of a linear field")


def test_floor_gradient_uses_robin_ghost():
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=True)
    op = assemble(domain, extend_to_D0(constant_pair(2)), grid, 'green')
    assert assemble(domain, extend_to_D0(constant_pair(2)), grid, 'green-real').floor_ghost is None
    G = solve_green(op, (0.4375, 0.4375, 0.3125), allow_near=True).values

    i, _, j, _ = grid.sigma0_cells
    factor = op.floor_ghost[i, j]
    assert abs(abs(factor) - 1.0) < 1e-12 and abs(factor + 1.0) > 1e-3, f"Floor factor {factor}"
    assert op.floor_ghost[0, 0] == -1.0

    grads = cell_gradient(G, grid, floor_ghost=op.floor_ghost)
    floor, above = grid.cell_id[i, j, 0], grid.cell_id[i, j, 1]
    expected = (G[above] - factor * G[floor]) / (2.0 * grid.h)
    assert abs(grads[floor, 2] - expected) < 1e-12 * max(1.0, abs(expected))

    for a, D in enumerate(gradient_matrices(grid, op.floor_ghost)):
        assert np.allclose(D @ G, grads[:, a]), f"Axis {a}: sparse and dense gradients disagree"
    print("PASS: Floor gradient uses the Robin ghost")


def test_source_derivatives():
    domain = default_domain()
    op = assemble(domain, extend_to_D0(constant_pair(2)), make_grid(domain, 16, include_d0=True), 'green-real')
    y = (0.5, 0.5, 0.25)
    dz, = green_source_derivatives(op, y, 1, (2,))
    h = op.grid.h
    plus = solve_green(op, (0.5, 0.5, 0.25 + h), allow_near=True).values
    minus = solve_green(op, (0.5, 0.5, 0.25 - h), allow_near=True).values
    assert np.allclose(dz.values, (plus - minus) / (2 * h))

    try:
        green_source_derivatives(op, (0.5, 0.5, 0.1), 2, ((0, 0),))
        assert False, "Second derivatives need three cells of clearance"
    except ValueError as e:
        assert "clearance" in str(e)
    print("PASS: Source derivatives")


def test_solve_many_keeps_order():
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    op = assemble(domain, constant_pair(2), grid, 'cauchy')
    modes, _ = sine_modes(grid.patch_shape, 4)
    rhss = [-(op.data_map @ f) for f in modes]
    serial = solve_many(op, rhss, jobs=1)
    threaded = solve_many(op, rhss, jobs=3)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a, b)
    print("PASS: solve_many keeps order")


def test_field_dump():
    domain = default_domain()
    grid = make_grid(domain, 8, include_d0=False)
    values = np.arange(grid.n_active, dtype=float)
    with tempfile.TemporaryDirectory() as tmp:
        path = write_field(os.path.join(tmp, "u.field"), values, grid)
        data, h, was_complex = read_field(path)
    assert data.shape == grid.shape and h == grid.h and not was_complex
    assert np.allclose(data[grid.active].real, values)
    print("PASS: Field dump")


def run_all_tests():
    """Run all tests"""
    print("\nRunning solver tests...")

    test_make_grid()
    test_assemble_preconditions()
    test_manufactured_convergence()
    test_green_symmetry()
    test_green_bound()
    test_green_cache_hit_is_identical()
    test_flux_trace_reciprocity()
    test_eigenvalue_regime()
    test_robin_solves_where_dirichlet_fails()
    test_cell_gradient_of_linear_field()
    test_floor_gradient_uses_robin_ghost()
    test_source_derivatives()
    test_solve_many_keeps_order()
    test_field_dump()

    print("\nAll tests passed")


if __name__ == "__main__":
    run_all_tests()
