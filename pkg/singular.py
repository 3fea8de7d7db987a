"""
singular.py - Singular solutions S_k and their source derivatives as quadratures over U_k

    S_k(y, z) = int_{U_k} (sigma1 - sigma2) grad_x G1(x, y) . grad_x G2(x, z)
                          + (q2 - q1) G1(x, y) G2(x, z) dx

G1 and G2 are the discrete Green fields of the two coefficient pairs on Omega0. The
integral is a midpoint sum over the U_k cells with centred cell gradients; the cells
within two cells of either source are left out. Source derivatives replace the Green
fields by their centred differences over shifted sources.

Sources must sit in W_k, at least 4h (5h, 6h for first and second derivatives) from U_k.
"""
import math
from dataclasses import dataclass, field, replace
import threading

import numpy as np
from scipy import stats

from coefficients import error_functionals, extend_to_D0
from geometry import chain_sets, distance_to_u
from solver import (assemble, cell_gradient, gradient_matrices, green_source_derivatives, make_grid,
                    solve_green, solve_system)

SINGULAR_DEFAULTS = {
    'bc': 'green',
    'exclusion_cells': 2,
    'clearance_cells': (4, 5, 6),   # S, first derivatives, second derivatives
    'drop_smallest': 2,
    # S_k(y, y) ~ 1/r; the band around -1 is discretisation slack
    'blowup_slope_floor': -1.4,
    'blowup_slope_ceiling': -0.7,
}

AXES = 'xyz'


@dataclass
class SingularProblem:
    domain: object
    grid: object
    op1: object
    op2: object
    cache: object = None
    options: dict = field(default_factory=lambda: dict(SINGULAR_DEFAULTS))
    _fields: dict = field(default_factory=dict, repr=False)
    _gradients: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def h(self):
        return self.grid.h

    @property
    def pair1(self):
        return self.op1.pair

    @property
    def pair2(self):
        return self.op2.pair


def singular_problem(domain, pair1, pair2, resolution, bc=None, cache=None, solver_options=None, options=None):
    """Both Green operators on one Omega0 grid. Pairs are extended to D0 if needed."""
    opts = dict(SINGULAR_DEFAULTS)
    opts.update(options or {})
    bc = bc or opts['bc']
    if bc not in ('green', 'green-real'):
        raise ValueError(f"Singular solutions need a Green operator, got bc={bc}")
    pair1 = pair1 if pair1.extended else extend_to_D0(pair1)
    pair2 = pair2 if pair2.extended else extend_to_D0(pair2)
    grid = make_grid(domain, resolution, include_d0=True)
    op1 = assemble(domain, pair1, grid, bc, solver_options)
    op2 = assemble(domain, pair2, grid, bc, solver_options)
    return SingularProblem(domain=domain, grid=grid, op1=op1, op2=op2, cache=cache, options=opts)


def _green(problem, which, point, order=0, direction=None):
    """Green field values of pair `which` (1 or 2), possibly source-differentiated."""
    op = problem.op1 if which == 1 else problem.op2
    cell = problem.grid.locate(point)
    key = (which, cell, order, direction)
    with problem._lock:
        if key in problem._fields:
            return problem._fields[key]
    if order == 0:
        values = solve_green(op, point, cache=problem.cache, allow_near=True).values
    else:
        values = green_source_derivatives(op, point, order, [direction], cache=problem.cache)[0].values
    with problem._lock:
        problem._fields[key] = values
    return values


def _gradient(problem, which, point, order=0, direction=None):
    key = (which, problem.grid.locate(point), order, direction)
    with problem._lock:
        if key in problem._gradients:
            return problem._gradients[key]
    op = problem.op1 if which == 1 else problem.op2
    grads = cell_gradient(_green(problem, which, point, order, direction), problem.grid,
                          floor_ghost=op.floor_ghost)
    with problem._lock:
        problem._gradients[key] = grads
    return grads


def _differences(problem, mask):
    """sigma1 - sigma2 and q2 - q1 on the cells of a full-grid mask."""
    grid = problem.grid
    centers = grid.centers()[mask]
    region = grid.region[mask]
    g1, q1, A1 = problem.pair1.cell_values(centers, region)
    g2, q2, A2 = problem.pair2.cell_values(centers, region)
    return g1[:, None, None] * A1 - g2[:, None, None] * A2, q2 - q1


def _exclusion(grid, points, cells):
    """Full-grid mask of cells within `cells` index steps of any of the points' cells."""
    mask = np.zeros(grid.shape, dtype=bool)
    for p in points:
        i, j, k = grid.locate(p)
        mask[max(i - cells, 0):i + cells + 1, max(j - cells, 0):j + cells + 1, max(k - cells, 0):k + cells + 1] = True
    return mask


def _scalar(value):
    value = complex(value)
    return value if value.imag != 0.0 else value.real


def _quadrature(problem, mask, y, z, field1, field2):
    """Midpoint sum of the integrand over the masked cells, sources' neighbourhoods removed."""
    grid = problem.grid
    mask = mask & grid.active & ~_exclusion(grid, (y, z), problem.options['exclusion_cells'])
    if not np.any(mask):
        return 0.0
    ids = grid.cell_id[mask]
    v1, grad1 = field1
    v2, grad2 = field2
    dsigma, dq = _differences(problem, mask)
    integrand = np.einsum('nab,na,nb->n', dsigma, grad1[ids], grad2[ids]) + dq * v1[ids] * v2[ids]
    return _scalar(integrand.sum() * grid.h ** 3)


def _check_sources(problem, k, points, clearance_cells):
    domain = problem.domain
    if not 0 <= k <= domain.N:
        raise ValueError(f"Chain index {k} outside 0..{domain.N}")
    need = clearance_cells * problem.h
    for p in points:
        region = domain.region_index(np.asarray(p, dtype=float))
        if region < 0 or region > k:
            raise ValueError(f"Source {list(p)} is not in W_{k}")
        centre = problem.grid.center_of(problem.grid.locate(p))
        clearance = distance_to_u(domain, k, centre)
        if clearance < need - 1e-12:
            raise ValueError(f"Source {list(p)} is {clearance:.4g} from U_{k}, needs at least {need:.4g}")


def _u_mask(problem, k):
    return chain_sets(problem.domain, k, problem.grid).u_mask


@dataclass
class SingularEvaluation:
    k: int
    y: tuple
    z: tuple
    value: complex
    first: np.ndarray = None        # first[i, j] = d_{y_i} d_{z_j} S_k
    second: dict = None             # 'ij' -> d^2_{y_i y_j} d^2_{z_i z_j} S_k
    distance_y: float = None
    distance_z: float = None

    def to_dict(self):
        record = {'k': self.k, 'y': list(self.y), 'z': list(self.z), 'value': self.value,
                  'distance_y': self.distance_y, 'distance_z': self.distance_z}
        if self.first is not None:
            record['first'] = [[_scalar(v) for v in row] for row in self.first]
        if self.second is not None:
            record['second'] = {key: _scalar(v) for key, v in self.second.items()}
        return record


def singular_S(problem, k, y, z):
    _check_sources(problem, k, (y, z), problem.options['clearance_cells'][0])
    value = _quadrature(problem, _u_mask(problem, k), y, z,
                        (_green(problem, 1, y), _gradient(problem, 1, y)),
                        (_green(problem, 2, z), _gradient(problem, 2, z)))
    domain = problem.domain
    return SingularEvaluation(k=k, y=tuple(y), z=tuple(z), value=value,
                              distance_y=distance_to_u(domain, k, y), distance_z=distance_to_u(domain, k, z))


def singular_dS(problem, k, y, z, i, j):
    """d_{y_i} d_{z_j} S_k(y, z)."""
    _check_sources(problem, k, (y, z), problem.options['clearance_cells'][1])
    return _quadrature(problem, _u_mask(problem, k), y, z,
                       (_green(problem, 1, y, 1, int(i)), _gradient(problem, 1, y, 1, int(i))),
                       (_green(problem, 2, z, 1, int(j)), _gradient(problem, 2, z, 1, int(j))))


def singular_d2S(problem, k, y, z, i, j):
    """d^2_{y_i y_j} d^2_{z_i z_j} S_k(y, z)."""
    _check_sources(problem, k, (y, z), problem.options['clearance_cells'][2])
    d = (int(i), int(j))
    return _quadrature(problem, _u_mask(problem, k), y, z,
                       (_green(problem, 1, y, 2, d), _gradient(problem, 1, y, 2, d)),
                       (_green(problem, 2, z, 2, d), _gradient(problem, 2, z, 2, d)))


def singular_evaluation(problem, k, y, z, derivatives=True):
    """S_k with the full 3 x 3 first-derivative matrix and the six second derivatives."""
    result = singular_S(problem, k, y, z)
    if not derivatives:
        return result
    first = np.array([[singular_dS(problem, k, y, z, i, j) for j in range(3)] for i in range(3)])
    second = {f"{AXES[i]}{AXES[j]}": singular_d2S(problem, k, y, z, i, j)
              for i in range(3) for j in range(i, 3)}
    return replace(result, first=first, second=second)


def singular_slice(problem, k, z):
    """
    S_k(y, z) for every cell y at once.

    S_k(., z) is the pair-1 Green field paired with a weight supported near U_k,
    so a single solve with the transposed pair-1 operator gives the whole slice.
    Sources near U_k are not excluded here.
    """
    _check_sources(problem, k, (z,), problem.options['clearance_cells'][0])
    grid = problem.grid
    mask = _u_mask(problem, k) & grid.active
    ids = grid.cell_id[mask]
    v2 = _green(problem, 2, z)
    grad2 = _gradient(problem, 2, z)
    dsigma, dq = _differences(problem, mask)
    n = grid.n_active
    weight = np.zeros(n, dtype=np.result_type(v2, float))
    weight[ids] = dq * v2[ids]
    flux = np.einsum('nab,nb->na', dsigma, grad2[ids])
    for a, D in enumerate(gradient_matrices(grid, problem.op1.floor_ghost)):
        column = np.zeros(n, dtype=weight.dtype)
        column[ids] = flux[:, a]
        weight += D.T @ column
    weight *= grid.h ** 3
    transposed = replace(problem.op1, matrix=problem.op1.matrix.T.tocsr(), key=problem.op1.key + ':T',
                         _lu=None, _regime=None, _lock=threading.Lock())
    return -solve_system(transposed, weight) / grid.h ** 3


def slice_residual(problem, k, z, slice_values=None, margin_cells=2):
    """
    How far the y-slice is from solving the pair-1 equation in W_k.

    The transposed operator is applied to the slice; the result is compared on W_k
    cells at least margin_cells from U_k against its largest entry anywhere.
    """
    values = singular_slice(problem, k, z) if slice_values is None else slice_values
    applied = np.abs(problem.op1.matrix.T @ values)
    grid = problem.grid
    top = chain_sets(problem.domain, k, grid).top
    centers = grid.active_centers()
    far = (grid.region[grid.active] <= k) & (centers[:, 2] < top - margin_cells * grid.h)
    scale = float(applied.max())
    if scale == 0.0 or not np.any(far):
        return 0.0
    return float(applied[far].max() / scale)


@dataclass
class IdentityResidual:
    k: int
    lhs: complex
    rhs: complex
    singular_part: complex
    w_part: complex
    residual: float

    def to_dict(self):
        return {'k': self.k, 'lhs': self.lhs, 'rhs': self.rhs, 'singular_part': self.singular_part,
                'w_part': self.w_part, 'residual': self.residual}


def _sigma_faces(problem):
    """Unknown indices above and below each Sigma face."""
    grid = problem.grid
    layer = int(round(problem.domain.depth / grid.h))
    ix0, ix1, iy0, iy1 = grid.sigma_cells
    up = grid.cell_id[ix0:ix1, iy0:iy1, layer].ravel()
    down = grid.cell_id[ix0:ix1, iy0:iy1, layer - 1].ravel()
    return up, down


def _face_sigma(pair, grid, up, down):
    """Face coefficient across Sigma, harmonic in gamma and arithmetic in A_zz like the operator."""
    centers = grid.active_centers()
    region = grid.region[grid.active]
    g_up, _, A_up = pair.cell_values(centers[up], region[up])
    g_down, _, A_down = pair.cell_values(centers[down], region[down])
    return 2.0 * g_up * g_down / (g_up + g_down) * 0.5 * (A_up[:, 2, 2] + A_down[:, 2, 2])


def green_identity_residual(problem, k, y, z):
    """
    Boundary side over Sigma against S_k plus the W_k n Omega volume term.

    lhs = sum over Sigma faces of h^2 [F2 G1 - F1 G2], F the flux sigma grad G . e_z
    through the face and G the value in the cell above it.
    """
    domain = problem.domain
    for p in (y, z):
        if domain.region_index(np.asarray(p, dtype=float)) != 0:
            raise ValueError(f"Source {list(p)} must lie in D0")
    if not 0 <= k <= domain.N:
        raise ValueError(f"Chain index {k} outside 0..{domain.N}")
    grid = problem.grid
    h = grid.h
    G1 = _green(problem, 1, y)
    G2 = _green(problem, 2, z)
    up, down = _sigma_faces(problem)
    F1 = _face_sigma(problem.pair1, grid, up, down) * (G1[up] - G1[down]) / h
    F2 = _face_sigma(problem.pair2, grid, up, down) * (G2[up] - G2[down]) / h
    terms = F2 * G1[up] - F1 * G2[up]
    lhs = _scalar(h ** 2 * terms.sum())

    field1 = (G1, _gradient(problem, 1, y))
    field2 = (G2, _gradient(problem, 2, z))
    sets = chain_sets(domain, k, grid)
    s_part = _quadrature(problem, sets.u_mask, y, z, field1, field2)
    w_part = _quadrature(problem, sets.w_mask & (grid.region > 0), y, z, field1, field2)
    rhs = _scalar(complex(s_part) + complex(w_part))

    size = max(abs(lhs), abs(rhs))
    scale = h ** 2 * float(np.sum(np.abs(F2 * G1[up]) + np.abs(F1 * G2[up])))
    residual = 0.0 if size <= 1e-12 * max(scale, 1e-300) else abs(complex(lhs) - complex(rhs)) / size
    return IdentityResidual(k=k, lhs=lhs, rhs=rhs, singular_part=s_part, w_part=w_part, residual=float(residual))


def singular_blowup(problem, k, radii_cells, column=None, drop_smallest=None):
    """
    |S_k(y, y)| as y approaches the interface on top of W_k.

    y sits in the cell column through `column` (default the anchor of that interface)
    at r = (j + 1/2) h below it for j in radii_cells. The log-log slope is fitted
    after dropping the smallest radii; r^(n-2) |S| / E is the fitted bound constant.
    """
    domain = problem.domain
    if not 0 <= k < domain.N:
        raise ValueError(f"U_{k} is empty; pick k below {domain.N}")
    drop = problem.options['drop_smallest'] if drop_smallest is None else drop_smallest
    radii_cells = sorted(int(j) for j in radii_cells)
    if len(radii_cells) - drop < 2:
        raise ValueError(f"Need at least {drop + 2} radii, got {len(radii_cells)}")
    grid = problem.grid
    anchor = domain.anchors()[k]
    cx, cy = (column or anchor)[:2]
    top = chain_sets(domain, k, grid).top
    E = error_functionals(problem.pair1, problem.pair2, domain, max(k, 1)).E

    rows = []
    for j in radii_cells:
        y = (cx, cy, top - (j + 0.5) * grid.h)
        y = grid.center_of(grid.locate(y))
        value = singular_S(problem, k, y, y).value
        r = top - y[2]
        rows.append({'j': j, 'r': r, 'value': value, 'abs_value': abs(value),
                     'bound_constant': r * abs(value) / E if E > 0 else math.nan})

    floor = problem.options['blowup_slope_floor']
    ceiling = problem.options['blowup_slope_ceiling']
    fit_rows = rows[drop:]
    if any(row['abs_value'] == 0.0 for row in fit_rows):
        raise ValueError("S_k vanishes at some radius; the coefficients agree on U_k")
    fit = stats.linregress(np.log([row['r'] for row in fit_rows]), np.log([row['abs_value'] for row in fit_rows]))
    return {
        'k': k,
        'rows': rows,
        'slope': float(fit.slope),
        'intercept': float(fit.intercept),
        'stderr': float(fit.stderr),
        'dropped': drop,
        'bound_slope': (floor, ceiling),
        'bound_ok': bool(floor <= fit.slope <= ceiling),
    }
