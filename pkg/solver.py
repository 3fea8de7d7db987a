"""
solver.py - Finite-volume discretization of div(sigma grad u) + q u on the box grid

Cells are centred on a uniform grid of spacing h; every interface and every patch
(Sigma, Sigma0) sits on cell faces. Face coefficients use the harmonic mean of gamma
and the arithmetic mean of A, and q is lumped at cell centres.

Boundary condition sets (the `bc` tag):
- green       Robin sigma grad G . nu + i G = 0 on Sigma0, Dirichlet zero elsewhere
- green-real  Dirichlet zero everywhere (real oracle mode)
- cauchy      Dirichlet data on Sigma, zero elsewhere (grid without D0)

The assembled matrix represents the operator itself, so an interior row of the
Laplacian reads (-6/h^2, 1/h^2 x 6). Green fields solve -(div sigma grad G + q G) = delta_h,
which makes G close to +Gamma near the source.
"""
import hashlib
import json
import math
import struct
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from coefficients import pair_to_dict

SOLVER_DEFAULTS = {
    'direct_max_unknowns': 8000,
    'rtol': 1e-10,
    'maxiter': 20000,
    'near_eigenvalue_tol': 1e-8,
    'clearance_cells': 2,
}

BC_MODES = ('green', 'green-real', 'cauchy')

# Relative tolerance when checking that planes fall on grid faces
ALIGN_TOL = 1e-8

FIELD_MAGIC = b'GFLD'
FIELD_HEADER = struct.Struct('<4sIIIdB')


class SolverError(RuntimeError):
    """A linear solve did not converge or the matrix could not be factored."""


class EigenvalueRegimeWarning(UserWarning):
    """The Dirichlet operator is close to singular (q near a Dirichlet eigenvalue)."""


class EigenvalueRegimeError(RuntimeError):
    """Raised instead of the warning when the run policy is 'abort'."""


@dataclass
class Grid:
    shape: tuple
    h: float
    origin: tuple
    region: np.ndarray          # -1 for cells outside Omega0
    cell_id: np.ndarray         # position in the unknown vector, -1 outside
    include_d0: bool
    sigma_cells: tuple          # (ix0, ix1, iy0, iy1) of the Sigma footprint
    sigma0_cells: tuple

    @property
    def n_active(self):
        return int(np.count_nonzero(self.cell_id >= 0))

    @property
    def active(self):
        return self.cell_id >= 0

    @property
    def patch_shape(self):
        ix0, ix1, iy0, iy1 = self.sigma_cells
        return (ix1 - ix0, iy1 - iy0)

    def centers(self):
        """Cell centres as an (nx, ny, nz, 3) array."""
        axes = [self.origin[a] + (np.arange(self.shape[a]) + 0.5) * self.h for a in range(3)]
        mesh = np.meshgrid(*axes, indexing='ij')
        return np.stack(mesh, axis=-1)

    def active_centers(self):
        return self.centers()[self.active]

    def locate(self, point):
        """Index (i, j, k) of the cell holding the point."""
        p = np.asarray(point, dtype=float)
        idx = np.floor((p - np.asarray(self.origin)) / self.h + 1e-9).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            raise ValueError(f"Point {p.tolist()} lies outside the grid")
        return tuple(int(i) for i in idx)

    def center_of(self, idx):
        return tuple(self.origin[a] + (idx[a] + 0.5) * self.h for a in range(3))

    def to_dict(self):
        return {'shape': list(self.shape), 'h': self.h, 'origin': list(self.origin),
                'include_d0': self.include_d0}

    def to_array(self, values, fill=0.0):
        """Scatter an active-cell vector back onto the full grid."""
        out = np.full(self.shape, fill, dtype=np.result_type(values, type(fill)))
        out[self.active] = values
        return out


def _aligned_count(length, h, what):
    count = length / h
    rounded = int(round(count))
    if rounded <= 0 or abs(count - rounded) > ALIGN_TOL * max(1.0, count):
        raise ValueError(f"Misaligned grid: {what} ({length:.6g}) is not a multiple of h = {h:.6g}")
    return rounded


def _patch_cells(patch, origin, h, what):
    x0, x1, y0, y1 = patch.bounds
    ix0 = _aligned_count(x0 - origin[0], h, f"{what} x start") if x0 > origin[0] + ALIGN_TOL * h else 0
    iy0 = _aligned_count(y0 - origin[1], h, f"{what} y start") if y0 > origin[1] + ALIGN_TOL * h else 0
    return (ix0, ix0 + _aligned_count(x1 - x0, h, f"{what} x width"),
            iy0, iy0 + _aligned_count(y1 - y0, h, f"{what} y width"))


def make_grid(domain, resolution, include_d0=True):
    """
    Uniform grid with `resolution` cells across the height of Omega.

    Every cut, the box sides, D0 and both patches must land on cell faces.
    """
    resolution = int(resolution)
    if resolution < 2:
        raise ValueError(f"Grid resolution must be at least 2, got {resolution}")
    box = domain.box
    h = box.size[2] / resolution
    nx = _aligned_count(box.size[0], h, "box x extent")
    ny = _aligned_count(box.size[1], h, "box y extent")
    for cut in domain.partition.cuts:
        _aligned_count(cut - box.lower[2], h, f"cut at z={cut}")

    if include_d0:
        nz = resolution + _aligned_count(domain.depth, h, "D0 depth")
        origin = (box.lower[0], box.lower[1], box.lower[2] - domain.depth)
    else:
        nz = resolution
        origin = tuple(box.lower)

    sigma_cells = _patch_cells(domain.sigma, origin, h, "Sigma")
    sigma0_cells = _patch_cells(domain.sigma0, origin, h, "Sigma0")

    shape = (nx, ny, nz)
    axes = [origin[a] + (np.arange(shape[a]) + 0.5) * h for a in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
    region = domain.region_index(centers.reshape(-1, 3)).reshape(shape)
    if not include_d0:
        region[region == 0] = -1

    cell_id = np.full(shape, -1, dtype=np.int64)
    active = region >= 0
    cell_id[active] = np.arange(int(np.count_nonzero(active)))
    return Grid(shape=shape, h=h, origin=origin, region=region, cell_id=cell_id,
                include_d0=include_d0, sigma_cells=sigma_cells, sigma0_cells=sigma0_cells)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _shift(arr, axis, step, fill):
    """arr shifted so out[i] = arr[i + step] along axis, padded with fill."""
    out = np.full_like(arr, fill)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if step > 0:
        src[axis], dst[axis] = slice(step, None), slice(None, -step)
    else:
        src[axis], dst[axis] = slice(None, step), slice(-step, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def patch_difference_matrices(patch_shape, h):
    """Central differences along x and y on a patch, zero extension outside it."""
    mx, my = patch_shape
    def one_d(m):
        return sparse.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1], shape=(m, m)) / (2.0 * h)
    dx = sparse.kron(one_d(mx), sparse.identity(my))
    dy = sparse.kron(sparse.identity(mx), one_d(my))
    return dx.tocsr(), dy.tocsr()


@dataclass
class DiscreteOperator:
    matrix: sparse.csr_matrix
    grid: Grid
    bc: str
    domain: object
    pair: object
    key: str
    data_map: object = None         # rows x Sigma patch values, cauchy mode only
    patch_cells: np.ndarray = None  # unknown index of the cell above each Sigma node
    floor_ghost: np.ndarray = None  # ghost / cell factor under each Sigma0 floor cell, green mode only
    options: dict = field(default_factory=lambda: dict(SOLVER_DEFAULTS))
    _lu: object = None
    _regime: str = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def is_complex(self):
        return np.iscomplexobj(self.matrix.data)

    @property
    def h(self):
        return self.grid.h


def operator_key(domain, pair, grid, bc):
    payload = {'domain': domain.to_dict(), 'pair': pair_to_dict(pair), 'grid': grid.to_dict(), 'bc': bc}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def assemble(domain, pair, grid, bc, options=None):
    """
    Build the finite-volume operator for one boundary condition set.

    The pair must be extended to D0 whenever the grid includes D0.
    """
    if bc not in BC_MODES:
        raise ValueError(f"Unknown boundary condition set: {bc}")
    if bc == 'green' and not grid.include_d0:
        raise ValueError("The Robin Green system lives on Omega0; build the grid with D0")
    if bc == 'cauchy' and grid.include_d0:
        raise ValueError("Cauchy solves live on Omega; build the grid without D0")
    if grid.include_d0 and not pair.extended:
        raise ValueError("Extend the coefficient pair to D0 before assembling on Omega0")
    if pair.N != domain.N:
        raise ValueError(f"Pair has {pair.N} slabs but the domain has {domain.N}")

    h = grid.h
    active = grid.active
    n = grid.n_active
    ids = grid.cell_id
    centers = grid.centers()
    gamma_c, q_c, A_c = pair.cell_values(centers[active], grid.region[active])

    # Full-grid copies so neighbours can be looked up by shifting
    gamma = np.zeros(grid.shape)
    gamma[active] = gamma_c
    A = np.zeros(grid.shape + (3, 3))
    A[active] = A_c

    rows, cols, vals = [], [], []
    diag = np.array(q_c, dtype=float)
    robin = np.zeros(n, dtype=complex)

    is_sigma_node = np.zeros(grid.shape[:2], dtype=bool)
    ix0, ix1, iy0, iy1 = grid.sigma_cells
    is_sigma_node[ix0:ix1, iy0:iy1] = True
    is_sigma0_node = np.zeros(grid.shape[:2], dtype=bool)
    jx0, jx1, jy0, jy1 = grid.sigma0_cells
    is_sigma0_node[jx0:jx1, jy0:jy1] = True

    data_rows, data_cols, data_vals = [], [], []
    mx, my = grid.patch_shape
    robin_faces = 0
    floor_ghost = np.full(grid.shape[:2], -1.0 + 0j)

    for a in range(3):
        # interior faces between cell c and c + e_a
        nb_ids = _shift(ids, a, 1, -1)
        interior = (ids >= 0) & (nb_ids >= 0)
        lo, hi = ids[interior], nb_ids[interior]
        g_lo = gamma[interior]
        g_hi = _shift(gamma, a, 1, 0.0)[interior]
        A_hi = _shift(A[..., a, a], a, 1, 0.0)[interior]
        s = _harmonic(g_lo, g_hi) * 0.5 * (A[..., a, a][interior] + A_hi) / h ** 2
        rows += [lo, hi]
        cols += [hi, lo]
        vals += [s, s]
        np.subtract.at(diag, lo, s)
        np.subtract.at(diag, hi, s)

        # boundary faces on both sides of each active cell
        for step in (-1, 1):
            nb = _shift(ids, a, step, -1)
            boundary = (ids >= 0) & (nb < 0)
            if not np.any(boundary):
                continue
            cells = ids[boundary]
            sigma_nn = gamma[boundary] * A[..., a, a][boundary]
            coeff = 2.0 * sigma_nn / h ** 2
            kind = np.zeros(len(cells), dtype=int)     # 0 Dirichlet zero, 1 data, 2 Robin
            if a == 2 and step == -1:
                bi, bj, bk = np.nonzero(boundary)
                if grid.include_d0:
                    on_floor = (bk == 0) & is_sigma0_node[bi, bj]
                    if bc == 'green':
                        kind[on_floor] = 2
                else:
                    on_sigma = (bk == 0) & is_sigma_node[bi, bj]
                    if bc == 'cauchy':
                        kind[on_sigma] = 1
                        patch_index = (bi - ix0) * my + (bj - iy0)
                        data_rows.append(cells[on_sigma])
                        data_cols.append(patch_index[on_sigma])
                        data_vals.append(coeff[on_sigma])

            plain = kind != 2
            np.subtract.at(diag, cells[plain], coeff[plain])
            if np.any(kind == 2):
                robin_faces += int(np.count_nonzero(kind == 2))
                a_coef = 2.0 * sigma_nn[kind == 2] / h
                np.add.at(robin, cells[kind == 2], -(1j * a_coef / (a_coef + 1j)) / h)
                # face value a u / (a + i), so the ghost 2 u_f - u is (a - i) u / (a + i)
                floor_ghost[bi[kind == 2], bj[kind == 2]] = (a_coef - 1j) / (a_coef + 1j)

    off_diag = np.abs(A_c - A_c * np.eye(3)).max() if n else 0.0
    matrix = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(n, n)).tocsr()
    matrix = matrix + sparse.diags(diag)
    if off_diag > 0.0:
        matrix = matrix + _cross_terms(grid, gamma, A)
    if robin_faces:
        matrix = matrix.astype(complex) + sparse.diags(robin)

    data_map = None
    patch_cells = None
    if bc == 'cauchy':
        data_map = sparse.coo_matrix(
            (np.concatenate(data_vals), (np.concatenate(data_rows), np.concatenate(data_cols))),
            shape=(n, mx * my)).tocsr()
        bi, bj = np.meshgrid(np.arange(ix0, ix1), np.arange(iy0, iy1), indexing='ij')
        patch_cells = ids[bi.ravel(), bj.ravel(), 0]
        if off_diag > 0.0:
            # tangential part of the flux through Sigma, known from the data
            dx, dy = patch_difference_matrices((mx, my), h)
            A_patch = A[bi.ravel(), bj.ravel(), 0]
            g_patch = gamma[bi.ravel(), bj.ravel(), 0]
            cross = sparse.diags(-g_patch * A_patch[:, 2, 0] / h) @ dx + \
                sparse.diags(-g_patch * A_patch[:, 2, 1] / h) @ dy
            lift = sparse.coo_matrix((np.ones(mx * my), (patch_cells, np.arange(mx * my))), shape=(n, mx * my))
            data_map = (data_map + lift @ cross).tocsr()

    opts = dict(SOLVER_DEFAULTS)
    opts.update(options or {})
    return DiscreteOperator(matrix=matrix.tocsr(), grid=grid, bc=bc, domain=domain, pair=pair,
                            key=operator_key(domain, pair, grid, bc), data_map=data_map,
                            patch_cells=patch_cells, floor_ghost=floor_ghost if robin_faces else None,
                            options=opts)


def _central_difference(grid, b):
    """Cell gradient component along b, one-sided where a neighbour is missing."""
    ids = grid.cell_id
    h = grid.h
    plus = _shift(ids, b, 1, -1)
    minus = _shift(ids, b, -1, -1)
    active = ids >= 0
    rows, cols, vals = [], [], []
    both = active & (plus >= 0) & (minus >= 0)
    rows += [ids[both], ids[both]]
    cols += [plus[both], minus[both]]
    vals += [np.full(both.sum(), 0.5 / h), np.full(both.sum(), -0.5 / h)]
    only_plus = active & (plus >= 0) & (minus < 0)
    rows += [ids[only_plus], ids[only_plus]]
    cols += [plus[only_plus], ids[only_plus]]
    vals += [np.full(only_plus.sum(), 1.0 / h), np.full(only_plus.sum(), -1.0 / h)]
    only_minus = active & (plus < 0) & (minus >= 0)
    rows += [ids[only_minus], ids[only_minus]]
    cols += [ids[only_minus], minus[only_minus]]
    vals += [np.full(only_minus.sum(), 1.0 / h), np.full(only_minus.sum(), -1.0 / h)]
    n = grid.n_active
    return sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()


def _cross_terms(grid, gamma, A):
    """div of sigma_ab d_b u through interior a-faces, for a != b."""
    ids = grid.cell_id
    h = grid.h
    n = grid.n_active
    diffs = [_central_difference(grid, b) for b in range(3)]
    total = sparse.csr_matrix((n, n))
    for a in range(3):
        nb_ids = _shift(ids, a, 1, -1)
        interior = (ids >= 0) & (nb_ids >= 0)
        lo, hi = ids[interior], nb_ids[interior]
        n_faces = len(lo)
        if n_faces == 0:
            continue
        face = np.arange(n_faces)
        average = sparse.coo_matrix((np.full(2 * n_faces, 0.5), (np.concatenate([face, face]),
                                                                 np.concatenate([lo, hi]))),
                                    shape=(n_faces, n)).tocsr()
        div = sparse.coo_matrix((np.concatenate([np.full(n_faces, 1.0 / h), np.full(n_faces, -1.0 / h)]),
                                 (np.concatenate([lo, hi]), np.concatenate([face, face]))),
                                shape=(n, n_faces)).tocsr()
        g_face = _harmonic(gamma[interior], _shift(gamma, a, 1, 0.0)[interior])
        for b in range(3):
            if b == a:
                continue
            A_face = 0.5 * (A[..., a, b][interior] + _shift(A[..., a, b], a, 1, 0.0)[interior])
            sigma_ab = g_face * A_face
            if not np.any(sigma_ab):
                continue
            total = total + div @ sparse.diags(sigma_ab) @ average @ diffs[b]
    return total


def _jacobi(matrix):
    d = matrix.diagonal()
    d = np.where(d == 0, 1.0, d)
    return splinalg.LinearOperator(matrix.shape, matvec=lambda v: v / d, dtype=matrix.dtype)


def _factor(op):
    with op._lock:
        if op._lu is None:
            try:
                op._lu = splinalg.splu(op.matrix.tocsc())
            except RuntimeError as e:
                raise SolverError(f"Direct factorization failed: {e}") from e
    return op._lu


def solve_system(op, rhs):
    """
    Solve op.matrix u = rhs.

    Small systems use a cached sparse LU. Larger ones go to Krylov methods with
    Jacobi preconditioning: TFQMR for the complex Robin system, CG on the negated
    matrix when it is symmetric definite, MINRES or GMRES otherwise.
    """
    rhs = np.asarray(rhs)
    if op.n <= op.options['direct_max_unknowns']:
        lu = _factor(op)
        if np.iscomplexobj(rhs) and not op.is_complex:
            u = lu.solve(np.ascontiguousarray(rhs.real)) + 1j * lu.solve(np.ascontiguousarray(rhs.imag))
        else:
            u = lu.solve(rhs.astype(op.matrix.dtype))
        if not np.all(np.isfinite(u)):
            raise SolverError("Direct solve produced non-finite values (singular operator)")
        return u

    rtol = op.options['rtol']
    maxiter = op.options['maxiter']
    M = _jacobi(op.matrix)
    if op.is_complex:
        u, info = splinalg.tfqmr(op.matrix, rhs.astype(complex), rtol=rtol, maxiter=maxiter, M=M)
    else:
        symmetric = abs(op.matrix - op.matrix.T).max() <= 1e-12 * abs(op.matrix).max()
        if symmetric and dirichlet_regime(op) == 'definite':
            neg = -op.matrix
            u, info = splinalg.cg(neg, -rhs, rtol=rtol, maxiter=maxiter, M=_jacobi(neg))
        elif symmetric:
            u, info = splinalg.minres(op.matrix, rhs, rtol=rtol, maxiter=maxiter)
        else:
            u, info = splinalg.gmres(op.matrix, rhs, rtol=rtol, maxiter=maxiter, M=M, restart=200)
    if info != 0:
        raise SolverError(f"Krylov solve did not converge (info={info}, n={op.n})")
    return u


def solve_many(op, rhss, jobs=1):
    """Solve for several right-hand sides; results keep the input order."""
    rhss = list(rhss)
    if jobs <= 1 or len(rhss) <= 1:
        return [solve_system(op, r) for r in rhss]
    if op.n <= op.options['direct_max_unknowns']:
        _factor(op)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda r: solve_system(op, r), rhss))


def dirichlet_regime(op):
    """
    Classify a real operator as 'definite', 'indefinite' or 'near_eigenvalue'.

    The smallest eigenvalue of the negated symmetric part comes from shift-invert
    below the spectrum; if it is not positive, the eigenvalue closest to zero decides
    whether the operator is nearly singular. Computed once per operator.
    """
    if op._regime is not None:
        return op._regime
    if op.is_complex:
        op._regime = 'definite'
        return op._regime
    sym = (-0.5 * (op.matrix + op.matrix.T)).tocsc()
    row_sums = np.asarray(abs(sym).sum(axis=1)).ravel()
    scale = float(row_sums.max())
    d = sym.diagonal()
    # Gershgorin lower bound of the spectrum, minus one
    shift = float(np.min(d - (row_sums - np.abs(d)))) - 1.0
    tol = op.options['near_eigenvalue_tol'] * scale
    if op.n < 3:
        eig = np.linalg.eigvalsh(sym.toarray())
        lam_min, lam_near = eig[0], eig[np.argmin(np.abs(eig))]
    else:
        try:
            lam_min = splinalg.eigsh(sym, k=1, sigma=shift, which='LM',
                                     return_eigenvectors=False)[0]
        except (RuntimeError, splinalg.ArpackNoConvergence):
            lam_min = -math.inf
        lam_near = None
        if lam_min <= tol:
            try:
                lam_near = splinalg.eigsh(sym, k=1, sigma=0.0, which='LM', return_eigenvectors=False)[0]
            except (RuntimeError, splinalg.ArpackNoConvergence):
                lam_near = 0.0
    if lam_min > tol:
        op._regime = 'definite'
    elif abs(lam_near) <= tol:
        op._regime = 'near_eigenvalue'
    else:
        op._regime = 'indefinite'
    return op._regime


@dataclass
class DiscreteGreenField:
    source: tuple       # centre of the source cell
    cell: tuple
    values: np.ndarray  # active-cell vector
    grid: Grid

    @property
    def h(self):
        return self.grid.h

    def as_array(self):
        return self.grid.to_array(self.values)

    def at(self, point):
        cid = self.grid.cell_id[self.grid.locate(point)]
        if cid < 0:
            raise ValueError(f"Point {list(point)} is outside Omega0")
        return self.values[cid]


@dataclass
class DirichletSolution:
    values: np.ndarray
    f: np.ndarray
    regime: str
    op: DiscreteOperator


def region_clearance(grid, domain, cell):
    """Distance from a cell centre to the faces of the box making up its region."""
    c = np.asarray(grid.center_of(cell))
    region = int(grid.region[cell])
    if region < 0:
        raise ValueError(f"Cell {cell} lies outside Omega0")
    if region == 0:
        lower, upper = domain.d0_bounds
    else:
        lower, upper = domain.partition.slab_bounds(region)
    return float(min(np.min(c - np.asarray(lower)), np.min(np.asarray(upper) - c)))


def solve_green(op, y, cache=None, allow_near=False):
    """
    Green field of the operator for a source snapped to the cell holding y.

    Sources need clearance_cells * h from every interface and boundary unless
    allow_near is set.
    """
    if op.bc == 'cauchy':
        raise ValueError("Green fields need the 'green' or 'green-real' operator")
    grid = op.grid
    cell = grid.locate(y)
    cid = grid.cell_id[cell]
    if cid < 0:
        raise ValueError(f"Source {list(y)} lies outside Omega0")
    if not allow_near:
        need = op.options['clearance_cells'] * grid.h
        if region_clearance(grid, op.domain, cell) < need - 1e-12:
            raise ValueError(f"Source {list(y)} is closer than {need:.4g} to an interface or the boundary")

    if cache is not None:
        hit = cache.get(op.key, cell)
        if hit is not None:
            return DiscreteGreenField(source=grid.center_of(cell), cell=cell, values=hit, grid=grid)

    rhs = np.zeros(op.n, dtype=op.matrix.dtype)
    rhs[cid] = -1.0 / grid.h ** 3
    values = solve_system(op, rhs)
    if cache is not None:
        cache.put(op.key, cell, values)
    return DiscreteGreenField(source=grid.center_of(cell), cell=cell, values=values, grid=grid)


def solve_dirichlet(op, f, policy='warn'):
    """
    Discrete solution with u = f on Sigma and u = 0 on the rest of the boundary.

    Near a Dirichlet eigenvalue an EigenvalueRegimeWarning is emitted (or, with
    policy 'abort', EigenvalueRegimeError raised) and the solution is marked.
    """
    if op.bc != 'cauchy':
        raise ValueError("Dirichlet solves need the 'cauchy' operator")
    f = np.asarray(f).ravel()
    if f.size != op.data_map.shape[1]:
        raise ValueError(f"Boundary data has {f.size} values, Sigma has {op.data_map.shape[1]} nodes")
    regime = dirichlet_regime(op)
    if regime == 'near_eigenvalue':
        message = "Dirichlet operator is close to singular; q is near a Dirichlet eigenvalue"
        if policy == 'abort':
            raise EigenvalueRegimeError(message)
        warnings.warn(message, EigenvalueRegimeWarning, stacklevel=2)
    if not np.any(f):
        return DirichletSolution(values=np.zeros(op.n, dtype=np.result_type(op.matrix.dtype, f.dtype)),
                                 f=f, regime=regime, op=op)
    values = solve_system(op, -(op.data_map @ f))
    return DirichletSolution(values=values, f=f, regime=regime, op=op)


TRACE_SCHEMES = ('second_order', 'flux')


def conormal_trace(op, values, f=None, patch=None, scheme='second_order'):
    """
    sigma grad u . nu on the Sigma nodes, nu = -e_z.

    second_order: one-sided difference across the two cells above each node, plus
                  the tangential part sigma_zx d_x f + sigma_zy d_y f of the flux
    flux:         the finite-volume face flux 2 sigma (f - u_P) / h the operator
                  itself uses; with it the discrete Green identities hold exactly
    """
    if scheme not in TRACE_SCHEMES:
        raise ValueError(f"Unknown trace scheme: {scheme}")
    grid = op.grid
    if op.bc != 'cauchy':
        raise ValueError("Conormal traces are taken on the Cauchy grid")
    if patch is not None and patch != op.domain.sigma:
        if abs(patch.height - op.domain.box.lower[2]) > 1e-12:
            raise ValueError("Patch is not on the boundary of Omega")
        raise ValueError("Conormal traces are only available on Sigma")
    if grid.shape[2] < 2:
        raise ValueError("Need at least two cell layers above Sigma")
    mx, my = grid.patch_shape
    f = np.zeros(mx * my) if f is None else np.asarray(f).ravel()
    ix0, ix1, iy0, iy1 = grid.sigma_cells
    bi, bj = np.meshgrid(np.arange(ix0, ix1), np.arange(iy0, iy1), indexing='ij')
    first = grid.cell_id[bi.ravel(), bj.ravel(), 0]
    second = grid.cell_id[bi.ravel(), bj.ravel(), 1]
    h = grid.h

    if scheme == 'flux':
        # same coefficient as the data map: the cell value of sigma_zz
        return np.asarray(op.data_map[first, np.arange(mx * my)]).ravel() * h * (f - values[first])

    face = np.stack([grid.origin[0] + (bi.ravel() + 0.5) * h,
                     grid.origin[1] + (bj.ravel() + 0.5) * h,
                     np.full(mx * my, grid.origin[2])], axis=-1)
    gamma, _, A = op.pair.cell_values(face, np.ones(mx * my, dtype=int))
    sigma_z = gamma[:, None] * A[:, 2, :]

    normal = sigma_z[:, 2] * (8.0 * f - 9.0 * values[first] + values[second]) / (3.0 * h)
    dx, dy = patch_difference_matrices((mx, my), h)
    tangential = sigma_z[:, 0] * (dx @ f) + sigma_z[:, 1] * (dy @ f)
    return normal - tangential


def cell_gradient(values, grid, patch_values=None, floor_ghost=None):
    """
    Centred cell gradients (n_active x 3).

    Missing neighbours are replaced by ghost values 2 * face - u, the face value
    being the Sigma data on Sigma faces (Cauchy grid) and zero elsewhere.
    floor_ghost (from a green-mode operator) replaces the floor ghost by the
    Robin one, floor_ghost * u.
    """
    ids = grid.cell_id
    h = grid.h
    full = grid.to_array(values)
    active = ids >= 0
    grads = []
    face_data = None
    if patch_values is not None and not grid.include_d0:
        face_data = np.zeros(grid.shape[:2], dtype=np.result_type(values, patch_values))
        ix0, ix1, iy0, iy1 = grid.sigma_cells
        face_data[ix0:ix1, iy0:iy1] = np.asarray(patch_values).reshape(grid.patch_shape)
    for b in range(3):
        plus = _shift(full, b, 1, 0.0)
        minus = _shift(full, b, -1, 0.0)
        plus_ok = _shift(ids, b, 1, -1) >= 0
        minus_ok = _shift(ids, b, -1, -1) >= 0
        ghost_minus = -full
        if b == 2 and face_data is not None:
            ghost_minus = ghost_minus.copy()
            ghost_minus[:, :, 0] += 2.0 * face_data
        if b == 2 and floor_ghost is not None:
            ghost_minus = ghost_minus.astype(complex)
            ghost_minus[:, :, 0] = floor_ghost * full[:, :, 0]
        plus = np.where(plus_ok, plus, -full)
        minus = np.where(minus_ok, minus, ghost_minus)
        grads.append(((plus - minus) / (2.0 * h))[active])
    return np.stack(grads, axis=-1)


def gradient_matrices(grid, floor_ghost=None):
    """Sparse versions of cell_gradient (zero face data): one n x n matrix per axis."""
    ids = grid.cell_id
    h = grid.h
    active = ids >= 0
    n = grid.n_active
    mats = []
    for b in range(3):
        rows, cols, vals = [], [], []
        for step, sign in ((1, 1.0), (-1, -1.0)):
            nb = _shift(ids, b, step, -1)
            have = active & (nb >= 0)
            rows.append(ids[have])
            cols.append(nb[have])
            vals.append(np.full(int(have.sum()), sign / (2.0 * h)))
            # missing neighbour: ghost value -u, Robin factor on the floor
            ghost = active & (nb < 0)
            rows.append(ids[ghost])
            cols.append(ids[ghost])
            factor = np.full(grid.shape, -1.0 + 0j if floor_ghost is not None else -1.0)
            if b == 2 and step == -1 and floor_ghost is not None:
                factor[:, :, 0] = floor_ghost
            vals.append(sign * factor[ghost] / (2.0 * h))
        mats.append(sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                      shape=(n, n)).tocsr())
    return mats


def green_source_derivatives(op, y, order, directions, cache=None, jobs=1):
    """
    Source derivatives of the Green field by centred differences over shifted sources.

    order 1: directions are axes a, field (G(y + h e_a) - G(y - h e_a)) / 2h
    order 2: directions are pairs (a, b), three-point or four-point stencils
    The source needs (order + 1) cells of clearance.
    """
    if order not in (1, 2):
        raise ValueError(f"Source derivative order must be 1 or 2, got {order}")
    grid = op.grid
    h = grid.h
    cell = grid.locate(y)
    if grid.cell_id[cell] < 0:
        raise ValueError(f"Source {list(y)} lies outside Omega0")
    if region_clearance(grid, op.domain, cell) < (order + 1) * h - 1e-12:
        raise ValueError(f"Insufficient clearance for order-{order} source derivatives at {list(y)}")
    centre = np.asarray(grid.center_of(cell))
    memo = {}

    def field_at(offset):
        key = tuple(int(v) for v in offset)
        if key not in memo:
            point = centre + h * np.asarray(key, dtype=float)
            memo[key] = solve_green(op, point, cache=cache, allow_near=True).values
        return memo[key]

    def unit(a, scale=1):
        e = np.zeros(3, dtype=int)
        e[a] = scale
        return e

    out = []
    for d in directions:
        if order == 1:
            a = int(d)
            values = (field_at(unit(a)) - field_at(unit(a, -1))) / (2.0 * h)
        else:
            a, b = (int(v) for v in d)
            if a == b:
                values = (field_at(unit(a)) - 2.0 * field_at((0, 0, 0)) + field_at(unit(a, -1))) / h ** 2
            else:
                values = (field_at(unit(a) + unit(b)) - field_at(unit(a) - unit(b))
                          - field_at(unit(b) - unit(a)) + field_at(-unit(a) - unit(b))) / (4.0 * h ** 2)
        out.append(DiscreteGreenField(source=tuple(centre), cell=cell, values=values, grid=grid))
    return out


def green_bound(field, min_cells=4):
    """sup |G(x, y)| |x - y| over cells at least min_cells * h from the source."""
    centers = field.grid.active_centers()
    r = np.linalg.norm(centers - np.asarray(field.source), axis=1)
    mask = r >= min_cells * field.h - 1e-12
    if not np.any(mask):
        raise ValueError("No sample cells far enough from the source")
    return float(np.max(np.abs(field.values[mask]) * r[mask]))


def manufactured_error(op, exact, forcing):
    """
    Solve op u = forcing at cell centres (zero boundary data) and compare with exact.

    Returns the max-norm error and the discrete L2 error.
    """
    centers = op.grid.active_centers()
    u = solve_system(op, forcing(centers))
    err = np.abs(u - exact(centers))
    return float(err.max()), float(np.sqrt(np.sum(err ** 2) * op.h ** 3))


def write_field(path, values, grid):
    """Little-endian header (magic, nx, ny, nz, h, complex flag) then complex64 cells."""
    full = grid.to_array(np.asarray(values, dtype=complex))
    header = FIELD_HEADER.pack(FIELD_MAGIC, *grid.shape, grid.h, int(np.iscomplexobj(values)))
    with open(path, 'wb') as f:
        f.write(header)
        f.write(full.astype('<c8').tobytes(order='C'))
    return path


def read_field(path):
    """Returns (array of shape (nx, ny, nz), h, was_complex)."""
    with open(path, 'rb') as f:
        blob = f.read()
    magic, nx, ny, nz, h, is_complex = FIELD_HEADER.unpack_from(blob)
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path} is not a field dump")
    data = np.frombuffer(blob, dtype='<c8', offset=FIELD_HEADER.size).reshape((nx, ny, nz))
    return data, h, bool(is_complex)
