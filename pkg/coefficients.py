"""
coefficients.py - Piecewise affine gamma and q, the matrix field A, and checks on them

A CoefficientPair is one side of the inverse problem: sigma = gamma * A and q, with
gamma and q affine on every slab. Piece 0 belongs to the extension D0 and only
becomes usable after extend_to_D0().

The checks in validate() follow the a priori assumptions:
- gamma bounded above and below on every slab closure
- A symmetric, C^{1,1}, uniformly elliptic
- q pieces finite, sup bounds on sigma and q
"""
import math
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from geometry import PLANE_TOL

DEFAULT_TOLERANCES = {
    'gamma_bar': 10.0,
    'lambda_bar': 2.0,
    'A_bar': 50.0,
    'sigma_bar': 20.0,
    'q_bar': 50.0,
    'symmetry_tol': 1e-12,
    'samples_per_axis': 7,
    'fd_step': 0.05,
}

DEFAULT_BUMP_SHAPE = ((1.0, 0.5, 0.0), (0.5, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class AffinePiece:
    offset: float
    gradient: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, 'offset', float(self.offset))
        object.__setattr__(self, 'gradient', tuple(float(g) for g in self.gradient))
        if len(self.gradient) != 3:
            raise ValueError(f"Affine gradient needs 3 entries, got {self.gradient}")
        if not all(math.isfinite(v) for v in (self.offset,) + self.gradient):
            raise ValueError(f"Affine piece has non-finite entries: {self}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.offset + x @ np.asarray(self.gradient)

    def __add__(self, other):
        return AffinePiece(self.offset + other.offset,
                           tuple(a + b for a, b in zip(self.gradient, other.gradient)))

    def __sub__(self, other):
        return AffinePiece(self.offset - other.offset,
                           tuple(a - b for a, b in zip(self.gradient, other.gradient)))

    def scaled(self, factor):
        return AffinePiece(factor * self.offset, tuple(factor * g for g in self.gradient))

    @property
    def norm(self):
        """|a| + |b|, one term of the triple norm."""
        return abs(self.offset) + float(np.linalg.norm(self.gradient))


def box_vertices(lower, upper):
    return np.array(list(product(*zip(lower, upper))), dtype=float)


def sup_over_box(piece, lower, upper):
    """
    sup of |a + b.x| over the box [lower, upper] and a vertex attaining it.

    Affine functions reach their extrema at vertices, so 8 evaluations are exact.
    """
    vertices = box_vertices(lower, upper)
    values = np.abs(piece(vertices))
    i = int(np.argmax(values))
    return float(values[i]), tuple(vertices[i])


def range_over_box(piece, lower, upper):
    """(min, argmin, max, argmax) of the affine piece over the box."""
    vertices = box_vertices(lower, upper)
    values = piece(vertices)
    lo, hi = int(np.argmin(values)), int(np.argmax(values))
    return float(values[lo]), tuple(vertices[lo]), float(values[hi]), tuple(vertices[hi])


@dataclass(frozen=True)
class PiecewiseAffineField:
    pieces: tuple       # index 0 is D0, 1..N the slabs

    def __post_init__(self):
        object.__setattr__(self, 'pieces', tuple(self.pieces))

    @property
    def N(self):
        return len(self.pieces) - 1

    def values(self, points, region):
        """Vectorized evaluation at points whose region indices are already known."""
        points = np.asarray(points, dtype=float)
        region = np.asarray(region)
        out = np.zeros(region.shape, dtype=float)
        for j, piece in enumerate(self.pieces):
            mask = region == j
            if np.any(mask):
                out[mask] = piece(points[mask])
        return out

    def with_piece(self, index, piece):
        pieces = list(self.pieces)
        pieces[index] = piece
        return PiecewiseAffineField(tuple(pieces))


def triple_norm(field):
    """max_j (|a_j| + |b_j|) over the slabs of Omega."""
    return max(piece.norm for piece in field.pieces[1:])


class MatrixField:
    """
    Smooth symmetric matrix field x -> A(x).

    Families:
    - identity
    - constant: params {'matrix': 3x3}
    - sin_bump: I + amplitude * prod_i sin(pi xi_i) * shape, xi the coordinates
      scaled to the box given by params 'lower'/'upper' (default unit cube)
    """
    def __init__(self, name, params=None):
        self.name = name
        self.params = dict(params or {})
        if name == "identity":
            pass
        elif name == "constant":
            matrix = np.asarray(self.params.get('matrix', np.eye(3)), dtype=float)
            if matrix.shape != (3, 3):
                raise ValueError(f"Constant matrix field needs a 3x3 matrix, got shape {matrix.shape}")
            self._matrix = matrix
        elif name == "sin_bump":
            self._amplitude = float(self.params.get('amplitude', 0.3))
            self._shape = np.asarray(self.params.get('shape', DEFAULT_BUMP_SHAPE), dtype=float)
            self._lower = np.asarray(self.params.get('lower', (0.0, 0.0, 0.0)), dtype=float)
            self._upper = np.asarray(self.params.get('upper', (1.0, 1.0, 1.0)), dtype=float)
            if self._shape.shape != (3, 3):
                raise ValueError(f"sin_bump shape must be 3x3, got {self._shape.shape}")
        else:
            raise ValueError(f"Unknown matrix field: {name}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        if self.name == "identity":
            return np.broadcast_to(np.eye(3), lead + (3, 3)).copy()
        if self.name == "constant":
            return np.broadcast_to(self._matrix, lead + (3, 3)).copy()
        xi = (x - self._lower) / (self._upper - self._lower)
        bump = np.prod(np.sin(np.pi * xi), axis=-1)
        return np.eye(3) + self._amplitude * bump[..., None, None] * self._shape

    @property
    def is_diagonal(self):
        if self.name == "identity":
            return True
        if self.name == "constant":
            return bool(np.all(self._matrix == np.diag(np.diag(self._matrix))))
        return bool(np.all(self._shape == np.diag(np.diag(self._shape))))

    def to_dict(self):
        return {'name': self.name, **self.params}

    def __eq__(self, other):
        return isinstance(other, MatrixField) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(sorted(self.to_dict().items(), key=lambda kv: kv[0])))

    def __repr__(self):
        return f"MatrixField({self.name!r}, {self.params!r})"


def get_matrix_field(name, params=None):
    """Pick the matrix field family by name."""
    return MatrixField(name, params)


@dataclass(frozen=True)
class CoefficientPair:
    gamma: PiecewiseAffineField
    q: PiecewiseAffineField
    A: MatrixField
    extended: bool = False

    def __post_init__(self):
        if len(self.gamma.pieces) != len(self.q.pieces):
            raise ValueError(
                f"gamma has {len(self.gamma.pieces)} pieces but q has {len(self.q.pieces)}"
            )

    @property
    def N(self):
        return self.gamma.N

    def cell_values(self, points, region):
        """gamma, q and A at points with known region indices (A = I on D0 once extended)."""
        points = np.asarray(points, dtype=float)
        region = np.asarray(region)
        gamma = self.gamma.values(points, region)
        q = self.q.values(points, region)
        A = self.A(points)
        if self.extended:
            A[region == 0] = np.eye(3)
        return gamma, q, A


def evaluate(pair, domain, x, which):
    """
    gamma, q or sigma = gamma*A at a single point.

    Interface points take the lower slab. Points in D0 need an extended pair.
    """
    if which not in ('gamma', 'q', 'sigma'):
        raise ValueError(f"Unknown coefficient: {which}")
    if pair.N != domain.N:
        raise ValueError(f"Pair has {pair.N} slabs but the domain has {domain.N}")
    x = np.asarray(x, dtype=float)
    region = domain.region_index(x)
    if region < 0:
        raise ValueError(f"Point {x.tolist()} lies outside Omega0")
    if region == 0 and not pair.extended:
        raise ValueError(f"Point {x.tolist()} lies in D0; extend the pair first")

    if which == 'gamma':
        return float(pair.gamma.pieces[region](x))
    if which == 'q':
        return float(pair.q.pieces[region](x))
    A = np.eye(3) if region == 0 else pair.A(x)
    return float(pair.gamma.pieces[region](x)) * A


def extend_to_D0(pair):
    """gamma = 1, q = 1 and A = I on D0. Values in Omega are untouched."""
    one = AffinePiece(1.0)
    return replace(pair,
                   gamma=pair.gamma.with_piece(0, one),
                   q=pair.q.with_piece(0, one),
                   extended=True)


@dataclass
class ValidationReport:
    passed: bool = True
    violations: list = field(default_factory=list)
    estimates: dict = field(default_factory=dict)

    def add(self, check, message, witness=None):
        self.passed = False
        self.violations.append({
            'check': check,
            'message': message,
            'witness': None if witness is None else [float(v) for v in witness],
        })

    def to_dict(self):
        return {'passed': self.passed, 'violations': self.violations, 'estimates': self.estimates}


def _slab_samples(domain, m, per_axis):
    lower, upper = domain.partition.slab_bounds(m)
    axes = [np.linspace(l, u, per_axis) for l, u in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([g.ravel() for g in mesh], axis=-1), lower, upper


def _c11_estimate(A, points, step, lower, upper):
    """
    Surrogate of ||a_ij||_{C^{1,1}}: sup|a| + sup|grad a| + sup of second difference
    quotients, all over the sample points that keep x +- step inside the box.
    """
    inside = np.all((points - step >= np.asarray(lower) - PLANE_TOL)
                    & (points + step <= np.asarray(upper) + PLANE_TOL), axis=1)
    pts = points[inside]
    if len(pts) == 0:
        return 0.0
    centre = A(pts)
    first = 0.0
    second = 0.0
    for e in np.eye(3):
        plus = A(pts + step * e)
        minus = A(pts - step * e)
        first = max(first, float(np.max(np.abs(plus - minus))) / (2 * step))
        second = max(second, float(np.max(np.abs(plus - 2 * centre + minus))) / step ** 2)
    return float(np.max(np.abs(centre))) + first + second


def validate(pair, domain, tolerances=None):
    """
    Check the a priori assumptions on a sample grid of every slab closure.

    Never raises on a failed check: every failure goes into the report with a witness.
    """
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    report = ValidationReport()

    if pair.N != domain.N:
        report.add('partition', f"Pair has {pair.N} slabs but the domain has {domain.N}")
        return report

    gamma_bar = tol['gamma_bar']
    lambda_bar = tol['lambda_bar']
    per_axis = int(tol['samples_per_axis'])

    gamma_min, gamma_max = math.inf, -math.inf
    sigma_sup, q_sup = 0.0, 0.0
    eig_min, eig_max = math.inf, -math.inf
    asym = 0.0
    c11 = 0.0

    for m in range(1, domain.N + 1):
        points, lower, upper = _slab_samples(domain, m, per_axis)

        # gamma bounds on the slab closure, exact by vertex enumeration
        g_lo, g_lo_at, g_hi, g_hi_at = range_over_box(pair.gamma.pieces[m], lower, upper)
        gamma_min, gamma_max = min(gamma_min, g_lo), max(gamma_max, g_hi)
        if g_lo < 1.0 / gamma_bar:
            report.add('gamma_bounds', f"gamma = {g_lo:.6g} < 1/gamma_bar on slab {m}", g_lo_at)
        if g_hi > gamma_bar:
            report.add('gamma_bounds', f"gamma = {g_hi:.6g} > gamma_bar on slab {m}", g_hi_at)

        # A: symmetry and ellipticity
        A = pair.A(points)
        sym_err = np.max(np.abs(A - np.swapaxes(A, -1, -2)), axis=(-1, -2))
        i = int(np.argmax(sym_err))
        asym = max(asym, float(sym_err[i]))
        if sym_err[i] > tol['symmetry_tol']:
            report.add('symmetry', f"A not symmetric (error {sym_err[i]:.3g}) on slab {m}", points[i])
        eig = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
        lo_i, hi_i = int(np.argmin(eig[:, 0])), int(np.argmax(eig[:, -1]))
        eig_min, eig_max = min(eig_min, float(eig[lo_i, 0])), max(eig_max, float(eig[hi_i, -1]))
        if eig[lo_i, 0] < 1.0 / lambda_bar:
            report.add('ellipticity', f"smallest eigenvalue {eig[lo_i, 0]:.6g} < 1/lambda_bar on slab {m}",
                       points[lo_i])
        if eig[hi_i, -1] > lambda_bar:
            report.add('ellipticity', f"largest eigenvalue {eig[hi_i, -1]:.6g} > lambda_bar on slab {m}",
                       points[hi_i])

        # C^{1,1} through difference quotients at h and h/2
        h = tol['fd_step']
        at_h = _c11_estimate(pair.A, points, h, domain.box.lower, domain.box.upper)
        at_half = _c11_estimate(pair.A, points, 0.5 * h, domain.box.lower, domain.box.upper)
        c11 = max(c11, at_h, at_half)
        if max(at_h, at_half) > tol['A_bar']:
            report.add('c11', f"C^(1,1) estimate {max(at_h, at_half):.6g} > A_bar on slab {m}")

        # q pieces are finite by construction; the sup bounds are checked here
        q_val, q_at = sup_over_box(pair.q.pieces[m], lower, upper)
        q_sup = max(q_sup, q_val)
        if q_val > tol['q_bar']:
            report.add('q_bound', f"|q| = {q_val:.6g} > q_bar on slab {m}", q_at)

        gammas = np.abs(pair.gamma.pieces[m](points))
        norms = gammas * np.abs(eig).max(axis=1)
        j = int(np.argmax(norms))
        sigma_sup = max(sigma_sup, float(norms[j]))
        if norms[j] > tol['sigma_bar']:
            report.add('sigma_bound', f"|sigma| = {norms[j]:.6g} > sigma_bar on slab {m}", points[j])

    report.estimates = {
        'gamma_min': gamma_min,
        'gamma_max': gamma_max,
        'lambda_min': eig_min,
        'lambda_max': eig_max,
        'lambda_bar_needed': max(eig_max, 1.0 / eig_min) if eig_min > 0 else math.inf,
        'asymmetry': asym,
        'c11_estimate': c11,
        'sigma_sup': sigma_sup,
        'q_sup': q_sup,
        'gamma_triple_norm': triple_norm(pair.gamma),
        'q_triple_norm': triple_norm(pair.q),
    }
    return report


@dataclass(frozen=True)
class ErrorFunctionals:
    k: int
    E: float
    delta: float            # ||gamma1 - gamma2|| on W_k n Omega
    delta_tilde: float      # same for q
    delta_star: float
    per_slab: tuple         # (gamma sup, q sup) for slabs 1..N


def error_functionals(pair1, pair2, domain, k):
    """E, delta_k, delta~_k and delta*_k, all exact sups by vertex enumeration."""
    if pair1.N != pair2.N or pair1.N != domain.N:
        raise ValueError(f"Mismatched partitions: {pair1.N}, {pair2.N} and domain {domain.N}")
    if not 0 <= k <= domain.N:
        raise ValueError(f"Chain index {k} outside 0..{domain.N}")

    per_slab = []
    for m in range(1, domain.N + 1):
        lower, upper = domain.partition.slab_bounds(m)
        g, _ = sup_over_box(pair1.gamma.pieces[m] - pair2.gamma.pieces[m], lower, upper)
        qq, _ = sup_over_box(pair1.q.pieces[m] - pair2.q.pieces[m], lower, upper)
        per_slab.append((g, qq))

    E = max(max(g, qq) for g, qq in per_slab)
    delta = max([g for g, _ in per_slab[:k]], default=0.0)
    delta_tilde = max([qq for _, qq in per_slab[:k]], default=0.0)
    return ErrorFunctionals(k=k, E=E, delta=delta, delta_tilde=delta_tilde,
                            delta_star=max(delta, delta_tilde), per_slab=tuple(per_slab))


def interface_samples(anchor, r0):
    """P and P + (r0/6) e_j for the two tangential directions."""
    p = np.asarray(anchor, dtype=float)
    step = r0 / 6.0
    return [tuple(p), tuple(p + step * np.array([1.0, 0.0, 0.0])), tuple(p + step * np.array([0.0, 1.0, 0.0]))]


@dataclass(frozen=True)
class AffineBound:
    piece: AffinePiece
    interface_sup: float
    normal_slope: float
    bound: float
    exact_sup: float


def affine_bound_from_interface(samples, values, normal_slope, slab_lower, slab_upper,
                                constant=1.0, normal=(0.0, 0.0, 1.0)):
    """
    Rebuild an affine difference from interface samples plus its normal slope.

    The samples fix the offset and the tangential gradient; the slope fixes the
    normal component. Returns the reconstructed piece, the bound
    C (interface sup + |slope|)(1 + diam) and the exact sup over the slab.
    """
    samples = np.asarray(samples, dtype=float)
    values = np.asarray(values, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 3 or len(samples) != len(values):
        raise ValueError("samples must be an (m, 3) array with one value per sample")

    rows = np.hstack([np.ones((len(samples), 1)), samples])
    rows = np.vstack([rows, np.concatenate([[0.0], normal])])
    rhs = np.concatenate([values, [normal_slope]])
    if np.linalg.matrix_rank(rows) < 4:
        raise ValueError("Degenerate sample configuration: need 3 affinely independent interface points")
    solution, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    piece = AffinePiece(solution[0], solution[1:])

    interface_sup = float(np.max(np.abs(values))) if len(values) else 0.0
    diam = float(np.linalg.norm(np.asarray(slab_upper) - np.asarray(slab_lower)))
    bound = constant * (interface_sup + abs(normal_slope)) * (1.0 + diam)
    exact, _ = sup_over_box(piece, slab_lower, slab_upper)
    return AffineBound(piece=piece, interface_sup=interface_sup, normal_slope=float(normal_slope),
                       bound=bound, exact_sup=exact)


def norm_equivalence_constants(domain):
    """
    (c1, c2) with c1 |||f||| <= ||f||_inf <= c2 |||f||| for every piecewise affine f.

    On a slab with sides l_i and corner radius R: |b| <= 2 ||f|| sqrt(sum 1/l_i^2) and
    |a| <= ||f|| + R |b|, while ||f|| <= max(1, R) (|a| + |b|).
    """
    c1, c2 = math.inf, 0.0
    for m in range(1, domain.N + 1):
        lower, upper = domain.partition.slab_bounds(m)
        sides = np.asarray(upper) - np.asarray(lower)
        radius = float(np.max(np.linalg.norm(box_vertices(lower, upper), axis=1)))
        s = float(np.sqrt(np.sum(1.0 / sides ** 2)))
        c1 = min(c1, 1.0 / (1.0 + 2.0 * s * (radius + 1.0)))
        c2 = max(c2, max(1.0, radius))
    return c1, c2


def _piece_from(entry, offset_key, gradient_key, default_offset):
    return AffinePiece(entry.get(offset_key, default_offset), entry.get(gradient_key, (0.0, 0.0, 0.0)))


def pair_from_dict(spec, N=None):
    """
    Read a pair from its JSON form:
    {"slabs": [{"a": .., "b": [..], "c": .., "d": [..]}, ...], "A": {"name": "identity"}}
    with gamma = a + b.x and q = c + d.x on each slab.
    """
    slabs = spec.get('slabs')
    if not slabs:
        raise ValueError("Coefficient pair needs a non-empty 'slabs' list")
    if N is not None and len(slabs) != N:
        raise ValueError(f"Coefficient pair has {len(slabs)} slabs, the domain has {N}")
    one = AffinePiece(1.0)
    gamma = PiecewiseAffineField((one,) + tuple(_piece_from(s, 'a', 'b', 1.0) for s in slabs))
    q = PiecewiseAffineField((one,) + tuple(_piece_from(s, 'c', 'd', 0.0) for s in slabs))
    A_spec = dict(spec.get('A', {'name': 'identity'}))
    A = get_matrix_field(A_spec.pop('name', 'identity'), A_spec)
    return CoefficientPair(gamma=gamma, q=q, A=A)


def pair_to_dict(pair):
    slabs = []
    for g, qq in zip(pair.gamma.pieces[1:], pair.q.pieces[1:]):
        slabs.append({'a': g.offset, 'b': list(g.gradient), 'c': qq.offset, 'd': list(qq.gradient)})
    return {'slabs': slabs, 'A': pair.A.to_dict(), 'extended': pair.extended}


def constant_pair(N, gamma=1.0, q=0.0, A=None):
    """Pair with constant gamma and q on every slab; handy for experiments and tests."""
    gammas = gamma if isinstance(gamma, (list, tuple)) else [gamma] * N
    qs = q if isinstance(q, (list, tuple)) else [q] * N
    one = AffinePiece(1.0)
    return CoefficientPair(
        gamma=PiecewiseAffineField((one,) + tuple(AffinePiece(g) for g in gammas)),
        q=PiecewiseAffineField((one,) + tuple(AffinePiece(v) for v in qs)),
        A=A if A is not None else get_matrix_field('identity'),
    )


def perturb_pair(pair, gamma_pieces=None, q_pieces=None):
    """Add per-slab affine perturbations ({slab index: AffinePiece}) to gamma and q."""
    gamma, q = pair.gamma, pair.q
    for m, piece in (gamma_pieces or {}).items():
        gamma = gamma.with_piece(m, gamma.pieces[m] + piece)
    for m, piece in (q_pieces or {}).items():
        q = q.with_piece(m, q.pieces[m] + piece)
    return replace(pair, gamma=gamma, q=q)
