"""
cauchy.py - Local Cauchy data on Sigma, the boundary norms and the subspace distance

A Cauchy pair (f, g) is the Dirichlet trace f of a solution on Sigma (zero on the rest
of the boundary) together with its conormal trace g = sigma grad u . nu on Sigma.

The trace norms are spectral: with Delta_Sigma the 5-point Laplacian on the Sigma
nodes (zero ring around the patch),
    ||f||_{1/2}^2  = sum (1 + lambda_m)^{1/2}  |c_m(f)|^2
    ||g||_{-1/2}^2 = sum (1 + lambda_m)^{-1/2} |c_m(g)|^2
where c_m are coefficients in the eigenbasis, orthonormal for <f, g> = h^2 sum f g.
Pairs are embedded in coordinates where the product norm is the Euclidean one, so
orthonormal bases, projectors and gaps are plain linear algebra.
"""
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from solver import (EigenvalueRegimeError, EigenvalueRegimeWarning, DirichletSolution, assemble,
                    conormal_trace, dirichlet_regime, solve_many)

CAUCHY_DEFAULTS = {
    'modes': 16,
    'gram_cond_cap': 1e8,
    'max_nodes': 2500,
    'trace': 'flux',
    'gap_tol': 1e-8,
}


@dataclass(frozen=True, eq=False)
class BoundaryNorm:
    shape: tuple                # Sigma nodes per axis
    h: float
    eigenvalues: np.ndarray     # of Delta_Sigma, ascending
    vectors: np.ndarray         # columns orthonormal for h^2 sum f g

    @property
    def n_nodes(self):
        return self.shape[0] * self.shape[1]

    def coefficients(self, f):
        return self.vectors.T @ (self.h ** 2 * np.asarray(f).ravel())

    def apply_power(self, f, s):
        """(I + Delta_Sigma)^s f as nodal values."""
        return self.vectors @ ((1.0 + self.eigenvalues) ** s * self.coefficients(f))

    def norm(self, f, s=0.5):
        c = self.coefficients(f)
        return float(np.sqrt(np.sum((1.0 + self.eigenvalues) ** s * np.abs(c) ** 2)))

    def l2(self, f):
        return float(np.sqrt(self.h ** 2 * np.sum(np.abs(np.asarray(f)) ** 2)))

    def pairing(self, g, f):
        """<g, f> = h^2 sum g f, bilinear."""
        return self.h ** 2 * np.sum(np.asarray(g).ravel() * np.asarray(f).ravel())

    def embed(self, f, g):
        weight = 1.0 + self.eigenvalues
        return np.concatenate([weight ** 0.25 * self.coefficients(f),
                               weight ** -0.25 * self.coefficients(g)])

    def pair_norm(self, f, g):
        return float(np.linalg.norm(self.embed(f, g)))

    def matches(self, other):
        return (other is not None and tuple(self.shape) == tuple(other.shape)
                and math.isclose(self.h, other.h, rel_tol=1e-12))

    def to_dict(self):
        return {'sigma_shape': list(self.shape), 'h': self.h,
                'kind': 'spectral powers +-1/2 of I + Laplace_Sigma, zero ring'}


def _dirichlet_1d(m, h):
    """Eigenpairs of the 1D three-point Laplacian with a zero value half a cell outside."""
    if m == 1:
        return np.array([4.0 / h ** 2]), np.ones((1, 1))
    d = np.full(m, 2.0)
    d[0] = d[-1] = 3.0
    return linalg.eigh_tridiagonal(d / h ** 2, -np.ones(m - 1) / h ** 2)


def boundary_norm(shape, h, max_nodes=CAUCHY_DEFAULTS['max_nodes']):
    mx, my = (int(v) for v in shape)
    if mx < 1 or my < 1:
        raise ValueError(f"Sigma needs at least one node per axis, got {shape}")
    if mx * my > max_nodes:
        raise ValueError(f"Sigma has {mx * my} nodes, more than the dense eigensolve cap of {max_nodes}")
    lx, ux = _dirichlet_1d(mx, h)
    ly, uy = _dirichlet_1d(my, h)
    # Delta_Sigma is the Kronecker sum, so its eigenbasis is the Kronecker product
    lam = (lx[:, None] + ly[None, :]).ravel()
    vectors = np.kron(ux, uy)
    order = np.argsort(lam, kind='stable')
    return BoundaryNorm(shape=(mx, my), h=float(h), eigenvalues=lam[order], vectors=vectors[:, order] / h)


def build_boundary_norm(grid, patch_shape=None, max_nodes=CAUCHY_DEFAULTS['max_nodes']):
    """Spectral trace norms on the Sigma nodes of a Cauchy grid."""
    return boundary_norm(patch_shape or grid.patch_shape, grid.h, max_nodes)


def sine_modes(shape, M):
    """
    The first M tensor sine modes on the patch, lowest discrete eigenvalue first.

    Mode (p, q) is sin(p pi (i + 1/2) / mx) sin(q pi (j + 1/2) / my), an exact
    eigenvector of Delta_Sigma. Returns (modes as rows, labels).
    """
    mx, my = shape
    M = int(M)
    if M < 1:
        raise ValueError(f"Need at least one Cauchy mode, got M={M}")
    if M > mx * my:
        raise ValueError(f"Asked for {M} modes but Sigma has only {mx * my} nodes")
    labels = sorted(((p, q) for p in range(1, mx + 1) for q in range(1, my + 1)),
                    key=lambda pq: (math.sin(pq[0] * math.pi / (2 * mx)) ** 2
                                    + math.sin(pq[1] * math.pi / (2 * my)) ** 2, pq))[:M]
    i = np.arange(mx) + 0.5
    j = np.arange(my) + 0.5
    modes = np.array([np.outer(np.sin(p * np.pi * i / mx), np.sin(q * np.pi * j / my)).ravel()
                      for p, q in labels])
    return modes, labels


@dataclass(frozen=True, eq=False)
class CauchyPair:
    f: np.ndarray       # Dirichlet trace on the Sigma nodes
    g: np.ndarray       # conormal trace on the Sigma nodes


def orthonormalize(columns, cond_cap=CAUCHY_DEFAULTS['gram_cond_cap']):
    """
    Modified Gram-Schmidt (two passes) on the columns.

    Trailing columns are dropped until the Gram matrix has condition number at most
    cond_cap. Returns (Q, number of kept columns, Gram condition number).
    """
    A = np.asarray(columns)
    kept = A.shape[1]
    cond = math.inf
    while kept > 0:
        block = A[:, :kept]
        with np.errstate(divide='ignore'):
            cond = float(np.linalg.cond(block.conj().T @ block))
        if np.isfinite(cond) and cond <= cond_cap:
            break
        kept -= 1
    if kept == 0:
        raise ValueError("No well-conditioned vectors to orthonormalize")

    Q = np.array(A[:, :kept], dtype=np.result_type(A, float))
    for _ in range(2):
        for j in range(kept):
            for i in range(j):
                Q[:, j] -= np.vdot(Q[:, i], Q[:, j]) * Q[:, i]
            Q[:, j] /= np.linalg.norm(Q[:, j])
    return Q, kept, cond


@dataclass
class CauchySubspace:
    basis: np.ndarray                   # (2 * nodes, M) orthonormal columns in embedded coordinates
    norm: BoundaryNorm = None           # None for plain Euclidean vectors
    pairs: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    gram_cond: float = 1.0
    regime: str = 'definite'

    @property
    def dim(self):
        return int(self.basis.shape[1])

    @classmethod
    def from_vectors(cls, vectors, norm=None, cond_cap=CAUCHY_DEFAULTS['gram_cond_cap']):
        """
        Orthonormal basis spanned by the given vectors.

        With a norm the vectors are CauchyPairs (or (f, g) tuples) embedded in the
        product norm; without one they are plain vectors under the Euclidean norm.
        """
        vectors = list(vectors)
        if not vectors:
            raise ValueError("Cannot build a subspace from zero vectors")
        if norm is None:
            columns = [np.asarray(v).ravel() for v in vectors]
            pairs = []
        else:
            pairs = [v if isinstance(v, CauchyPair) else CauchyPair(*v) for v in vectors]
            columns = [norm.embed(p.f, p.g) for p in pairs]
        basis, kept, cond = orthonormalize(np.column_stack(columns), cond_cap)
        return cls(basis=basis, norm=norm, pairs=pairs[:kept], dropped=list(range(kept, len(vectors))),
                   gram_cond=cond)

    def truncated(self, M, cond_cap=CAUCHY_DEFAULTS['gram_cond_cap']):
        """The subspace spanned by the first M sampled pairs."""
        if not self.pairs:
            raise ValueError("Only sampled Cauchy subspaces can be truncated")
        sub = CauchySubspace.from_vectors(self.pairs[:M], self.norm, cond_cap)
        sub.modes = self.modes[:sub.dim]
        sub.solutions = self.solutions[:sub.dim]
        return sub

    def gram_error(self):
        return float(np.abs(self.basis.conj().T @ self.basis - np.eye(self.dim)).max())


def sample_cauchy_space(domain, pair, grid, M, op=None, norm=None, policy='skip', trace=None,
                        jobs=1, writer=None, options=None):
    """
    Cauchy pairs of the first M sine modes, orthonormalized in the product norm.

    Near a Dirichlet eigenvalue every solve is unreliable, so with policy 'skip' all
    pairs are skipped (logged, and an EigenvalueRegimeWarning raised) and the
    subspace comes back empty; policy 'abort' raises EigenvalueRegimeError.
    """
    opts = dict(CAUCHY_DEFAULTS)
    opts.update(options or {})
    trace = trace or opts['trace']
    if policy not in ('skip', 'abort'):
        raise ValueError(f"Unknown regime policy: {policy}")
    if grid.include_d0:
        raise ValueError("Cauchy data are sampled on a grid without D0")
    norm = norm or build_boundary_norm(grid, max_nodes=opts['max_nodes'])
    modes, labels = sine_modes(grid.patch_shape, M)
    op = op or assemble(domain, pair, grid, 'cauchy')

    regime = dirichlet_regime(op)
    if regime == 'near_eigenvalue':
        message = f"q is near a Dirichlet eigenvalue, skipping all {len(labels)} Cauchy pairs"
        if policy == 'abort':
            raise EigenvalueRegimeError(message)
        warnings.warn(message, EigenvalueRegimeWarning, stacklevel=2)
        if writer is not None:
            writer.event("cauchy_pairs_skipped", message, level="warning")
        return CauchySubspace(basis=np.zeros((2 * norm.n_nodes, 0)), norm=norm, skipped=list(labels),
                              regime=regime)

    values = solve_many(op, [-(op.data_map @ f) for f in modes], jobs=jobs)
    pairs = [CauchyPair(f=f, g=conormal_trace(op, u, f, scheme=trace)) for f, u in zip(modes, values)]
    subspace = CauchySubspace.from_vectors(pairs, norm, opts['gram_cond_cap'])
    subspace.modes = labels[:subspace.dim]
    subspace.dropped = labels[subspace.dim:]
    subspace.solutions = [DirichletSolution(values=u, f=f, regime=regime, op=op)
                          for f, u in zip(modes[:subspace.dim], values)]
    subspace.regime = regime
    if subspace.dropped and writer is not None:
        writer.event("cauchy_modes_dropped", f"Gram condition cap kept {subspace.dim} of {len(labels)}",
                     level="warning")
    return subspace


def spectral_ratio(norm, pair, index=0):
    """c_index(g) / c_index(f): the Dirichlet-to-Neumann symbol seen by one eigenvector."""
    return complex(norm.coefficients(pair.g)[index] / norm.coefficients(pair.f)[index])


def _check_compatible(C1, C2):
    if C1.dim == 0 or C2.dim == 0:
        raise ValueError("Distance to an empty Cauchy subspace is undefined")
    if (C1.norm is None) != (C2.norm is None) or (C1.norm is not None and not C1.norm.matches(C2.norm)):
        raise ValueError("Cauchy subspaces use different boundary norms")
    if C1.basis.shape[0] != C2.basis.shape[0]:
        raise ValueError(f"Ambient dimensions differ: {C1.basis.shape[0]} vs {C2.basis.shape[0]}")


def _gap(Q1, Q2):
    residual = Q2 - Q1 @ (Q1.conj().T @ Q2)
    return float(min(1.0, linalg.svdvals(residual).max()))


def subspace_distance(C1, C2, symmetric=False):
    """
    sup over unit vectors of C2 of their distance to C1.

    That is the largest singular value of (I - P1) B2. symmetric=True returns the
    larger of the two one-sided gaps.
    """
    _check_compatible(C1, C2)
    d = _gap(C1.basis, C2.basis)
    if symmetric:
        d = max(d, _gap(C2.basis, C1.basis))
    return d


def distance_versus_modes(C1, C2, modes_list):
    """Rows of d and the symmetric d for subspaces truncated to each M."""
    rows = []
    for M in modes_list:
        T1, T2 = C1.truncated(M), C2.truncated(M)
        rows.append({
            'modes': int(M),
            'kept1': T1.dim,
            'kept2': T2.dim,
            'd': subspace_distance(T1, T2),
            'd_sym': subspace_distance(T1, T2, symmetric=True),
        })
    return rows


def boundary_pairing(norm, pair1, pair2):
    """<g1, f2> - <g2, f1>, the boundary side of the Alessandrini identity."""
    return norm.pairing(pair1.g, pair2.f) - norm.pairing(pair2.g, pair1.f)


def volume_form(sol1, sol2):
    """
    Discrete integral over Omega of (sigma1 - sigma2) grad u1 . grad u2 + (q2 - q1) u1 u2.

    Built from the two finite-volume operators, half cells next to Sigma included.
    For diagonal A it equals boundary_pairing with flux traces to rounding.
    """
    op1, op2 = sol1.op, sol2.op
    if op1.grid.shape != op2.grid.shape or not math.isclose(op1.h, op2.h, rel_tol=1e-12):
        raise ValueError("Solutions live on different grids")
    dM = op1.matrix - op2.matrix
    dD = (op1.data_map - op2.data_map).tocsc()
    # one nonzero per column away from cross terms: 2 (sigma1 - sigma2) / h^2 at the cell above
    face = np.asarray(dD.sum(axis=0)).ravel()
    u1, u2 = sol1.values, sol2.values
    f1, f2 = sol1.f, sol2.f
    total = u2 @ (dM @ u1) + u1 @ (dD @ f2) + u2 @ (dD @ f1) - np.sum(f1 * face * f2)
    return -op1.h ** 3 * total


@dataclass
class AlessandriniGap:
    lhs: float
    rhs: float
    d: float
    pairing: complex
    norm1: float
    norm2: float
    violated: bool

    @property
    def ratio(self):
        return self.lhs / self.rhs if self.rhs > 0 else math.inf

    def to_dict(self):
        return {'lhs': self.lhs, 'rhs': self.rhs, 'd': self.d, 'ratio': self.ratio,
                'pairing': self.pairing, 'norm1': self.norm1, 'norm2': self.norm2,
                'violated': self.violated}


def alessandrini_gap(sol1, sol2, d, norm, trace=None, tol=None):
    """
    Both sides of |volume form| <= d ||(f1, g1)|| ||(f2, g2)||.

    sol1, sol2: DirichletSolutions of the two pairs on the same Cauchy grid
    d: subspace distance between the two sampled Cauchy sets
    violated is set when the left side exceeds the right side by more than tol
    times the product of the pair norms.
    """
    trace = trace or CAUCHY_DEFAULTS['trace']
    tol = CAUCHY_DEFAULTS['gap_tol'] if tol is None else tol
    p1 = CauchyPair(sol1.f, conormal_trace(sol1.op, sol1.values, sol1.f, scheme=trace))
    p2 = CauchyPair(sol2.f, conormal_trace(sol2.op, sol2.values, sol2.f, scheme=trace))
    lhs = float(abs(volume_form(sol1, sol2)))
    n1 = norm.pair_norm(p1.f, p1.g)
    n2 = norm.pair_norm(np.conj(p2.f), np.conj(p2.g))
    rhs = float(d) * n1 * n2
    pairing = boundary_pairing(norm, p1, p2)
    pairing = complex(pairing) if np.iscomplexobj(pairing) else float(pairing)
    return AlessandriniGap(lhs=lhs, rhs=rhs, d=float(d), pairing=pairing, norm1=n1, norm2=n2,
                           violated=bool(lhs > rhs + tol * max(n1 * n2, 1e-300)))


def save_subspace(path, subspace):
    """Basis as a little-endian matrix (column-major) plus a JSON sidecar at path + '.json'."""
    is_complex = np.iscomplexobj(subspace.basis)
    dtype = '<c16' if is_complex else '<f8'
    with open(path, 'wb') as f:
        f.write(np.asarray(subspace.basis, dtype=dtype).tobytes(order='F'))
    sidecar = {
        'rows': int(subspace.basis.shape[0]),
        'M': subspace.dim,
        'dtype': dtype,
        'modes': [list(m) for m in subspace.modes],
        'dropped': [list(m) if isinstance(m, tuple) else m for m in subspace.dropped],
        'gram_cond': subspace.gram_cond,
        'norm': subspace.norm.to_dict() if subspace.norm is not None else None,
    }
    with open(path + '.json', 'w') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_subspace(path):
    with open(path + '.json', 'r') as f:
        sidecar = json.load(f)
    with open(path, 'rb') as f:
        data = np.frombuffer(f.read(), dtype=sidecar['dtype'])
    basis = data.reshape((sidecar['rows'], sidecar['M']), order='F').copy()
    norm = None
    if sidecar.get('norm'):
        spec = sidecar['norm']
        norm = boundary_norm(spec['sigma_shape'], spec['h'], max_nodes=max(CAUCHY_DEFAULTS['max_nodes'],
                                                                          basis.shape[0] // 2))
    return CauchySubspace(basis=basis, norm=norm, modes=[tuple(m) for m in sidecar.get('modes', [])],
                          gram_cond=sidecar.get('gram_cond', 1.0))
