"""
stability.py - The estimate calculus and the unique-continuation verifiers

Scalar side:
- omega(t, eta, j)      the logarithmic modulus and its iterates, with omega_inverse
- chain_error_bound     what the layer-by-layer chain gives after K slabs
- uc_budget             tau_r, beta, N1 and gamma~ for propagation of smallness
- propagation_bound     (E0 + eps0) (eps0 / (eps0 + E0))^(tau beta^N1) r^-gamma~

Numerical side:
- three_sphere_check / three_sphere_ensemble   sup norms of discrete solutions on balls
- asymptotic_exponent_fit                       how fast G - H loses its singularity

All constants the estimates leave unspecified are reported as fit outputs.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import KDTree

from analyze_sweep import fit_loglog
from cauchy import sine_modes
from coefficients import extend_to_D0
from fundamental import build_biphase, eval_H
from geometry import chain_radii
from solver import (EigenvalueRegimeError, EigenvalueRegimeWarning, assemble, cell_gradient, dirichlet_regime,
                    green_source_derivatives, make_grid, solve_green, solve_many)

E_MINUS_2 = math.exp(-2.0)

# ensembles whose 99th percentile constant exceeds this multiple of the median are loose
TIGHTNESS_MAX = 10.0

ASYMPTOTIC_DEFAULTS = {
    'bc': 'green',
    'drop_smallest': 2,
    'hess_slope_floor': -3.3,
    'min_cells': 3,
}

# theta = slope + offset for each derivative of G - H
ESTIMATES = {
    'grad_x': 2,
    'grad_y': 2,
    'mixed': 3,
    'hess_y': 3,
}

SECOND_ORDER_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _check_eta(eta):
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")


def _omega_once(t, eta):
    out = np.full(t.shape, E_MINUS_2)
    small = (t > 0) & (t < E_MINUS_2)
    out[small] = 2.0 ** eta * E_MINUS_2 * np.abs(np.log(t[small])) ** (-eta)
    out[t == 0] = 0.0
    return out


def omega(t, eta, j=1):
    """
    j-th iterate of omega_eta; j = 0 is t^eta.

    omega_eta(t) = 2^eta e^-2 |ln t|^-eta on (0, e^-2), e^-2 from there on, 0 at 0.
    Accepts scalars or arrays.
    """
    _check_eta(eta)
    if int(j) != j or j < 0:
        raise ValueError(f"Iterate count must be a non-negative integer, got {j}")
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise ValueError("omega is defined for t >= 0")
    if j == 0:
        out = arr ** eta
    else:
        out = arr
        for _ in range(int(j)):
            out = _omega_once(out, eta)
    return float(out) if np.ndim(t) == 0 else out


def omega_inverse(s, eta, j=1):
    """
    Inverse of the j-th iterate on [0, e^-2]; j = 0 is s^(1/eta).

    omega_eta^-1(s) = exp(-(2^eta e^-2 / s)^(1/eta)). Above e^-2 omega is flat and
    has no inverse.
    """
    _check_eta(eta)
    arr = np.asarray(s, dtype=float)
    if j == 0:
        if np.any(arr < 0):
            raise ValueError("omega_inverse is defined for s >= 0")
        out = arr ** (1.0 / eta)
        return float(out) if np.ndim(s) == 0 else out
    if np.any(arr < 0) or np.any(arr > E_MINUS_2 * (1 + 1e-15)):
        raise ValueError(f"omega is only invertible on [0, e^-2], got {s}")
    out = arr
    for _ in range(int(j)):
        res = np.zeros(out.shape)
        positive = out > 0
        res[positive] = np.exp(-(2.0 ** eta * E_MINUS_2 / out[positive]) ** (1.0 / eta))
        out = res
    return float(out) if np.ndim(s) == 0 else out


def chain_iterates(K, which='sigma'):
    """Number of omega compositions after K slabs: 3K - 4 for sigma (at least 0), 3(K - 1) for q."""
    if K < 1:
        raise ValueError(f"Chain length must be at least 1, got {K}")
    if which == 'sigma':
        return max(3 * K - 4, 0)
    if which == 'q':
        return 3 * (K - 1)
    raise ValueError(f"Unknown coefficient: {which}")


def chain_error_bound(eps, E, K, eta, which='sigma'):
    """(E + eps) omega^(j)(eps / (E + eps)) with j from chain_iterates; K = 1 is Holder."""
    if eps < 0 or E < 0:
        raise ValueError(f"eps and E must be non-negative, got {eps}, {E}")
    total = E + eps
    if total == 0:
        return 0.0
    return total * omega(eps / total, eta, chain_iterates(K, which))


def three_sphere_beta(r1, r2, r3):
    """beta = ln(2 r3 / (r2 + r3)) / ln(r3 / r1), always in (0, 1)."""
    if not 0 < r1 < r2 < r3:
        raise ValueError(f"Radii must satisfy 0 < r1 < r2 < r3, got {r1}, {r2}, {r3}")
    return math.log(2.0 * r3 / (r2 + r3)) / math.log(r3 / r1)


@dataclass(frozen=True)
class UCBudget:
    r1: float
    r: float
    beta: float
    N1: int
    n: int
    gamma_tilde: float
    tau: float

    @property
    def exponent(self):
        """tau_r beta^N1, the power of eps0 / (eps0 + E0)"""
        return self.tau * self.beta ** self.N1

    def to_dict(self):
        return {'r1': self.r1, 'r': self.r, 'beta': self.beta, 'N1': self.N1, 'n': self.n,
                'gamma_tilde': self.gamma_tilde, 'tau': self.tau, 'exponent': self.exponent}


def uc_budget(r1, r, N1, n=3, beta=None):
    """
    tau_r = ln((12 r1 - 2r) / (12 r1 - 3r)) / ln((6 r1 - r) / (2 r1)), gamma~ = n/2 - 1.

    beta defaults to the three-sphere exponent of the chain radii (r1, 3 r1, 4 r1).
    N1 is the number of balls in the chain, see geometry.ball_chain.
    """
    if r1 <= 0 or r <= 0:
        raise ValueError(f"r1 and r must be positive, got {r1}, {r}")
    if r > r1:
        raise ValueError(f"Need r <= r1, got r = {r} and r1 = {r1}")
    if int(N1) != N1 or N1 < 0:
        raise ValueError(f"N1 must be a non-negative integer, got {N1}")
    tau = math.log((12 * r1 - 2 * r) / (12 * r1 - 3 * r)) / math.log((6 * r1 - r) / (2 * r1))
    if beta is None:
        beta = three_sphere_beta(r1, 3 * r1, 4 * r1)
    return UCBudget(r1=float(r1), r=float(r), beta=float(beta), N1=int(N1), n=int(n),
                    gamma_tilde=n / 2.0 - 1.0, tau=tau)


def propagation_bound(eps0, E0, budget):
    """Constant-free bound on |S_k| near the next interface; the constant is fitted elsewhere."""
    if eps0 < 0 or E0 < 0:
        raise ValueError(f"eps0 and E0 must be non-negative, got {eps0}, {E0}")
    if eps0 == 0 and E0 == 0:
        raise ValueError("eps0 and E0 cannot both be zero")
    total = eps0 + E0
    return total * (eps0 / total) ** budget.exponent * budget.r ** (-budget.gamma_tilde)


def optimal_radius(ratio, theta):
    """r = |ln ratio|^(-1 / (2 + theta)), the radius balancing the two error terms."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if theta <= -2:
        raise ValueError(f"theta must exceed -2, got {theta}")
    return abs(math.log(ratio)) ** (-1.0 / (2.0 + theta))


@dataclass(frozen=True)
class ThreeSphereCheck:
    lhs: float          # sup over B_r2
    rhs_core: float     # sup_B_r1^beta sup_B_r3^(1-beta)
    C: float
    beta: float
    sup_r1: float
    sup_r3: float

    def to_dict(self):
        return dict(self.__dict__)


def _ball_inside_grid(grid, center, radius):
    lower = np.asarray(grid.origin)
    upper = lower + np.asarray(grid.shape) * grid.h
    c = np.asarray(center, dtype=float)
    return bool(np.all(c - radius >= lower - 1e-12) and np.all(c + radius <= upper + 1e-12))


def three_sphere_check(values, grid, center, r1, r2, r3, tree=None):
    """
    sup |u| over the cell centres in B_r1, B_r2 and B_r3 and the constant they imply.

    B_r3 must lie in the grid box with every cell centre inside it active.
    """
    beta = three_sphere_beta(r1, r2, r3)
    if not _ball_inside_grid(grid, center, r3):
        raise ValueError(f"B_r3 around {list(center)} leaves the grid")
    centers = grid.centers().reshape(-1, 3)
    tree = tree or KDTree(centers)
    full = np.abs(grid.to_array(np.asarray(values), fill=np.nan)).ravel()

    sups = []
    for radius in (r1, r2, r3):
        cells = tree.query_ball_point(center, radius + 1e-12 * radius)
        if not cells:
            raise ValueError(f"No cell centre within {radius:.4g} of {list(center)}; radius below resolution")
        ball = full[cells]
        if np.any(np.isnan(ball)):
            raise ValueError(f"B_{radius:.4g} around {list(center)} leaves the solution's domain")
        sups.append(float(ball.max()))
    s1, s2, s3 = sups
    rhs = s1 ** beta * s3 ** (1.0 - beta)
    if rhs == 0.0:
        C = 1.0 if s2 == 0.0 else math.inf
    else:
        C = s2 / rhs
    return ThreeSphereCheck(lhs=s2, rhs_core=rhs, C=C, beta=beta, sup_r1=s1, sup_r3=s3)


def three_sphere_ensemble(domain, pair, grid, center, r3, count, modes=8, seed=42, op=None,
                          policy='skip', jobs=1, writer=None):
    """
    Fitted three-sphere constants over random solutions of the Dirichlet problem on Sigma.

    Boundary data are normal random combinations of the first `modes` sine modes.
    Radii follow the chain: r2 = 3 r3 / 4, r1 = r3 / 4. The ensemble constant is the
    largest fitted C; tightness is the 99th percentile over the median, and the ensemble
    is tight when that stays below TIGHTNESS_MAX.
    """
    if count < 1:
        raise ValueError(f"Ensemble size must be at least 1, got {count}")
    r1, r2, r3 = chain_radii(2.0 * r3)
    op = op or assemble(domain, pair, grid, 'cauchy')
    if dirichlet_regime(op) == 'near_eigenvalue':
        message = "q is near a Dirichlet eigenvalue, three-sphere ensemble skipped"
        if policy == 'abort':
            raise EigenvalueRegimeError(message)
        warnings.warn(message, EigenvalueRegimeWarning, stacklevel=2)
        if writer is not None:
            writer.event("three_spheres_skipped", message, level="warning")
        return None

    basis, _ = sine_modes(grid.patch_shape, modes)
    rng = np.random.default_rng(seed)
    data = [rng.standard_normal(basis.shape[0]) @ basis for _ in range(count)]
    solutions = solve_many(op, [-(op.data_map @ f) for f in data], jobs=jobs)

    tree = KDTree(grid.centers().reshape(-1, 3))
    checks = [three_sphere_check(u, grid, center, r1, r2, r3, tree=tree) for u in solutions]
    constants = np.array([c.C for c in checks])
    finite = constants[np.isfinite(constants)]
    median = float(np.median(finite)) if finite.size else math.nan
    p99 = float(np.percentile(finite, 99)) if finite.size else math.nan
    C_inf = float(constants.max())
    tightness = p99 / median if median > 0 else math.nan
    return {
        'radii': (r1, r2, r3),
        'beta': checks[0].beta,
        'count': count,
        'checks': checks,
        'constants': constants,
        'C_inf': C_inf,
        'median': median,
        'p99': p99,
        'tightness': tightness,
        'tight': bool(tightness < TIGHTNESS_MAX),
        'holds': bool(all(c.lhs <= C_inf * c.rhs_core * (1 + 1e-12) for c in checks)),
    }


def _pair_cells(grid, interface_index, height, column, j):
    """y cell (j + 1/2) h below the interface in the column, x the mirror cell above."""
    kf = int(round((height - grid.origin[2]) / grid.h))
    i, jj, _ = grid.locate((column[0], column[1], height))
    y_cell = (i, jj, kf - 1 - j)
    x_cell = (i, jj, kf + j)
    if y_cell[2] < 0 or x_cell[2] >= grid.shape[2]:
        raise ValueError(f"Radius of {j} cells does not fit around interface {interface_index}")
    if grid.region[y_cell] != interface_index - 1 or grid.region[x_cell] != interface_index:
        raise ValueError(f"Radius of {j} cells crosses another interface")
    return x_cell, y_cell


def _kernel_difference(estimate, fields, x_id, kernel):
    """Norm of the discrete minus the analytic derivative at the x cell."""
    if estimate == 'grad_x':
        discrete = fields['grad'][x_id]
        return float(np.linalg.norm(discrete - kernel.grad_x)), float(np.linalg.norm(kernel.grad_x))
    if estimate == 'grad_y':
        discrete = np.array([f[x_id] for f in fields['dy']])
        return float(np.linalg.norm(discrete - kernel.grad_y)), float(np.linalg.norm(kernel.grad_y))
    if estimate == 'mixed':
        discrete = np.stack([g[x_id] for g in fields['dy_grad']], axis=1)
        return float(np.linalg.norm(discrete - kernel.mixed)), float(np.linalg.norm(kernel.mixed))
    discrete = np.zeros((3, 3), dtype=np.result_type(*fields['dyy']))
    for (a, b), f in zip(SECOND_ORDER_PAIRS, fields['dyy']):
        discrete[a, b] = discrete[b, a] = f[x_id]
    return float(np.linalg.norm(discrete - kernel.hess_y)), float(np.linalg.norm(kernel.hess_y))


def asymptotic_exponent_fit(domain, pair, resolution, interface=2, radii_cells=(4, 5, 6, 7, 8, 9),
                            op=None, estimates=None, column=None, cache=None, solver_options=None,
                            options=None, jobs=1):
    """
    Fit how fast G - H loses its singularity across an interface.

    For each j in radii_cells the source y sits (j + 1/2) h below the interface in the
    column through its anchor and x is the mirror cell above, so |x - y| = (2j + 1) h.
    H is the biphase kernel frozen at the point of the interface in that column. The
    log-log slope of each difference gives theta = slope + offset: 2 for grad_x and
    grad_y, 3 for the mixed derivative. For hess_y only the slope is reported and
    checked against a floor.
    """
    opts = dict(ASYMPTOTIC_DEFAULTS)
    opts.update(options or {})
    estimates = list(estimates or ESTIMATES)
    for name in estimates:
        if name not in ESTIMATES:
            raise ValueError(f"Unknown estimate: {name}")
    if not 1 <= interface <= domain.N:
        raise ValueError(f"Interface index {interface} outside 1..{domain.N}")
    radii_cells = sorted(int(j) for j in radii_cells)
    if radii_cells[0] < opts['min_cells']:
        raise ValueError(f"Radii below resolution: need at least {opts['min_cells']} cells, got {radii_cells[0]}")
    if len(radii_cells) - opts['drop_smallest'] < 3:
        raise ValueError(f"Need at least {opts['drop_smallest'] + 3} radii, got {len(radii_cells)}")

    if op is None:
        pair = pair if pair.extended else extend_to_D0(pair)
        grid = make_grid(domain, resolution, include_d0=True)
        op = assemble(domain, pair, grid, opts['bc'], solver_options)
    grid, pair = op.grid, op.pair

    height = domain.interface_heights()[interface - 1]
    anchor = domain.anchors()[interface - 1]
    column = column or anchor
    x_col = grid.center_of(grid.locate((column[0], column[1], height)))
    P = np.array([x_col[0], x_col[1], height])
    A0 = pair.A(P[None, :])[0]
    gamma_plus = float(pair.gamma.pieces[interface](P))
    gamma_minus = float(pair.gamma.pieces[interface - 1](P))
    bp = build_biphase(A0, gamma_plus, gamma_minus)

    rows = []
    for j in radii_cells:
        x_cell, y_cell = _pair_cells(grid, interface, height, column, j)
        x, y = np.asarray(grid.center_of(x_cell)), np.asarray(grid.center_of(y_cell))
        x_id = grid.cell_id[x_cell]
        fields = {}
        if 'grad_x' in estimates:
            G = solve_green(op, y, cache=cache, allow_near=True).values
            fields['grad'] = cell_gradient(G, grid, floor_ghost=op.floor_ghost)
        if 'grad_y' in estimates or 'mixed' in estimates:
            fields['dy'] = [f.values for f in green_source_derivatives(op, y, 1, (0, 1, 2), cache=cache, jobs=jobs)]
            if 'mixed' in estimates:
                fields['dy_grad'] = [cell_gradient(f, grid, floor_ghost=op.floor_ghost)
                                     for f in fields['dy']]
        if 'hess_y' in estimates:
            fields['dyy'] = [f.values for f in green_source_derivatives(op, y, 2, SECOND_ORDER_PAIRS,
                                                                      cache=cache, jobs=jobs)]
        kernel = eval_H(bp, x - P, y - P)
        row = {'j': j, 'distance': float(np.linalg.norm(x - y))}
        for name in estimates:
            diff, reference = _kernel_difference(name, fields, x_id, kernel)
            row[f'{name}_diff'] = diff
            row[f'{name}_H'] = reference
        rows.append(row)

    fits = {}
    distances = [row['distance'] for row in rows]
    for name in estimates:
        offset = ESTIMATES[name]
        fit = fit_loglog(distances, [row[f'{name}_diff'] for row in rows], drop_smallest=opts['drop_smallest'])
        fit['theta'] = fit['slope'] + offset
        fit['theta_ci'] = (fit['ci_low'] + offset, fit['ci_high'] + offset)
        if name == 'hess_y':
            fit['slope_floor'] = opts['hess_slope_floor']
            fit['slope_ok'] = bool(fit['slope'] >= opts['hess_slope_floor'])
        else:
            fit['theta_positive'] = bool(fit['theta_ci'][0] > 0)
        fits[name] = fit

    return {
        'bc': op.bc,
        'interface': interface,
        'anchor': tuple(float(v) for v in P),
        'gamma_plus': gamma_plus,
        'gamma_minus': gamma_minus,
        'h': grid.h,
        'rows': rows,
        'fits': fits,
    }
