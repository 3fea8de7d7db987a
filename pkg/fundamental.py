"""
fundamental.py - Closed-form kernels: the Laplace fundamental solution and the biphase one

Gamma(x, y) = 1 / (4 pi |x - y|), normalized so that -Laplace Gamma = delta.

The biphase kernel H solves the transmission problem for
sigma0 = (gamma+ on z > 0, gamma- on z < 0) * A0 with A0 constant, built from Gamma
in the coordinates X = L x where L^-1 L^-T = A0, plus an image term reflected across
{z = 0}. Derivatives are exact, chained through L and the reflection.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

FOUR_PI = 4.0 * math.pi
REFLECTION = np.diag([1.0, 1.0, -1.0])


@dataclass(frozen=True)
class KernelValue:
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    hess_y: np.ndarray
    mixed: np.ndarray       # mixed[i, j] = d^2 / dx_i dy_j

    def __add__(self, other):
        return KernelValue(self.value + other.value, self.grad_x + other.grad_x,
                           self.grad_y + other.grad_y, self.hess_y + other.hess_y,
                           self.mixed + other.mixed)

    def scaled(self, c):
        return KernelValue(c * self.value, c * self.grad_x, c * self.grad_y,
                           c * self.hess_y, c * self.mixed)


def reflect(v):
    """Mirror a point across the plane z = 0."""
    v = np.array(v, dtype=float)
    v[..., 2] = -v[..., 2]
    return v


def gamma_laplace(x, y):
    """Gamma(x, y) and its first and second derivatives."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise ValueError("Gamma is singular at x = y")
    value = 1.0 / (FOUR_PI * r)
    grad_x = -d / (FOUR_PI * r ** 3)
    hess_y = (3.0 * np.outer(d, d) / r ** 5 - np.eye(3) / r ** 3) / FOUR_PI
    return KernelValue(value=value, grad_x=grad_x, grad_y=-grad_x, hess_y=hess_y, mixed=-hess_y)


@dataclass(frozen=True)
class BiphaseFundamental:
    gamma_plus: float
    gamma_minus: float
    A0: np.ndarray
    L: np.ndarray
    J: np.ndarray
    detJ: float


def build_biphase(A0, gamma_plus, gamma_minus):
    """
    L = R^-1 with A0 = R R^T (lower Cholesky factor) and J = sqrt(A0^-1).

    A0 must be symmetric positive definite.
    """
    A0 = np.asarray(A0, dtype=float)
    if A0.shape != (3, 3) or not np.allclose(A0, A0.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A0).max())):
        raise ValueError("A0 must be a symmetric 3x3 matrix")
    if gamma_plus <= 0 or gamma_minus <= 0:
        raise ValueError(f"gamma+ and gamma- must be positive, got {gamma_plus}, {gamma_minus}")
    try:
        R = linalg.cholesky(A0, lower=True)
    except linalg.LinAlgError as e:
        raise ValueError(f"A0 is not positive definite: {e}") from e
    L = linalg.solve_triangular(R, np.eye(3), lower=True)
    lam, V = linalg.eigh(A0)
    J = (V * lam ** -0.5) @ V.T
    detJ = float(np.prod(lam ** -0.5))
    return BiphaseFundamental(gamma_plus=float(gamma_plus), gamma_minus=float(gamma_minus),
                              A0=A0, L=L, J=J, detJ=detJ)


def _branch(bp, x, y, side):
    """Coefficients (c1, c2) of Gamma(Lx, Ly) and Gamma(Lx, (Ly)*)."""
    xz = float(x[2])
    lyz = float((bp.L @ y)[2])
    x_sign = np.sign(xz) if xz != 0.0 else side
    y_sign = np.sign(lyz) if lyz != 0.0 else side
    if x_sign is None or y_sign is None:
        raise ValueError("Evaluation on the interface needs a side hint (+1 or -1)")
    gp, gm = bp.gamma_plus, bp.gamma_minus
    if x_sign > 0 and y_sign > 0:
        return 1.0 / gp, (gp - gm) / (gp * (gp + gm))
    if x_sign < 0 and y_sign < 0:
        return 1.0 / gm, (gm - gp) / (gm * (gp + gm))
    return 2.0 / (gp + gm), 0.0


def _pulled_back(bp, X, Y, reflected):
    """Gamma(X, Y) or Gamma(X, Y*) with derivatives taken in the original x, y."""
    L = bp.L
    if not reflected:
        k = gamma_laplace(X, Y)
        return KernelValue(value=k.value, grad_x=L.T @ k.grad_x, grad_y=L.T @ k.grad_y,
                           hess_y=L.T @ k.hess_y @ L, mixed=L.T @ k.mixed @ L)
    k = gamma_laplace(X, REFLECTION @ Y)
    RL = REFLECTION @ L
    return KernelValue(value=k.value, grad_x=L.T @ k.grad_x, grad_y=RL.T @ k.grad_y,
                       hess_y=RL.T @ k.hess_y @ RL, mixed=L.T @ k.mixed @ RL)


def eval_H(bp, x, y, orders=None, side=None):
    """
    H(x, y) = |J| [c1 Gamma(Lx, Ly) + c2 Gamma(Lx, (Ly)*)] with its derivatives.

    The branch is chosen from the signs of x_z and (Ly)_z. When either is exactly 0
    the caller must say which side the limit is taken from (side = +1 or -1).
    `orders` is accepted for call compatibility; every derivative is returned since
    they all come from the same closed form.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.array_equal(x, y):
        raise ValueError("H is singular at x = y")
    c1, c2 = _branch(bp, x, y, side)
    X, Y = bp.L @ x, bp.L @ y
    total = _pulled_back(bp, X, Y, reflected=False).scaled(c1)
    if c2 != 0.0:
        total = total + _pulled_back(bp, X, Y, reflected=True).scaled(c2)
    return total.scaled(bp.detJ)


def sample_ray(bp, y, origin, direction, ts, side=None):
    """Rows of H and its derivatives along origin + t * direction, for CSV export."""
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    origin = np.asarray(origin, dtype=float)
    rows = []
    for t in ts:
        x = origin + t * direction
        k = eval_H(bp, x, y, side=side)
        g = gamma_laplace(x, y)
        rows.append({
            't': float(t),
            'x': float(x[0]), 'y': float(x[1]), 'z': float(x[2]),
            'H': k.value,
            'Gamma': g.value,
            'grad_x_norm': float(np.linalg.norm(k.grad_x)),
            'grad_y_norm': float(np.linalg.norm(k.grad_y)),
            'hess_y_norm': float(np.linalg.norm(k.hess_y)),
            'mixed_norm': float(np.linalg.norm(k.mixed)),
            'conormal_flux': float(bp.A0[2] @ k.grad_x) * (bp.gamma_plus if x[2] > 0 else bp.gamma_minus),
        })
    return rows
