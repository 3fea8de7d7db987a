"""
geometry.py - Box domain, stacked slabs, the glued extension below Sigma, and chain sets

The domain Omega is an axis-aligned box cut into slabs D_1..D_N stacked along z.
Sigma is a rectangle on the bottom face; the extension D0 is a box of given depth
glued below Sigma, and the Robin patch Sigma0 sits on the bottom face of D0.

Conventions used everywhere in this repo:
- the chain axis is z, every interface normal is +e_z (outward from the lower slab)
- points exactly on an interface belong to the lower-index region
- region index 0 is D0, 1..N are the slabs, -1 means "outside Omega0"
"""
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_VOLUME_CONSTANT = 8.0

# Relative tolerance for "is this point on that plane" decisions
PLANE_TOL = 1e-12


def _as_point(values, size=3):
    point = tuple(float(v) for v in values)
    if len(point) != size:
        raise ValueError(f"Expected {size} coordinates, got {len(point)}")
    return point


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple
    upper: tuple
    r0: float
    volume_constant: float = DEFAULT_VOLUME_CONSTANT

    def __post_init__(self):
        object.__setattr__(self, 'lower', _as_point(self.lower))
        object.__setattr__(self, 'upper', _as_point(self.upper))
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError(f"Box upper corner {self.upper} must exceed lower corner {self.lower}")
        if self.r0 <= 0:
            raise ValueError(f"r0 must be positive, got {self.r0}")
        if self.volume > self.volume_constant * self.r0 ** 3:
            raise ValueError(
                f"Box volume {self.volume:.4g} exceeds C*r0^3 = {self.volume_constant * self.r0 ** 3:.4g}"
            )

    @property
    def size(self):
        return tuple(u - l for l, u in zip(self.lower, self.upper))

    @property
    def volume(self):
        return math.prod(self.size)

    @property
    def center(self):
        return tuple(0.5 * (l + u) for l, u in zip(self.lower, self.upper))

    def contains(self, x, tol=PLANE_TOL):
        return all(l - tol <= xi <= u + tol for xi, l, u in zip(x, self.lower, self.upper))


@dataclass(frozen=True)
class Patch:
    """Axis-aligned rectangle lying in the plane z = height."""
    center: tuple
    half_widths: tuple
    height: float

    def __post_init__(self):
        object.__setattr__(self, 'center', _as_point(self.center, 2))
        object.__setattr__(self, 'half_widths', _as_point(self.half_widths, 2))
        if min(self.half_widths) <= 0:
            raise ValueError(f"Patch half widths must be positive, got {self.half_widths}")

    @property
    def bounds(self):
        """(x0, x1, y0, y1)"""
        (cx, cy), (wx, wy) = self.center, self.half_widths
        return (cx - wx, cx + wx, cy - wy, cy + wy)

    @property
    def anchor(self):
        return (self.center[0], self.center[1], self.height)

    def contains(self, x, tol=PLANE_TOL):
        x0, x1, y0, y1 = self.bounds
        return (abs(x[2] - self.height) <= tol and x0 - tol <= x[0] <= x1 + tol
                and y0 - tol <= x[1] <= y1 + tol)

    def contains_disc(self, radius):
        return min(self.half_widths) >= radius - PLANE_TOL


@dataclass(frozen=True)
class Interface:
    index: int          # Sigma_{m+1} separates D_m (below) from D_{m+1} (above)
    height: float
    anchor: tuple
    radius: float
    normal: tuple = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class SlabPartition:
    box: BoxDomain
    cuts: tuple
    interfaces: tuple

    @property
    def N(self):
        return len(self.cuts) + 1

    def heights(self):
        """z_0 < z_1 < ... < z_N, the box bottom and top included."""
        return (self.box.lower[2],) + tuple(self.cuts) + (self.box.upper[2],)

    def slab_bounds(self, m):
        if not 1 <= m <= self.N:
            raise ValueError(f"Slab index {m} outside 1..{self.N}")
        z = self.heights()
        lower = (self.box.lower[0], self.box.lower[1], z[m - 1])
        upper = (self.box.upper[0], self.box.upper[1], z[m])
        return lower, upper

    def slab_index(self, z):
        """Slab holding height z, lower slab on ties."""
        return int(np.searchsorted(np.asarray(self.cuts), z, side='left')) + 1


def build_slab_partition(box, N, cuts=()):
    """
    Cut the box into N slabs at the given heights.

    Every gap (box bottom to first cut, between cuts, last cut to top) has to be at
    least r0/3 thick, and each interface must hold a disc of radius r0/3 around its
    centre.
    """
    cuts = tuple(float(c) for c in cuts)
    if len(cuts) != N - 1:
        raise ValueError(f"A partition into {N} slabs needs {N - 1} cuts, got {len(cuts)}")

    bottom, top = box.lower[2], box.upper[2]
    min_gap = box.r0 / 3.0
    heights = (bottom,) + cuts + (top,)
    for below, above in zip(heights[:-1], heights[1:]):
        if above <= below:
            raise ValueError(f"Cuts must be strictly increasing and inside the box, got {cuts}")
        if above - below < min_gap - PLANE_TOL:
            raise ValueError(
                f"Slab [{below}, {above}] is thinner than r0/3 = {min_gap:.4g} (gap {above - below:.4g})"
            )

    half_x = 0.5 * box.size[0]
    half_y = 0.5 * box.size[1]
    if min(half_x, half_y) < min_gap - PLANE_TOL:
        raise ValueError(f"Box faces cannot hold an interface disc of radius r0/3 = {min_gap:.4g}")

    cx, cy, _ = box.center
    interfaces = tuple(
        Interface(index=m + 1, height=z, anchor=(cx, cy, z), radius=min_gap)
        for m, z in enumerate(cuts, start=1)
    )
    return SlabPartition(box=box, cuts=cuts, interfaces=interfaces)


@dataclass(frozen=True)
class AugmentedDomain:
    partition: SlabPartition
    sigma: Patch
    depth: float
    sigma0: Patch

    @property
    def box(self):
        return self.partition.box

    @property
    def r0(self):
        return self.box.r0

    @property
    def N(self):
        return self.partition.N

    @property
    def d0_bounds(self):
        x0, x1, y0, y1 = self.sigma.bounds
        bottom = self.box.lower[2]
        return (x0, y0, bottom - self.depth), (x1, y1, bottom)

    @property
    def bounding_box(self):
        """Corners of the smallest box holding Omega0."""
        lower = list(self.box.lower)
        lower[2] -= self.depth
        return tuple(lower), self.box.upper

    def anchors(self):
        """Interface anchors P_1..P_N, P_1 being the centre of Sigma."""
        return [self.sigma.anchor] + [itf.anchor for itf in self.partition.interfaces]

    def interface_heights(self):
        """Heights of Sigma_1 (= Sigma), Sigma_2, ..., Sigma_N."""
        return [self.box.lower[2]] + list(self.partition.cuts)

    def region_index(self, points):
        """
        Region of each point: 0 for D0, m for slab D_m, -1 outside Omega0.

        Works on a single point or an (..., 3) array. Interface points take the
        lower index, so a point of Sigma is reported as D0.
        """
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        box = self.box
        tol = PLANE_TOL * max(1.0, max(box.size))

        in_box = ((x >= box.lower[0] - tol) & (x <= box.upper[0] + tol)
                  & (y >= box.lower[1] - tol) & (y <= box.upper[1] + tol)
                  & (z >= box.lower[2] - tol) & (z <= box.upper[2] + tol))
        slab = np.searchsorted(np.asarray(self.partition.cuts), z, side='left') + 1
        region = np.where(in_box, slab, -1)

        (dx0, dy0, dz0), (dx1, dy1, dz1) = self.d0_bounds
        in_d0 = ((x >= dx0 - tol) & (x <= dx1 + tol) & (y >= dy0 - tol) & (y <= dy1 + tol)
                 & (z >= dz0 - tol) & (z <= dz1 + tol))
        region = np.where(in_d0, 0, region)
        region = region.astype(int)
        return int(region[0]) if single else region

    def contains(self, x):
        return self.region_index(x) >= 0

    def to_dict(self):
        return {
            'box': {'lower': list(self.box.lower), 'upper': list(self.box.upper)},
            'r0': self.r0,
            'volume_constant': self.box.volume_constant,
            'cuts': list(self.partition.cuts),
            'sigma': {'center': list(self.sigma.center), 'half_widths': list(self.sigma.half_widths)},
            'depth': self.depth,
            'sigma0': {'center': list(self.sigma0.center), 'half_widths': list(self.sigma0.half_widths)},
        }


def augment(partition, sigma_patch, depth, sigma0_half_widths=None):
    """
    Glue the box D0 of the given depth below Sigma and pick Sigma0 on its far face.

    sigma_patch can be a Patch or a dict with 'center' and 'half_widths'; it is
    placed on the bottom face of the box. Sigma0 defaults to a patch of half width
    r0/3 (clipped to Sigma) centred under Sigma.
    """
    box = partition.box
    if isinstance(sigma_patch, dict):
        sigma_patch = Patch(sigma_patch['center'], sigma_patch['half_widths'], box.lower[2])
    if abs(sigma_patch.height - box.lower[2]) > PLANE_TOL:
        raise ValueError("Sigma must lie on the bottom face of the box")
    x0, x1, y0, y1 = sigma_patch.bounds
    if (x0 < box.lower[0] - PLANE_TOL or x1 > box.upper[0] + PLANE_TOL
            or y0 < box.lower[1] - PLANE_TOL or y1 > box.upper[1] + PLANE_TOL):
        raise ValueError(f"Sigma {sigma_patch.bounds} leaves the bottom face of the box")
    if not sigma_patch.contains_disc(box.r0 / 3.0):
        raise ValueError(f"Sigma is too small: half widths {sigma_patch.half_widths} < r0/3 = {box.r0 / 3.0:.4g}")
    if depth <= 0:
        raise ValueError(f"D0 depth must be positive, got {depth}")

    if sigma0_half_widths is None:
        r = box.r0 / 3.0
        sigma0_half_widths = (min(r, sigma_patch.half_widths[0]), min(r, sigma_patch.half_widths[1]))
    wx, wy = sigma0_half_widths
    if wx > sigma_patch.half_widths[0] + PLANE_TOL or wy > sigma_patch.half_widths[1] + PLANE_TOL:
        raise ValueError("Sigma0 must fit inside the bottom face of D0")
    sigma0 = Patch(sigma_patch.center, (wx, wy), box.lower[2] - depth)

    return AugmentedDomain(partition=partition, sigma=sigma_patch, depth=float(depth), sigma0=sigma0)


def domain_from_dict(spec):
    """Build an AugmentedDomain from the 'geometry' section of a config."""
    box_spec = spec['box']
    box = BoxDomain(box_spec['lower'], box_spec['upper'], spec['r0'],
                    spec.get('volume_constant', DEFAULT_VOLUME_CONSTANT))
    cuts = spec.get('cuts', [])
    partition = build_slab_partition(box, len(cuts) + 1, cuts)
    sigma0 = spec.get('sigma0', {})
    return augment(partition, spec['sigma'], spec['depth'], sigma0.get('half_widths'))


@dataclass(frozen=True)
class ChainSets:
    k: int
    top: float          # upper height of W_k
    w_mask: np.ndarray
    u_mask: np.ndarray


def chain_top(domain, k):
    """Upper height of W_k: Sigma for k=0, the cut z_k in between, the box top for k=N."""
    if not 0 <= k <= domain.N:
        raise ValueError(f"Chain index {k} outside 0..{domain.N}")
    return domain.partition.heights()[k] if k > 0 else domain.box.lower[2]


def chain_sets(domain, k, grid):
    """
    Cell masks of W_k = D0 u D1 u ... u Dk and U_k = Omega minus closure(W_k).

    Interfaces sit on cell faces, so every active cell is in exactly one of the two.
    """
    top = chain_top(domain, k)
    region = grid.region
    w_mask = (region >= 0) & (region <= k)
    u_mask = region > k
    return ChainSets(k=k, top=top, w_mask=w_mask, u_mask=u_mask)


def distance_to_u(domain, k, x):
    """Distance from a point of W_k to U_k (inf when U_k is empty)."""
    if k >= domain.N:
        return math.inf
    return max(chain_top(domain, k) - x[2], 0.0)


def chain_radii(rbar):
    """(r1, r2, r3) with r3 = rbar/2, r2 = 3 r3 / 4, r1 = r3 / 4."""
    r3 = 0.5 * rbar
    return 0.25 * r3, 0.75 * r3, r3


def _lateral_room(point, lower, upper):
    return min(point[0] - lower[0], upper[0] - point[0], point[1] - lower[1], upper[1] - point[1])


def ball_inside_chain_set(domain, k, center, radius):
    """
    True when the closed ball lies in W_k.

    W_k is D0 (narrow, below Sigma) stacked under the box part [bottom, top_k], so
    the ball is checked against each part using its cross section at z = bottom.
    """
    c = tuple(float(v) for v in center)
    top = chain_top(domain, k)
    bottom = domain.box.lower[2]
    (d0_lower, d0_upper) = domain.d0_bounds
    tol = PLANE_TOL * max(1.0, radius)

    if c[2] - radius < d0_lower[2] - tol:
        return False
    if c[2] + radius > (top if k > 0 else bottom) + tol:
        return False

    # Widest cross section of the ball on each side of the plane z = bottom
    below_extent = 0.0
    if c[2] - radius < bottom:
        below_extent = radius if c[2] <= bottom else math.sqrt(max(radius ** 2 - (c[2] - bottom) ** 2, 0.0))
    above_extent = 0.0
    if c[2] + radius > bottom:
        above_extent = radius if c[2] >= bottom else math.sqrt(max(radius ** 2 - (bottom - c[2]) ** 2, 0.0))

    if below_extent > 0 and _lateral_room(c, d0_lower, d0_upper) < below_extent - tol:
        return False
    if above_extent > 0:
        if k == 0:
            return False
        if _lateral_room(c, domain.box.lower, domain.box.upper) < above_extent - tol:
            return False
    return True


def _polyline(domain, start, target):
    """start -> anchors of the interfaces crossed on the way up or down -> target."""
    lo, hi = sorted((start[2], target[2]))
    anchors = [a for a in domain.anchors() if lo < a[2] < hi]
    if target[2] < start[2]:
        anchors.reverse()
    return [np.asarray(start, dtype=float)] + [np.asarray(a, dtype=float) for a in anchors] + \
        [np.asarray(target, dtype=float)]


def _last_point_at_distance(vertices, center, distance):
    """
    Largest polyline parameter whose point is exactly `distance` away from center.

    Segments are scanned from the end, so the first root found is the largest one.
    Returns (point, segment index) or None when every later point is closer.
    """
    for seg in range(len(vertices) - 2, -1, -1):
        a, b = vertices[seg], vertices[seg + 1]
        d = b - a
        f = a - center
        qa = float(d @ d)
        if qa == 0.0:
            continue
        qb = 2.0 * float(f @ d)
        qc = float(f @ f) - distance ** 2
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0:
            continue
        s = (-qb + math.sqrt(disc)) / (2.0 * qa)
        if 0.0 <= s <= 1.0:
            return a + s * d, seg
    return None


def ball_chain(domain, start, target, r1, h, k=None):
    """
    Centres of a chain of balls from start (in D0) to target along the polyline
    through the interface anchors.

    Consecutive centres are 2*r1 - h apart (h the grid spacing) except for the
    last step, so neighbouring balls overlap by at least one cell; every ball of
    radius r1 lies in W_k, where k defaults to the region of the target.
    """
    if r1 <= 0:
        raise ValueError(f"r1 must be positive, got {r1}")
    if not 0 < h < 2.0 * r1:
        raise ValueError(f"Grid spacing {h} must lie in (0, 2 r1) for r1={r1}")
    start = np.asarray(start, dtype=float)
    target = np.asarray(target, dtype=float)
    if k is None:
        k = max(domain.region_index(start), domain.region_index(target))
    if k < 0:
        raise ValueError("start and target must lie in Omega0")

    centers = [start]
    if np.allclose(start, target):
        if not ball_inside_chain_set(domain, k, start, r1):
            raise ValueError(f"No admissible ball chain: B_r1({start.tolist()}) leaves W_{k}")
        return [tuple(start)]

    vertices = _polyline(domain, start, target)
    step = 2.0 * r1 - h
    current = start
    # generous cap; the chain is at most (polyline length / step) + 1 long
    length = sum(float(np.linalg.norm(b - a)) for a, b in zip(vertices[:-1], vertices[1:]))
    max_steps = int(length / step) + len(vertices) + 2
    for _ in range(max_steps):
        if np.linalg.norm(target - current) <= step * (1.0 + 1e-9):
            centers.append(target)
            break
        found = _last_point_at_distance(vertices, current, step)
        if found is None:
            centers.append(target)
            break
        current, seg = found
        # later steps never walk back past the segment just used
        vertices = [current] + vertices[seg + 1:]
        centers.append(current)

    for c in centers:
        if not ball_inside_chain_set(domain, k, c, r1):
            raise ValueError(
                f"No admissible ball chain at r1={r1}: ball around {np.round(c, 6).tolist()} leaves W_{k}"
            )
    return [tuple(float(v) for v in c) for c in centers]
