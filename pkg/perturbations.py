"""
perturbations.py - The coefficient perturbations a stability sweep feeds the solver

A Perturbation adds affine pieces to gamma and/or q on some slabs of a reference
pair. They come from two places:
- create_perturbations: random draws of a given magnitude, from one seeded RNG
- perturbation_from_dict: explicit perturbations listed in the config

All random draws happen up front, in sample order, so a sweep gives the same pairs
whatever the number of worker threads.
"""
import json
import random

from coefficients import AffinePiece, perturb_pair, sup_over_box

KINDS = ('gamma', 'sigma', 'q', 'mixed')


class Perturbation:
    """
    One sample of a sweep

    gamma_pieces / q_pieces map a slab index to the AffinePiece added there.
    """
    def __init__(self, sample_id, magnitude, gamma_pieces=None, q_pieces=None, kind="explicit"):
        self.sample_id = sample_id
        self.magnitude = float(magnitude)
        self.gamma_pieces = dict(gamma_pieces or {})
        self.q_pieces = dict(q_pieces or {})
        self.kind = kind

    @property
    def is_zero(self):
        pieces = list(self.gamma_pieces.values()) + list(self.q_pieces.values())
        return all(p.norm == 0.0 for p in pieces)

    def apply(self, pair):
        """The perturbed pair"""
        for m in list(self.gamma_pieces) + list(self.q_pieces):
            if not 1 <= m <= pair.N:
                raise ValueError(f"Perturbation targets slab {m}, the pair has slabs 1..{pair.N}")
        return perturb_pair(pair, self.gamma_pieces, self.q_pieces)

    def to_dict(self):
        def pieces(d):
            return {str(m): {'offset': p.offset, 'gradient': list(p.gradient)} for m, p in sorted(d.items())}
        return {'magnitude': self.magnitude, 'kind': self.kind,
                'gamma': pieces(self.gamma_pieces), 'q': pieces(self.q_pieces)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _random_piece(rng, magnitude, lower, upper, affine):
    """
    Affine piece whose sup over the slab is exactly `magnitude`.

    The offset gets a random sign; with affine=True a random gradient of up to half
    the offset's size across the slab is added before rescaling.
    """
    if magnitude == 0:
        return AffinePiece(0.0)
    sign = rng.choice((-1.0, 1.0))
    if not affine:
        return AffinePiece(sign * magnitude)
    extent = [u - l for l, u in zip(lower, upper)]
    gradient = tuple(rng.uniform(-0.5, 0.5) / (3.0 * e) for e in extent)
    centre = [0.5 * (l + u) for l, u in zip(lower, upper)]
    # offset chosen so the piece equals sign at the slab centre
    offset = sign - sum(g * c for g, c in zip(gradient, centre))
    piece = AffinePiece(offset, gradient)
    sup, _ = sup_over_box(piece, lower, upper)
    return piece.scaled(magnitude / sup)


def create_perturbations(magnitudes, samples_per_magnitude, kind, slabs, domain, affine=True, seed=42):
    """
    Random perturbations: for each magnitude, samples_per_magnitude draws on the given slabs

    kind 'gamma' (or 'sigma') perturbs gamma, 'q' perturbs q, 'mixed' both.
    """
    if kind not in KINDS:
        raise ValueError(f"Unknown perturbation kind: {kind}")
    for m in slabs:
        if not 1 <= m <= domain.N:
            raise ValueError(f"Perturbation slab {m} outside 1..{domain.N}")
    if samples_per_magnitude < 1:
        raise ValueError(f"samples_per_magnitude must be at least 1, got {samples_per_magnitude}")

    rng = random.Random(seed)
    perturbations = []
    sample_id = 0
    for magnitude in magnitudes:
        if magnitude < 0:
            raise ValueError(f"Perturbation magnitudes must be non-negative, got {magnitude}")
        for _ in range(samples_per_magnitude):
            gamma_pieces, q_pieces = {}, {}
            for m in slabs:
                lower, upper = domain.partition.slab_bounds(m)
                if kind in ('gamma', 'sigma', 'mixed'):
                    gamma_pieces[m] = _random_piece(rng, magnitude, lower, upper, affine)
                if kind in ('q', 'mixed'):
                    q_pieces[m] = _random_piece(rng, magnitude, lower, upper, affine)
            perturbations.append(Perturbation(sample_id, magnitude, gamma_pieces, q_pieces, kind=kind))
            sample_id += 1
    return perturbations


def _piece_from_entry(entry):
    if isinstance(entry, (int, float)):
        return AffinePiece(entry)
    return AffinePiece(entry.get('offset', 0.0), entry.get('gradient', (0.0, 0.0, 0.0)))


def perturbation_from_dict(entry, sample_id):
    """
    {"magnitude": 0.02, "gamma": {"2": 0.02}, "q": {"1": {"offset": 0.1, "gradient": [0, 0, 0.1]}}}

    A bare number is a constant offset. The magnitude defaults to the largest offset.
    """
    gamma_pieces = {int(m): _piece_from_entry(v) for m, v in entry.get('gamma', {}).items()}
    q_pieces = {int(m): _piece_from_entry(v) for m, v in entry.get('q', {}).items()}
    if not gamma_pieces and not q_pieces:
        raise ValueError(f"Perturbation {sample_id} changes nothing: give 'gamma' or 'q' pieces")
    pieces = list(gamma_pieces.values()) + list(q_pieces.values())
    magnitude = entry.get('magnitude', max(abs(p.offset) for p in pieces))
    return Perturbation(sample_id, magnitude, gamma_pieces, q_pieces, kind=entry.get('kind', 'explicit'))


def sweep_perturbations(sweep_config, domain, seed=42):
    """Explicit perturbations from the config if listed, random draws otherwise."""
    explicit = sweep_config.get('perturbations')
    if explicit:
        return [perturbation_from_dict(entry, i) for i, entry in enumerate(explicit)]
    return create_perturbations(
        magnitudes=sweep_config.get('magnitudes', [0.01, 0.02, 0.04, 0.08, 0.1]),
        samples_per_magnitude=sweep_config.get('samples_per_magnitude', 4),
        kind=sweep_config.get('kind', 'gamma'),
        slabs=sweep_config.get('slabs', [domain.N]),
        domain=domain,
        affine=sweep_config.get('affine', True),
        seed=seed,
    )
