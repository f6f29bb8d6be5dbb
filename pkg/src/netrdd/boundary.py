"""Effective-treatment boundaries and distances to them.

A boundary between two effective treatments is a union of cutoff-aligned
pieces.  Each piece constrains every score coordinate (own score first, then
the sorted interference set) to be equal to, at least, or at most the cutoff.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .exposure import (
    DEFAULT_ENUMERATION_CAP,
    EffectiveTreatments,
    ExposureError,
    ExposureMapping,
    counts_for_value,
    iter_configs,
    _as_rational,
)
from .graph import InterferenceSets

__all__ = [
    "Constraint",
    "BoundaryPiece",
    "BoundarySpec",
    "Side",
    "BoundaryError",
    "build_boundary",
    "min_distance",
    "min_distances",
    "symmetric_min_distances",
    "effective_region_side",
    "boundary_distances",
    "format_piece",
    "UnattainableError",
    "BoundaryDistances",
]

# number of (config, config) pairs materialised before giving up
MAX_CONFIG_PAIRS = 1 << 22


class BoundaryError(ValueError):
    pass


class UnattainableError(BoundaryError):
    """An effective treatment cannot occur at the given neighbourhood size."""


class Constraint(enum.IntEnum):
    FIXED = 0      # x_z = c
    AT_LEAST = 1   # x_z >= c
    AT_MOST = 2    # x_z <= c


class Side(enum.IntEnum):
    MINUS = -1
    NEITHER = 0
    PLUS = 1


@dataclass(frozen=True, order=True)
class BoundaryPiece:
    codim: int
    pattern: tuple[Constraint, ...]

    def __post_init__(self):
        if self.codim < 1 or self.codim != sum(c == Constraint.FIXED for c in self.pattern):
            raise BoundaryError("piece codimension must equal its number of fixed coordinates (>= 1)")


def _as_effect(t) -> tuple[int, Fraction]:
    d, g = t
    return int(d), (g if isinstance(g, Fraction) else _as_rational(g))


@dataclass(frozen=True)
class BoundarySpec:
    """Deduplicated boundary pieces for neighbourhood size ``s``."""

    pieces: tuple[BoundaryPiece, ...]
    s: int
    source: tuple[int, Fraction]
    target: tuple[int, Fraction]
    mapping: ExposureMapping | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.pieces:
            raise BoundaryError("boundary has no pieces")
        if len(set(p.pattern for p in self.pieces)) != len(self.pieces):
            raise BoundaryError("duplicate boundary pieces")
        if any(len(p.pattern) != self.s + 1 for p in self.pieces):
            raise BoundaryError("piece length must be s + 1")

    @property
    def min_codim(self) -> int:
        return min(p.codim for p in self.pieces)

    @property
    def dim(self) -> int:
        return self.s + 1

    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boolean ``(dim, pieces)`` masks for fixed / at-least / at-most coordinates."""
        pat = np.array([p.pattern for p in self.pieces], dtype=np.int8).T
        return pat == Constraint.FIXED, pat == Constraint.AT_LEAST, pat == Constraint.AT_MOST

    def describe(self) -> list[str]:
        return [format_piece(p) for p in self.pieces]


_NAMES = "jklmnopqrstuvwxyz"


def _coord_name(z: int, s: int) -> str:
    if z == 0:
        return "x_i"
    if s <= len(_NAMES):
        return f"x_{_NAMES[z - 1]}"
    return f"x_j{z}"


def format_piece(piece: BoundaryPiece) -> str:
    s = len(piece.pattern) - 1
    ops = {Constraint.FIXED: "=", Constraint.AT_LEAST: ">=", Constraint.AT_MOST: "<="}
    terms = [f"{_coord_name(z, s)} {ops[c]} c" for z, c in enumerate(piece.pattern)]
    return ", ".join(terms) + f" (codim {piece.codim})"


def _pair_pattern(c1: tuple[int, ...], c2: tuple[int, ...]) -> tuple[Constraint, ...]:
    out = []
    for a, b in zip(c1, c2):
        if a != b:
            out.append(Constraint.FIXED)
        elif a == 1:
            out.append(Constraint.AT_LEAST)
        else:
            out.append(Constraint.AT_MOST)
    return tuple(out)


def build_boundary(mapping: ExposureMapping, s: int, source, target,
                   cap: int = DEFAULT_ENUMERATION_CAP) -> BoundarySpec:
    """Boundary between effective treatments ``source = (d, g)`` and ``target = (d', g')``.

    Every pair of compatible configurations contributes one piece: coordinates
    where the two configurations disagree are pinned to the cutoff, agreeing
    coordinates keep their common half-line.
    """
    src, tgt = _as_effect(source), _as_effect(target)
    if src == tgt:
        raise BoundaryError("source and target effective treatments must differ")
    if mapping.symmetric and s >= 1:
        # count before materialising: a single size-30 set has ~1e8 vectors
        n_src = sum(math.comb(s, k) for k in counts_for_value(mapping, s, src[1]))
        n_tgt = sum(math.comb(s, k) for k in counts_for_value(mapping, s, tgt[1]))
        if n_src and n_tgt and n_src * n_tgt > MAX_CONFIG_PAIRS:
            raise BoundaryError(f"{n_src * n_tgt} configuration pairs exceed the materialisation limit")
    c_src = [(d,) + v for d, v in iter_configs(mapping, s, *src, cap=cap)]
    c_tgt = [(d,) + v for d, v in iter_configs(mapping, s, *tgt, cap=cap)]
    if not c_src:
        raise UnattainableError(f"effective treatment {src} is not attainable with {s} neighbours")
    if not c_tgt:
        raise UnattainableError(f"effective treatment {tgt} is not attainable with {s} neighbours")
    if len(c_src) * len(c_tgt) > MAX_CONFIG_PAIRS:
        raise BoundaryError(f"{len(c_src) * len(c_tgt)} configuration pairs exceed the materialisation limit")
    patterns = {_pair_pattern(a, b) for a in c_src for b in c_tgt}
    pieces = sorted(BoundaryPiece(sum(c == Constraint.FIXED for c in p), p) for p in patterns)
    return BoundarySpec(tuple(pieces), s, src, tgt, mapping)


def _coord_costs(points: np.ndarray, cutoff: float, scale: np.ndarray | None):
    diff = np.asarray(points, dtype=float) - cutoff
    if scale is not None:
        diff = diff * scale
    fixed = diff * diff
    at_least = np.minimum(diff, 0.0) ** 2
    at_most = np.maximum(diff, 0.0) ** 2
    return fixed, at_least, at_most


def min_distances(points: np.ndarray, spec: BoundarySpec, cutoff: float,
                  scale: Sequence[float] | None = None) -> np.ndarray:
    """Euclidean distance from each row of ``points`` to the boundary.

    ``points`` has shape ``(m, s + 1)`` with the own score in column 0.  Free
    coordinates project onto half-lines anchored at the cutoff.  ``scale``
    optionally rescales coordinates before measuring.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != spec.dim:
        raise BoundaryError(f"point dimension {pts.shape[1]} does not match boundary dimension {spec.dim}")
    sc = None if scale is None else np.asarray(scale, dtype=float)
    fixed, at_least, at_most = _coord_costs(pts, cutoff, sc)
    mf, ml, mm = spec.masks()
    cost = fixed @ mf + at_least @ ml + at_most @ mm
    return np.sqrt(cost.min(axis=1))


def min_distance(point: Sequence[float], spec: BoundarySpec, cutoff: float,
                 scale: Sequence[float] | None = None) -> float:
    """Distance from a single point ``(x_self, x_neighbours...)`` to the boundary."""
    p = np.asarray(point, dtype=float).ravel()
    if p.size != spec.dim:
        raise BoundaryError(f"point dimension {p.size} does not match boundary dimension {spec.dim}")
    return float(min_distances(p[None, :], spec, cutoff, scale)[0])


def symmetric_min_distances(points: np.ndarray, mapping: ExposureMapping, source, target,
                            cutoff: float) -> np.ndarray:
    """Distance to the boundary for count-based mappings without listing pieces.

    Dynamic programme over neighbours tracking how many are treated in each
    of the two configurations; cost is polynomial in ``s``.
    """
    if not mapping.symmetric:
        raise BoundaryError("symmetric_min_distances needs a count-based mapping")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, dim = pts.shape
    s = dim - 1
    (d1, g1), (d2, g2) = _as_effect(source), _as_effect(target)
    k1s, k2s = counts_for_value(mapping, s, g1), counts_for_value(mapping, s, g2)
    if not k1s or not k2s:
        raise BoundaryError("effective treatment not attainable")
    fixed, at_least, at_most = _coord_costs(pts, cutoff, None)
    if d1 != d2:
        own = fixed[:, 0]
    elif d1 == 1:
        own = at_least[:, 0]
    else:
        own = at_most[:, 0]
    inf = np.inf
    table = np.full((m, s + 1, s + 1), inf)
    table[:, 0, 0] = 0.0
    for z in range(1, s + 1):
        new = table + at_most[:, z, None, None]
        new[:, 1:, 1:] = np.minimum(new[:, 1:, 1:], table[:, :-1, :-1] + at_least[:, z, None, None])
        new[:, 1:, :] = np.minimum(new[:, 1:, :], table[:, :-1, :] + fixed[:, z, None, None])
        new[:, :, 1:] = np.minimum(new[:, :, 1:], table[:, :, :-1] + fixed[:, z, None, None])
        table = new
    best = np.full(m, inf)
    for k1 in k1s:
        for k2 in k2s:
            best = np.minimum(best, table[:, k1, k2])
    return np.sqrt(own + best)


def effective_region_side(treatments: EffectiveTreatments, source, target) -> np.ndarray:
    """Per-unit :class:`Side` code: PLUS for ``source``, MINUS for ``target``."""
    src, tgt = _as_effect(source), _as_effect(target)
    side = np.zeros(len(treatments), dtype=np.int8)
    side[treatments.match(*src)] = Side.PLUS
    side[treatments.match(*tgt)] = Side.MINUS
    return side


@dataclass(frozen=True)
class BoundaryDistances:
    """Distances and sides for one effect over a whole dataset.

    ``distance`` is NaN for units outside both regions.  ``codim`` holds the
    minimal boundary codimension of each unit's neighbourhood size (0 when
    unrouted), and ``specs`` caches the boundary per size.
    """

    distance: np.ndarray
    side: np.ndarray
    codim: np.ndarray
    specs: dict[int, BoundarySpec]

    @property
    def s_bar(self) -> int:
        c = self.codim[self.side != Side.NEITHER]
        return int(c.min()) if c.size else 0

    @property
    def mixed_codim(self) -> bool:
        c = self.codim[self.side != Side.NEITHER]
        return bool(c.size) and bool(np.any(c != c.min()))

    def lowest_codim_only(self) -> "BoundaryDistances":
        """Drop routed units whose boundary codimension exceeds the minimum."""
        if not self.mixed_codim:
            return self
        side = self.side.copy()
        side[(side != Side.NEITHER) & (self.codim != self.s_bar)] = Side.NEITHER
        dist = np.where(side != Side.NEITHER, self.distance, np.nan)
        return BoundaryDistances(dist, side, self.codim, self.specs)


def boundary_distances(scores: np.ndarray, sets: InterferenceSets, treatments: EffectiveTreatments,
                       mapping: ExposureMapping, source, target, cutoff: float,
                       cap: int = DEFAULT_ENUMERATION_CAP,
                       scale: Sequence[float] | None = None,
                       eligible: np.ndarray | None = None) -> BoundaryDistances:
    """Route units by ``|S_i|`` and measure each one's distance to its boundary.

    Units with an empty interference set are never routed, nor are units
    outside ``eligible`` when a mask is given.  Sizes at which either
    effective treatment is unattainable contribute no units.
    """
    x = np.asarray(scores, dtype=float)
    n = sets.n
    side = effective_region_side(treatments, source, target)
    side[~treatments.defined] = Side.NEITHER
    if eligible is not None:
        side[~np.asarray(eligible, dtype=bool)] = Side.NEITHER
    dist = np.full(n, np.nan)
    codim = np.zeros(n, dtype=np.int64)
    sizes = sets.sizes
    specs: dict[int, BoundarySpec] = {}
    for s in np.unique(sizes[side != Side.NEITHER]):
        s = int(s)
        units = np.flatnonzero((sizes == s) & (side != Side.NEITHER))
        try:
            spec = build_boundary(mapping, s, source, target, cap=cap)
        except UnattainableError:
            side[units] = Side.NEITHER
            continue
        except (BoundaryError, ExposureError):
            if not mapping.symmetric:
                raise
            spec = None
        members = sets.indices[sets.indptr[units][:, None] + np.arange(s)[None, :]]
        pts = np.column_stack([x[units], x[members]])
        if spec is not None:
            specs[s] = spec
            dist[units] = min_distances(pts, spec, cutoff, scale)
            codim[units] = spec.min_codim
        else:
            dist[units] = symmetric_min_distances(pts, mapping, source, target, cutoff)
            (d1, g1), (d2, g2) = _as_effect(source), _as_effect(target)
            codim[units] = int(d1 != d2) + min(abs(a - b) for a in counts_for_value(mapping, s, g1)
                                               for b in counts_for_value(mapping, s, g2))
    return BoundaryDistances(dist, side, codim, specs)
