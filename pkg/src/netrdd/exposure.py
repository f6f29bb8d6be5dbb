"""Exposure mappings and effective-treatment assignment.

Exposure values are exact rationals.  Per-unit values are stored as reduced
numerator/denominator integer arrays so that grouping units by exposure never
depends on floating-point equality.
"""
from __future__ import annotations

import itertools
import math
import numbers
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import InterferenceSets

__all__ = [
    "ExposureMapping",
    "ExposureError",
    "EffectiveTreatments",
    "ONE_TREATED",
    "SUM_TREATED",
    "FRACTION_TREATED",
    "mapping_from_name",
    "apply_exposure",
    "assign_effective_treatments",
    "enumerate_configs",
    "attainable_values",
    "DEFAULT_ENUMERATION_CAP",
]

DEFAULT_ENUMERATION_CAP = 20


class ExposureError(ValueError):
    pass


def _as_rational(v) -> Fraction:
    if isinstance(v, (bool, np.bool_)):
        return Fraction(int(v))
    if isinstance(v, numbers.Rational):
        return Fraction(int(v.numerator), int(v.denominator))
    raise ExposureError(f"exposure mapping returned non-rational value {v!r}; "
                        "continuously valued exposures are not supported")


@dataclass(frozen=True)
class ExposureMapping:
    """Map from a neighbour treatment vector to a discrete exposure value.

    Use the module-level built-ins or :meth:`custom`.  ``kind`` is one of
    ``"one_treated"``, ``"sum"``, ``"fraction"`` or ``"custom"``.
    """

    kind: str
    func: Callable[[tuple[int, ...]], object] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("one_treated", "sum", "fraction", "custom"):
            raise ExposureError(f"unknown exposure mapping {self.kind!r}")
        if self.kind == "custom":
            if self.func is None:
                raise ExposureError("custom mapping requires a function")
            # probe small neighbourhoods so float-valued maps fail early
            for s in range(1, 4):
                for v in itertools.product((0, 1), repeat=s):
                    _as_rational(self.func(v))

    @classmethod
    def custom(cls, func: Callable[[tuple[int, ...]], object]) -> "ExposureMapping":
        return cls("custom", func)

    @property
    def symmetric(self) -> bool:
        """Built-ins depend on the neighbour vector only through its count."""
        return self.kind != "custom"

    def value_from_count(self, k: int, s: int) -> Fraction:
        if self.kind == "one_treated":
            return Fraction(int(k > 0))
        if self.kind == "sum":
            return Fraction(k)
        if self.kind == "fraction":
            return Fraction(k, s)
        raise ExposureError("value_from_count is only defined for built-in mappings")

    def __call__(self, d_s: Sequence[int]) -> Fraction:
        return apply_exposure(self, d_s)


ONE_TREATED = ExposureMapping("one_treated")
SUM_TREATED = ExposureMapping("sum")
FRACTION_TREATED = ExposureMapping("fraction")

_BY_NAME = {"one_treated": ONE_TREATED, "sum": SUM_TREATED, "fraction": FRACTION_TREATED}


def mapping_from_name(name: str) -> ExposureMapping:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ExposureError(f"unknown exposure mapping {name!r}; expected one of {sorted(_BY_NAME)}") from None


def apply_exposure(mapping: ExposureMapping, d_s: Sequence[int]) -> Fraction:
    """Exposure value of a nonempty binary neighbour treatment vector."""
    d_s = tuple(int(v) for v in d_s)
    if not d_s:
        raise ExposureError("exposure is undefined for an empty interference set")
    if any(v not in (0, 1) for v in d_s):
        raise ExposureError("treatment vector must be binary")
    if mapping.kind == "custom":
        return _as_rational(mapping.func(d_s))
    return mapping.value_from_count(sum(d_s), len(d_s))


@dataclass(frozen=True)
class EffectiveTreatments:
    """Per-unit ``(D_i, G_i)``; ``defined`` is False where ``S_i`` is empty."""

    d: np.ndarray
    g_num: np.ndarray
    g_den: np.ndarray
    defined: np.ndarray

    def __len__(self) -> int:
        return len(self.d)

    def g(self, i: int) -> Fraction | None:
        if not self.defined[i]:
            return None
        return Fraction(int(self.g_num[i]), int(self.g_den[i]))

    def g_float(self) -> np.ndarray:
        out = np.full(len(self.d), np.nan)
        ok = self.defined
        out[ok] = self.g_num[ok] / self.g_den[ok]
        return out

    def match(self, d: int, g) -> np.ndarray:
        """Boolean mask of units with ``(D_i, G_i) == (d, g)``."""
        g = _as_rational(g) if not isinstance(g, Fraction) else g
        return (self.defined & (self.d == int(d))
                & (self.g_num == g.numerator) & (self.g_den == g.denominator))

    def __getitem__(self, i: int) -> tuple[int, Fraction | None]:
        return int(self.d[i]), self.g(i)


def assign_effective_treatments(scores: np.ndarray, cutoff: float, sets: InterferenceSets,
                                mapping: ExposureMapping) -> EffectiveTreatments:
    """Sharp rule ``D_i = 1(X_i >= c)`` and ``G_i = g(D_{S_i})``."""
    x = np.asarray(scores, dtype=float)
    if x.shape != (sets.n,):
        raise ExposureError(f"scores length {x.shape} does not match {sets.n} units")
    d = (x >= cutoff).astype(np.int8)
    sizes = sets.sizes
    defined = sizes > 0
    num = np.zeros(sets.n, dtype=np.int64)
    den = np.ones(sets.n, dtype=np.int64)
    if mapping.symmetric:
        counts = np.asarray(sets.membership().astype(np.int64) @ d.astype(np.int64)).ravel()
        if mapping.kind == "one_treated":
            num = (counts > 0).astype(np.int64)
        elif mapping.kind == "sum":
            num = counts
        else:
            s = np.where(defined, sizes, 1)
            gcd = np.gcd(counts, s)
            gcd[gcd == 0] = 1
            num, den = counts // gcd, s // gcd
    else:
        for i in np.flatnonzero(defined):
            v = apply_exposure(mapping, d[sets[i]])
            num[i], den[i] = v.numerator, v.denominator
    num = np.where(defined, num, 0)
    den = np.where(defined, den, 1)
    return EffectiveTreatments(d, num, den, defined)


def attainable_values(mapping: ExposureMapping, s: int, cap: int = DEFAULT_ENUMERATION_CAP) -> list[Fraction]:
    """Sorted distinct exposure values reachable with ``s`` neighbours."""
    if s < 1:
        raise ExposureError("neighbourhood size must be >= 1")
    if mapping.symmetric:
        return sorted({mapping.value_from_count(k, s) for k in range(s + 1)})
    _check_cap(s, cap)
    return sorted({apply_exposure(mapping, v) for v in itertools.product((0, 1), repeat=s)})


def _check_cap(s: int, cap: int):
    if s > cap:
        raise ExposureError(f"neighbourhood size {s} exceeds the enumeration cap {cap}")


def counts_for_value(mapping: ExposureMapping, s: int, g) -> list[int]:
    """Treated-neighbour counts giving exposure ``g`` (built-in mappings only)."""
    g = _as_rational(g) if not isinstance(g, Fraction) else g
    return [k for k in range(s + 1) if mapping.value_from_count(k, s) == g]


def _vectors_with_count(s: int, k: int) -> Iterator[tuple[int, ...]]:
    for ones in itertools.combinations(range(s), k):
        v = [0] * s
        for j in ones:
            v[j] = 1
        yield tuple(v)


def iter_configs(mapping: ExposureMapping, s: int, d: int, g,
                 cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[tuple[int, tuple[int, ...]]]:
    """Lazily yield ``(d, d_S)`` configurations with exposure ``g``."""
    g = _as_rational(g) if not isinstance(g, Fraction) else g
    if s < 1:
        raise ExposureError("neighbourhood size must be >= 1")
    if mapping.symmetric:
        for k in counts_for_value(mapping, s, g):
            for v in _vectors_with_count(s, k):
                yield int(d), v
        return
    _check_cap(s, cap)
    for v in itertools.product((0, 1), repeat=s):
        if apply_exposure(mapping, v) == g:
            yield int(d), v


def enumerate_configs(mapping: ExposureMapping, s: int, d: int, g,
                      cap: int = DEFAULT_ENUMERATION_CAP) -> list[tuple[int, tuple[int, ...]]]:
    """All own/neighbour treatment configurations yielding effective treatment ``(d, g)``.

    Built-in mappings are enumerated by treated count; the cap applies to the
    number of materialised vectors rather than to ``s`` directly.
    """
    if mapping.symmetric:
        total = sum(math.comb(s, k) for k in counts_for_value(mapping, s, g)) if s >= 1 else 0
        if total > 2 ** cap:
            raise ExposureError(f"{total} configurations exceed the enumeration cap 2**{cap}")
    return list(iter_configs(mapping, s, d, g, cap))


def neighbor_counts(sets: InterferenceSets, d: np.ndarray) -> np.ndarray:
    m: sp.csr_matrix = sets.membership().astype(np.int64)
    return np.asarray(m @ np.asarray(d, dtype=np.int64)).ravel()
