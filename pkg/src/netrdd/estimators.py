"""Boundary, overall direct and overall indirect effect estimators.

Every estimator reduces to a univariate local polynomial contrast on a
nonnegative running variable: the distance to an effective-treatment
boundary, ``|X_i - c|``, or the neighbour score closest to the cutoff.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .bandwidth import BandwidthChoice, mse_optimal_h, pilot_bandwidth
from .boundary import Side, boundary_distances
from .exposure import (
    DEFAULT_ENUMERATION_CAP,
    ONE_TREATED,
    EffectiveTreatments,
    ExposureMapping,
    _as_rational,
    assign_effective_treatments,
)
from .graph import DependencyGraph, InterferenceSets, dependency_graph
from .kernel_fit import Kernel, LocalPolyFit, local_poly_fit
from .variance import (
    VARIANCE_MODES,
    bc_variance,
    cluster_block_graph,
    identity_graph,
    network_robust_variance,
)

__all__ = [
    "Dataset",
    "EffectRequest",
    "EffectEstimate",
    "BiasCorrection",
    "EstimationError",
    "estimate",
    "estimate_boundary_effect",
    "estimate_overall_direct",
    "estimate_overall_indirect",
    "estimate_boundary_direct_subset",
    "bias_correct",
    "nearest_neighbor_score",
    "CSV_COLUMNS",
    "Z95",
]

Z95 = 1.96
KINDS = ("boundary", "overall_direct", "overall_indirect", "direct_subset")
_MODE_ALIASES = {"iid_hc0": "iid", "hc0": "iid"}


class EstimationError(ValueError):
    pass


class Dataset:
    """Scores, outcomes and interference structure for one sample.

    Parameters
    ----------
    x, y : array_like, shape (n,)
        Scores and outcomes.
    sets : InterferenceSets
    cutoff : float
    mapping : ExposureMapping
    clusters : array_like, optional
        Cluster labels for the cluster-robust comparator; defaults to the
        labels carried by ``sets``.
    eligible : array_like of bool, optional
        Units that may enter estimation.  Exposures are always computed on
        the full sample, so excluding a unit never changes its neighbours'
        effective treatments.
    graph_mode : str
        Dependency-graph construction for the network-robust variance.
    """

    def __init__(self, x, y, sets: InterferenceSets, cutoff: float = 0.0,
                 mapping: ExposureMapping = ONE_TREATED, clusters=None, eligible=None,
                 graph_mode: str = "overlap", k_hop: int = 2, ids: Sequence | None = None,
                 cap: int = DEFAULT_ENUMERATION_CAP):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        n = sets.n
        if self.x.shape != (n,) or self.y.shape != (n,):
            raise EstimationError("scores, outcomes and interference sets disagree on n")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise EstimationError("scores and outcomes must be finite")
        self.sets = sets
        self.cutoff = float(cutoff)
        self.mapping = mapping
        self.clusters = sets.clusters if clusters is None else np.asarray(clusters)
        self.eligible = np.ones(n, dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
        self.graph_mode = graph_mode
        self.k_hop = k_hop
        self.ids = list(range(n)) if ids is None else list(ids)
        self.cap = cap
        self.treatments: EffectiveTreatments = assign_effective_treatments(self.x, self.cutoff, sets, mapping)
        self._graphs: dict[str, DependencyGraph] = {}

    @property
    def n(self) -> int:
        return self.sets.n

    def dependency(self, mode: str | None = None) -> DependencyGraph:
        mode = mode or self.graph_mode
        if mode not in self._graphs:
            if mode == "cluster_block" and self.clusters is not None:
                self._graphs[mode] = cluster_block_graph(self.clusters)
            else:
                self._graphs[mode] = dependency_graph(self.sets, mode, k=self.k_hop)
        return self._graphs[mode]

    def cluster_graph(self) -> DependencyGraph:
        if self.clusters is None:
            raise EstimationError("cluster-robust variance requires cluster labels")
        if "_cluster" not in self._graphs:
            self._graphs["_cluster"] = cluster_block_graph(self.clusters)
        return self._graphs["_cluster"]

    def restrict_max_neighbors(self, k: int) -> "Dataset":
        """Same data with estimation limited to units having ``|S_i| <= k``."""
        out = Dataset.__new__(Dataset)
        out.__dict__.update(self.__dict__)
        out.eligible = self.eligible & (self.sets.sizes <= k)
        return out


def _exposure_value(g) -> Fraction:
    if isinstance(g, Fraction):
        return g
    if isinstance(g, str):
        try:
            return Fraction(g.strip())
        except ValueError:
            raise EstimationError(f"cannot parse exposure value {g!r}") from None
    return _as_rational(g)


def _effect(t) -> tuple[int, Fraction]:
    d, g = t
    return int(d), _exposure_value(g)


@dataclass(frozen=True)
class EffectRequest:
    """What to estimate and how.

    ``kind`` is ``"boundary"`` (with ``source`` and ``target`` effective
    treatments), ``"overall_direct"``, ``"overall_indirect"`` or
    ``"direct_subset"`` (with exposure ``g``).
    """

    kind: str
    source: tuple | None = None
    target: tuple | None = None
    g: object = None
    p: int = 1
    kernel: str = "triangular"
    h: float | None = None
    b: float | None = None
    bias_correct: bool = False
    variance_modes: tuple[str, ...] = ("network", "iid")
    label: str | None = None
    include_isolated: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EstimationError(f"unknown effect kind {self.kind!r}; expected one of {KINDS}")
        if self.p < 1:
            raise EstimationError("polynomial order p must be >= 1")
        if self.h is not None and not self.h > 0:
            raise EstimationError("bandwidth h must be positive")
        if self.b is not None and not self.b > 0:
            raise EstimationError("pilot bandwidth b must be positive")
        if self.h is not None and self.b is not None and self.b < self.h:
            warnings.warn(f"pilot bandwidth b={self.b} is smaller than h={self.h}", stacklevel=2)
        Kernel.from_name(self.kernel)
        modes = tuple(_MODE_ALIASES.get(m, m) for m in self.variance_modes)
        for m in modes:
            if m not in VARIANCE_MODES:
                raise EstimationError(f"unknown variance mode {m!r}; expected one of {VARIANCE_MODES}")
        if not modes:
            raise EstimationError("at least one variance mode is required")
        object.__setattr__(self, "variance_modes", modes)
        if self.kind == "boundary":
            if self.source is None or self.target is None:
                raise EstimationError("boundary effects need source and target effective treatments")
            object.__setattr__(self, "source", _effect(self.source))
            object.__setattr__(self, "target", _effect(self.target))
        if self.kind == "direct_subset":
            if self.g is None:
                raise EstimationError("direct_subset needs an exposure value g")
            object.__setattr__(self, "g", _exposure_value(self.g))

    @classmethod
    def boundary(cls, source, target, **kw) -> "EffectRequest":
        return cls("boundary", source=source, target=target, **kw)

    @classmethod
    def overall_direct(cls, **kw) -> "EffectRequest":
        return cls("overall_direct", **kw)

    @classmethod
    def overall_indirect(cls, **kw) -> "EffectRequest":
        return cls("overall_indirect", **kw)

    @classmethod
    def direct_subset(cls, g, **kw) -> "EffectRequest":
        return cls("direct_subset", g=g, **kw)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "boundary":
            (d1, g1), (d2, g2) = self.source, self.target
            return f"tau_{d1}{g1}|{d2}{g2}"
        if self.kind == "direct_subset":
            return f"tau_1{self.g}|0{self.g}"
        return {"overall_direct": "tau_direct", "overall_indirect": "tau_indirect"}[self.kind]


CSV_COLUMNS = ("effect", "type", "estimate", "se", "ci_low", "ci_high", "pvalue",
               "n_plus", "n_minus", "h", "b", "s_bar", "pct_unique_distance",
               "se_iid", "se_cluster", "flags")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class EffectEstimate:
    """Point estimates, standard errors and diagnostics for one effect.

    ``se``, ``ci95`` and ``pvalue`` map variance modes to conventional
    quantities around ``tau``; the ``*_bc`` maps hold the robust versions
    centred at ``tau_bc`` with the bias-corrected standard error.
    """

    label: str
    kind: str
    tau: float
    se: dict[str, float]
    ci95: dict[str, tuple[float, float]]
    pvalue: dict[str, float]
    h_used: float
    b_used: float | None
    n_plus: int
    n_minus: int
    s_bar: int
    pct_unique_distance: float
    tau_bc: float | None = None
    se_bc: dict[str, float] = field(default_factory=dict)
    ci95_bc: dict[str, tuple[float, float]] = field(default_factory=dict)
    pvalue_bc: dict[str, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    caveats: list[str] = field(default_factory=list)
    bandwidth: BandwidthChoice | None = None

    @property
    def primary_mode(self) -> str:
        return next(iter(self.se))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = {k: list(v) for k, v in self.ci95.items()}
        d["ci95_bc"] = {k: list(v) for k, v in self.ci95_bc.items()}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def csv_rows(self) -> list[dict[str, str]]:
        """Conventional row, plus a robust row when bias correction ran."""
        m = self.primary_mode
        rows = []
        blocks = [("conventional", self.tau, self.se, self.ci95, self.pvalue)]
        if self.tau_bc is not None:
            blocks.append(("robust", self.tau_bc, self.se_bc, self.ci95_bc, self.pvalue_bc))
        for kind, est, se, ci, pv in blocks:
            rows.append({
                "effect": self.label, "type": kind, "estimate": _fmt(est), "se": _fmt(se[m]),
                "ci_low": _fmt(ci[m][0]), "ci_high": _fmt(ci[m][1]), "pvalue": _fmt(pv[m]),
                "n_plus": _fmt(self.n_plus), "n_minus": _fmt(self.n_minus), "h": _fmt(self.h_used),
                "b": _fmt(self.b_used), "s_bar": _fmt(self.s_bar),
                "pct_unique_distance": _fmt(self.pct_unique_distance),
                "se_iid": _fmt(se.get("iid")), "se_cluster": _fmt(se.get("cluster")),
                "flags": ";".join(self.flags),
            })
        return rows


def estimates_to_csv(estimates: Sequence[EffectEstimate]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for e in estimates:
        w.writerows(e.csv_rows())
    return buf.getvalue()


@dataclass(frozen=True)
class _Running:
    xt: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    s_bar: int
    caveats: tuple[str, ...] = ()


@dataclass(frozen=True)
class BiasCorrection:
    tau_bc: float
    bias_plus: float
    bias_minus: float
    pilot_plus: LocalPolyFit
    pilot_minus: LocalPolyFit
    b: float


def _side_bias(main: LocalPolyFit, pilot: LocalPolyFit, h: float, b: float) -> float:
    q = pilot.p
    return (h / b) ** q * main.bias_factor(q) * float(pilot.beta_scaled[q])


def bias_correct(fit_plus: LocalPolyFit, fit_minus: LocalPolyFit, y, xt, plus, minus, b: float,
                 kernel: Kernel | str | None = None) -> BiasCorrection:
    """Subtract the leading smoothing bias estimated by order ``p + 1`` fits at ``b``.

    The bias of each intercept is ``h^{p+1} m_{p+1} e_1' Γ⁻¹ θ`` with ``m_{p+1}``
    the leading coefficient of the pilot fit and ``Γ``, ``θ`` the sample
    matrices of the main fit.
    """
    if not b > 0:
        raise EstimationError("pilot bandwidth must be positive")
    kernel = fit_plus.kernel if kernel is None else kernel
    q = fit_plus.p + 1
    pp = local_poly_fit(y, xt, plus, b, q, kernel)
    pm = local_poly_fit(y, xt, minus, b, q, kernel)
    h = fit_plus.h
    bp, bm = _side_bias(fit_plus, pp, h, b), _side_bias(fit_minus, pm, h, b)
    tau_bc = (fit_plus.intercept - bp) - (fit_minus.intercept - bm)
    return BiasCorrection(tau_bc, bp, bm, pp, pm, b)


def nearest_neighbor_score(x: np.ndarray, sets: InterferenceSets, cutoff: float) -> np.ndarray:
    """Neighbour score closest to the cutoff (first such neighbour on ties); NaN for empty sets."""
    x = np.asarray(x, dtype=float)
    out = np.full(sets.n, np.nan)
    sizes = sets.sizes
    if not sets.indices.size:
        return out
    owner = np.repeat(np.arange(sets.n), sizes)
    vals = x[sets.indices]
    order = np.lexsort((np.abs(vals - cutoff), owner))
    first = np.concatenate(([True], owner[order][1:] != owner[order][:-1]))
    pick = order[first]
    out[owner[pick]] = vals[pick]
    return out


def _running_boundary(data: Dataset, req: EffectRequest) -> _Running:
    bd = boundary_distances(data.x, data.sets, data.treatments, data.mapping, req.source, req.target,
                            data.cutoff, cap=data.cap, eligible=data.eligible)
    caveats = []
    if bd.mixed_codim:
        caveats.append("units with boundaries of higher codimension were dropped; "
                       f"estimate uses codimension {bd.s_bar} only")
        bd = bd.lowest_codim_only()
    side = np.where(data.eligible, bd.side, Side.NEITHER)
    sizes = np.unique(data.sets.sizes[side != Side.NEITHER])
    if sizes.size > 1:
        caveats.append("pooled across neighbourhood sizes " + ",".join(str(int(s)) for s in sizes)
                       + "; the estimand is a weighted average of size-specific boundary effects")
    plus, minus = side == Side.PLUS, side == Side.MINUS
    xt = np.where(plus | minus, bd.distance, np.nan)
    s_bar = int(bd.codim[plus | minus].min()) if np.any(plus | minus) else 0
    return _Running(xt, plus, minus, s_bar, tuple(caveats))


def _running_univariate(data: Dataset, score: np.ndarray, base: np.ndarray) -> _Running:
    ok = base & np.isfinite(score)
    plus = ok & (score >= data.cutoff)
    minus = ok & (score < data.cutoff)
    xt = np.where(ok, np.abs(score - data.cutoff), np.nan)
    return _Running(xt, plus, minus, 1)


def _running(data: Dataset, req: EffectRequest) -> _Running:
    if req.kind == "boundary":
        return _running_boundary(data, req)
    base = data.eligible & (data.treatments.defined | req.include_isolated)
    if req.kind == "overall_direct":
        return _running_univariate(data, data.x, base)
    if req.kind == "overall_indirect":
        if not np.any(data.treatments.defined & data.eligible):
            raise EstimationError("overall indirect effect needs units with nonempty interference sets")
        return _running_univariate(data, nearest_neighbor_score(data.x, data.sets, data.cutoff),
                                   data.eligible & data.treatments.defined)
    g = req.g
    base = data.eligible & data.treatments.defined & (data.treatments.g_num == g.numerator) \
        & (data.treatments.g_den == g.denominator)
    return _running_univariate(data, data.x, base)


def _pct_unique(xt: np.ndarray, used: np.ndarray) -> float:
    if not used.size:
        return float("nan")
    _, inv, counts = np.unique(xt[used], return_inverse=True, return_counts=True)
    return float(np.mean(counts[inv] == 1))


def _normal_summary(est: float, var: float) -> tuple[float, tuple[float, float], float]:
    if not var > 0:
        return float("nan"), (float("nan"), float("nan")), float("nan")
    se = math.sqrt(var)
    p = float(2.0 * ndtr(-abs(est) / se))
    return se, (est - Z95 * se, est + Z95 * se), p


def _estimate(data: Dataset, req: EffectRequest, rv: _Running) -> EffectEstimate:
    if not rv.plus.any() or not rv.minus.any():
        raise EstimationError(f"{req.name}: no units on one side of the boundary")
    kernel = Kernel.from_name(req.kernel)
    y = data.y
    w_net = data.dependency()
    choice = None
    if req.h is None:
        choice = mse_optimal_h(y, rv.xt, rv.plus, rv.minus, rv.s_bar, req.p, kernel, w_net)
        h = choice.h
    else:
        h = req.h
    b = None
    if req.bias_correct:
        if req.b is not None:
            b = req.b
        elif choice is not None:
            b = choice.b
        else:
            b = pilot_bandwidth(rv.xt, rv.plus, rv.minus, rv.s_bar, req.p + 1)
    fp = local_poly_fit(y, rv.xt, rv.plus, h, req.p, kernel)
    fm = local_poly_fit(y, rv.xt, rv.minus, h, req.p, kernel)
    tau = fp.intercept - fm.intercept
    bc = bias_correct(fp, fm, y, rv.xt, rv.plus, rv.minus, b, kernel) if req.bias_correct else None

    flags = []
    if choice is not None and choice.regularized:
        flags.append("bias_constant_regularized")
    se, ci, pv, se_bc, ci_bc, pv_bc = {}, {}, {}, {}, {}, {}
    for mode in req.variance_modes:
        if mode == "network":
            w, cross = w_net, True
        elif mode == "iid":
            w, cross = identity_graph(data.n), True
        else:
            w, cross = data.cluster_graph(), False
        v = network_robust_variance(fp, fm, w, cross=cross)
        se[mode], ci[mode], pv[mode] = _normal_summary(tau, v)
        if not v > 0:
            flags.append(f"nonpositive_variance:{mode}")
        if bc is not None:
            vb = bc_variance(fp, fm, bc.pilot_plus, bc.pilot_minus, w, h, b, cross=cross)
            se_bc[mode], ci_bc[mode], pv_bc[mode] = _normal_summary(bc.tau_bc, vb)
            if not vb > 0:
                flags.append(f"nonpositive_bc_variance:{mode}")
    used = np.concatenate([fp.used, fm.used])
    return EffectEstimate(
        label=req.name, kind=req.kind, tau=float(tau), se=se, ci95=ci, pvalue=pv,
        h_used=float(h), b_used=None if b is None else float(b), n_plus=fp.n_eff, n_minus=fm.n_eff,
        s_bar=rv.s_bar, pct_unique_distance=_pct_unique(rv.xt, used),
        tau_bc=None if bc is None else float(bc.tau_bc), se_bc=se_bc, ci95_bc=ci_bc, pvalue_bc=pv_bc,
        flags=flags, caveats=list(rv.caveats), bandwidth=choice,
    )


def estimate_boundary_effect(data: Dataset, req: EffectRequest) -> EffectEstimate:
    """Local polynomial contrast in the distance to the ``source``/``target`` boundary.

    Units with ``(D, G) = source`` form the plus side and units with
    ``(D, G) = target`` the minus side.
    """
    if req.kind != "boundary":
        raise EstimationError("estimate_boundary_effect needs a boundary request")
    return _estimate(data, req, _running(data, req))


def estimate_overall_direct(data: Dataset, req: EffectRequest | None = None) -> EffectEstimate:
    """Univariate contrast in ``|X_i - c|`` with the own-treatment side."""
    req = req or EffectRequest.overall_direct()
    if req.kind != "overall_direct":
        raise EstimationError("estimate_overall_direct needs an overall_direct request")
    return _estimate(data, req, _running(data, req))


def estimate_overall_indirect(data: Dataset, req: EffectRequest | None = None) -> EffectEstimate:
    """Univariate contrast in the neighbour score closest to the cutoff."""
    req = req or EffectRequest.overall_indirect()
    if req.kind != "overall_indirect":
        raise EstimationError("estimate_overall_indirect needs an overall_indirect request")
    return _estimate(data, req, _running(data, req))


def estimate_boundary_direct_subset(data: Dataset, g, req: EffectRequest | None = None) -> EffectEstimate:
    """Direct effect at exposure ``g`` by subsetting to ``G_i = g``.

    Coincides exactly with the boundary estimator for ``(1, g)`` versus
    ``(0, g)``.
    """
    if req is None:
        req = EffectRequest.direct_subset(g)
    elif req.kind != "direct_subset" or req.g != _exposure_value(g):
        kw = {k: getattr(req, k) for k in ("p", "kernel", "h", "b", "bias_correct", "variance_modes", "label")}
        req = EffectRequest.direct_subset(g, **kw)
    return _estimate(data, req, _running(data, req))


def estimate(data: Dataset, req: EffectRequest) -> EffectEstimate:
    """Dispatch on ``req.kind``."""
    if req.kind == "boundary":
        return estimate_boundary_effect(data, req)
    if req.kind == "overall_direct":
        return estimate_overall_direct(data, req)
    if req.kind == "overall_indirect":
        return estimate_overall_indirect(data, req)
    return estimate_boundary_direct_subset(data, req.g, req)
