"""Sandwich variances for differences of local polynomial intercepts.

The network-robust estimator weights cross-products of influence rows by the
dependency graph.  HC0 is the special case ``W = I``; the cluster comparator
uses a cluster-block ``W`` but drops covariances between the two sides.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import DependencyGraph, InterferenceSets, dependency_graph
from .kernel_fit import LocalPolyFit

__all__ = [
    "InfluenceMatrix",
    "influence_matrix",
    "psi_matrix",
    "network_robust_variance",
    "hc0_variance",
    "cluster_robust_variance",
    "cluster_block_graph",
    "identity_graph",
    "bc_influence",
    "bc_variance",
    "influence_quadratic",
    "VARIANCE_MODES",
]

VARIANCE_MODES = ("network", "iid", "cluster")


@dataclass(frozen=True)
class InfluenceMatrix:
    """Rows ``K_h(x_i) r_p(x_i/h) û_i`` indexed by global unit id."""

    index: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)
    n: int = 0

    @property
    def n_eff(self) -> int:
        return int(self.index.size)


def influence_matrix(fit: LocalPolyFit) -> InfluenceMatrix:
    return InfluenceMatrix(fit.used, fit.influence(), fit.n)


def identity_graph(n: int) -> DependencyGraph:
    return DependencyGraph(sp.identity(n, dtype=np.int8, format="csr"), "identity")


def cluster_block_graph(labels) -> DependencyGraph:
    labels = list(labels)
    sets = InterferenceSets(np.zeros(len(labels) + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return dependency_graph(sets, "cluster_block", clusters=labels)


def psi_matrix(m_a: InfluenceMatrix, m_b: InfluenceMatrix, w: DependencyGraph) -> np.ndarray:
    """``M_a' W M_b / n`` accumulated over the graph edges between the two supports."""
    if m_a.n != m_b.n or m_a.n != w.n:
        raise ValueError("influence matrices and dependency graph disagree on n")
    sub = w.restrict(m_a.index, m_b.index).astype(np.float64)
    return m_a.rows.T @ (sub @ m_b.rows) / m_a.n


def network_robust_variance(fit_plus: LocalPolyFit, fit_minus: LocalPolyFit, w: DependencyGraph,
                            cross: bool = True) -> float:
    """Variance of the intercept difference, robust to dependence encoded by ``w``.

    ``cross=False`` drops the covariance between the two sides.
    """
    mp, mm = influence_matrix(fit_plus), influence_matrix(fit_minus)
    gp, gm = fit_plus.gamma_inv, fit_minus.gamma_inv
    v = gp @ psi_matrix(mp, mp, w) @ gp + gm @ psi_matrix(mm, mm, w) @ gm
    if cross:
        v = v - 2.0 * (gp @ psi_matrix(mp, mm, w) @ gm)
    return float(v[0, 0] / fit_plus.n)


def hc0_variance(fit_plus: LocalPolyFit, fit_minus: LocalPolyFit) -> float:
    """Heteroskedasticity-robust plug-in variance assuming independent units."""
    return network_robust_variance(fit_plus, fit_minus, identity_graph(fit_plus.n))


def cluster_robust_variance(fit_plus: LocalPolyFit, fit_minus: LocalPolyFit, cluster_labels) -> float:
    """Cluster sandwich that only counts dependence among units on the same side."""
    if cluster_labels is None:
        raise ValueError("cluster-robust variance requires cluster labels")
    w = cluster_labels if isinstance(cluster_labels, DependencyGraph) else cluster_block_graph(cluster_labels)
    return network_robust_variance(fit_plus, fit_minus, w, cross=False)


def _side_terms(main: LocalPolyFit, pilot: LocalPolyFit | None, h: float, b: float | None):
    """Per-unit influence contributions for one side as ``(index, value)`` pairs."""
    n = main.n
    terms = [(main.used, main.influence() @ main.gamma_inv[0] / n)]
    if pilot is not None:
        q = pilot.p
        scale = (h / b) ** q * main.bias_factor(q)
        terms.append((pilot.used, -scale * (pilot.influence() @ pilot.gamma_inv[q]) / n))
    return terms


def bc_influence(fit_plus: LocalPolyFit, fit_minus: LocalPolyFit,
                 pilot_plus: LocalPolyFit | None, pilot_minus: LocalPolyFit | None,
                 h: float, b: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Dense per-unit influence vectors ``(ψ_plus, ψ_minus)`` of the bias-corrected estimate.

    ``ψ = Σ ψ_i`` reproduces the centred estimator; the minus side enters with
    a negative sign.  Without pilot fits this is the influence of the
    uncorrected estimate.
    """
    n = fit_plus.n
    out = []
    for sign, main, pilot in ((1.0, fit_plus, pilot_plus), (-1.0, fit_minus, pilot_minus)):
        psi = np.zeros(n)
        for idx, val in _side_terms(main, pilot, h, b):
            np.add.at(psi, idx, sign * val)
        out.append(psi)
    return out[0], out[1]


def influence_quadratic(psi_a: np.ndarray, psi_b: np.ndarray, w: DependencyGraph) -> float:
    """``ψ_a' W ψ_b`` over the supports of the two vectors."""
    ia, ib = np.flatnonzero(psi_a), np.flatnonzero(psi_b)
    if not ia.size or not ib.size:
        return 0.0
    sub = w.restrict(ia, ib).astype(np.float64)
    return float(psi_a[ia] @ (sub @ psi_b[ib]))


def bc_variance(fit_plus: LocalPolyFit, fit_minus: LocalPolyFit, pilot_plus: LocalPolyFit,
                pilot_minus: LocalPolyFit, w: DependencyGraph, h: float, b: float,
                cross: bool = True) -> float:
    """Variance of the bias-corrected estimate, including the bias-term variability."""
    pp, pm = bc_influence(fit_plus, fit_minus, pilot_plus, pilot_minus, h, b)
    v = influence_quadratic(pp, pp, w) + influence_quadratic(pm, pm, w)
    if cross:
        v += 2.0 * influence_quadratic(pp, pm, w)
    return v
