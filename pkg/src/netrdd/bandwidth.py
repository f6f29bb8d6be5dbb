"""MSE-optimal bandwidths for distance-based local polynomial estimators.

Two-stage plug-in.  A rule-of-thumb pilot gives preliminary fits; the order
``p + 1`` pilot fit estimates the leading bias constant and an order ``p``
sandwich at the pilot bandwidth estimates the variance constant.  The optimum
of ``h^{2(p+1)} B² + V / (n h^s)`` then follows in closed form, with ``B²``
replaced by ``B̂² + R̂`` where ``R̂`` estimates the sampling variance of ``B̂``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import DependencyGraph
from .kernel_fit import Kernel, local_poly_fit
from .variance import identity_graph, influence_quadratic, network_robust_variance

__all__ = [
    "BandwidthChoice",
    "BandwidthError",
    "NORMAL_REFERENCE",
    "mse_objective",
    "mse_closed_form",
    "pilot_bandwidth",
    "mse_optimal_h",
]

# 99% two-sided normal quantile, used as the rule-of-thumb scale constant
NORMAL_REFERENCE = 2.576
# squared bias at the pilot bandwidth is kept at or above this share of the variance there
BIAS_FLOOR = 0.01


class BandwidthError(ValueError):
    pass


@dataclass(frozen=True)
class BandwidthChoice:
    h: float
    b: float
    b_hat: float
    v_hat: float
    s_bar: int
    h_pilot: float = float("nan")
    r_hat: float = 0.0
    regularized: bool = False


def mse_objective(h, b_hat: float, v_hat: float, n: int, s_bar: int, p: int = 1):
    """Leading squared bias plus variance at bandwidth ``h``."""
    h = np.asarray(h, dtype=float)
    return h ** (2 * (p + 1)) * b_hat ** 2 + v_hat / (n * h ** s_bar)


def mse_closed_form(b_hat: float, v_hat: float, n: int, s_bar: int, p: int = 1) -> float:
    """Minimiser ``[s V / (2(p+1) B² n)]^{1 / (2(p+1) + s)}`` of :func:`mse_objective`."""
    if b_hat == 0:
        raise BandwidthError("bias constant is zero; the MSE has no interior minimum")
    k = 2 * (p + 1)
    return (s_bar * v_hat / (k * b_hat ** 2 * n)) ** (1.0 / (k + s_bar))


def pilot_bandwidth(xt: np.ndarray, plus: np.ndarray, minus: np.ndarray, s_bar: int, order: int,
                    constant: float = NORMAL_REFERENCE) -> float:
    """Rule-of-thumb pilot ``c σ n_side^{-1/(2 order + 1 + s)}``, the larger of the two sides.

    ``σ`` is the root mean square distance on each side, i.e. the spread of
    the signed distance around the boundary.
    """
    xt = np.asarray(xt, dtype=float)
    out = []
    for mask in (plus, minus):
        d = xt[np.asarray(mask, dtype=bool)]
        if d.size < 2 or np.ptp(d) == 0:
            raise BandwidthError("distance sample has no spread on one side of the boundary")
        sigma = math.sqrt(float(np.mean(d * d)))
        out.append(constant * sigma * d.size ** (-1.0 / (2 * order + 1 + s_bar)))
    return max(out)


def _bias_variance(qp, qm, cp: float, cm: float, w: DependencyGraph) -> float:
    """Sampling variance of ``cp m_plus - cm m_minus`` from the pilot-fit influence rows."""
    q = qp.p
    psi = np.zeros(qp.n)
    for sign, c, fit in ((1.0, cp, qp), (-1.0, cm, qm)):
        vals = fit.influence() @ fit.gamma_inv[q] / (fit.n * fit.h ** q)
        np.add.at(psi, fit.used, sign * c * vals)
    return max(influence_quadratic(psi, psi, w), 0.0)


def mse_optimal_h(y: np.ndarray, xt: np.ndarray, plus: np.ndarray, minus: np.ndarray, s_bar: int,
                  p: int = 1, kernel: Kernel | str = Kernel.TRIANGULAR,
                  w: DependencyGraph | None = None, regularize: bool = True) -> BandwidthChoice:
    """Plug-in MSE-optimal main bandwidth plus the pilot bandwidth for bias correction.

    Parameters
    ----------
    y, xt : array_like
        Outcomes and distances (NaN allowed outside ``plus | minus``).
    plus, minus : array_like of bool
        Units on each side of the boundary.
    s_bar : int
        Boundary codimension; sets the variance rate ``n h^s``.
    w : DependencyGraph, optional
        Dependency graph for the pilot variance; independence if omitted.
    regularize : bool
        Add the estimated sampling variance of the bias constant to its
        square, which keeps noisy curvature estimates from inflating ``h``.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    h0 = pilot_bandwidth(xt, plus, minus, s_bar, p)
    b0 = pilot_bandwidth(xt, plus, minus, s_bar, p + 1)
    w = identity_graph(n) if w is None else w
    fp, fm = local_poly_fit(y, xt, plus, h0, p, kernel), local_poly_fit(y, xt, minus, h0, p, kernel)
    qp, qm = local_poly_fit(y, xt, plus, b0, p + 1, kernel), local_poly_fit(y, xt, minus, b0, p + 1, kernel)
    m_plus = qp.beta[p + 1]
    m_minus = qm.beta[p + 1]
    cp, cm = fp.bias_factor(p + 1), fm.bias_factor(p + 1)
    b_hat = m_plus * cp - m_minus * cm
    r_hat = _bias_variance(qp, qm, cp, cm, w) if regularize else 0.0
    v_pilot = network_robust_variance(fp, fm, w)
    if not v_pilot > 0:
        raise BandwidthError(f"pilot variance is not positive ({v_pilot:.3g})")
    v_hat = v_pilot * n * h0 ** s_bar
    floor = BIAS_FLOOR * v_pilot / h0 ** (2 * (p + 1))
    b2 = b_hat ** 2 + r_hat
    regularized = b2 < floor
    b_eff = math.sqrt(max(b2, floor))
    h = mse_closed_form(b_eff, v_hat, n, s_bar, p)
    return BandwidthChoice(h=h, b=b0, b_hat=float(b_hat), v_hat=float(v_hat), s_bar=s_bar,
                           h_pilot=h0, r_hat=float(r_hat), regularized=bool(regularized))
