"""Kernel-weighted local polynomial regression on a nonnegative distance.

The fit is carried out in the scaled coordinate ``u = x / h`` so that the
Gram matrix stays well conditioned at small bandwidths.  Weights follow the
``K_h(x) = K(x / h) / h`` convention and sample matrices are normalised by the
full sample size ``n``, not by the number of units in the window.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Kernel", "kernel_eval", "LocalPolyFit", "FitError", "local_poly_fit", "poly_basis"]

MAX_CONDITION = 1e12


class Kernel(enum.Enum):
    TRIANGULAR = "triangular"
    UNIFORM = "uniform"
    EPANECHNIKOV = "epanechnikov"

    @classmethod
    def from_name(cls, name: "str | Kernel") -> "Kernel":
        if isinstance(name, Kernel):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown kernel {name!r}; expected one of {[k.value for k in cls]}") from None

    def __call__(self, u):
        return kernel_eval(self, u)


def kernel_eval(k: Kernel, u):
    """Kernel weight at ``u``; zero outside ``[-1, 1]``."""
    a = np.abs(np.asarray(u, dtype=float))
    if k is Kernel.TRIANGULAR:
        out = np.maximum(0.0, 1.0 - a)
    elif k is Kernel.UNIFORM:
        out = np.where(a <= 1.0, 0.5, 0.0)
    elif k is Kernel.EPANECHNIKOV:
        out = 0.75 * np.maximum(0.0, 1.0 - a * a)
    else:
        raise ValueError(f"unsupported kernel {k!r}")
    return float(out) if out.ndim == 0 else out


def poly_basis(u: np.ndarray, p: int) -> np.ndarray:
    """Rows ``r_p(u) = (1, u, ..., u^p)``."""
    return np.vander(np.asarray(u, dtype=float), p + 1, increasing=True)


class FitError(RuntimeError):
    """Local polynomial fit could not be computed reliably."""

    def __init__(self, message: str, n_eff: int = 0, condition: float = math.inf):
        super().__init__(f"{message} (n_eff={n_eff}, condition={condition:.3g})")
        self.n_eff = n_eff
        self.condition = condition


@dataclass(frozen=True)
class LocalPolyFit:
    """Result of one kernel-weighted polynomial regression.

    ``beta_scaled`` are coefficients in ``u = x / h``; ``used`` are global unit
    indices with strictly positive weight, and ``u``, ``weights``,
    ``residuals`` align with ``used``.  ``gamma`` is ``X(h)' W X(h) / n``.
    """

    h: float
    p: int
    n: int
    kernel: Kernel
    beta_scaled: np.ndarray
    gamma: np.ndarray
    gamma_inv: np.ndarray = field(repr=False)
    used: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    condition: float = float("nan")

    @property
    def n_eff(self) -> int:
        return int(self.used.size)

    @property
    def intercept(self) -> float:
        return float(self.beta_scaled[0])

    @property
    def beta(self) -> np.ndarray:
        """Coefficients in the raw distance coordinate."""
        return self.beta_scaled / self.h ** np.arange(self.p + 1)

    def derivative(self, q: int) -> float:
        """Estimate of the ``q``-th derivative at zero distance."""
        return math.factorial(q) * float(self.beta_scaled[q]) / self.h ** q

    @property
    def design(self) -> np.ndarray:
        return poly_basis(self.u, self.p)

    def theta(self, q: int | None = None) -> np.ndarray:
        """Sample ``X_p(h)' W S_q(h) / n`` (``q`` defaults to ``p + 1``)."""
        q = self.p + 1 if q is None else q
        return self.design.T @ (self.weights * self.u ** q) / self.n

    def bias_factor(self, q: int | None = None) -> float:
        """``e_1' Γ⁻¹ θ``, the leading-bias multiplier of the intercept."""
        return float(self.gamma_inv[0] @ self.theta(q))

    def influence(self) -> np.ndarray:
        """Rows ``K_h(x_i) r_p(x_i / h) û_i`` for the used units."""
        return self.design * (self.weights * self.residuals)[:, None]


def local_poly_fit(y: np.ndarray, xt: np.ndarray, include: np.ndarray, h: float, p: int = 1,
                   kernel: Kernel | str = Kernel.TRIANGULAR) -> LocalPolyFit:
    """Weighted least squares of ``y`` on ``r_p(xt / h)`` with weights ``K(xt / h) / h``.

    Parameters
    ----------
    y, xt : array_like, shape (n,)
        Outcomes and nonnegative distances.  Entries outside ``include`` may be NaN.
    include : array_like of bool, shape (n,)
        Units on the side being fitted.
    h : float
        Bandwidth.
    p : int
        Polynomial order.
    kernel : Kernel or str

    Raises
    ------
    FitError
        With fewer than ``p + 2`` units inside the window or a Gram matrix
        whose condition number exceeds ``1e12``.
    """
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    if p < 0:
        raise ValueError("polynomial order must be nonnegative")
    kern = Kernel.from_name(kernel)
    y = np.asarray(y, dtype=float)
    xt = np.asarray(xt, dtype=float)
    include = np.asarray(include, dtype=bool)
    n = y.size
    cand = np.flatnonzero(include)
    u_all = xt[cand] / h
    k_all = kernel_eval(kern, u_all) if cand.size else np.zeros(0)
    pos = k_all > 0
    used = cand[pos]
    u = u_all[pos]
    w = k_all[pos] / h
    n_eff = used.size
    if n_eff < p + 2:
        raise FitError("too few units inside the bandwidth", n_eff)
    r = poly_basis(u, p)
    sw = np.sqrt(w)
    a = r * sw[:, None]
    q, rr = np.linalg.qr(a)
    sv = np.linalg.svd(rr, compute_uv=False)
    cond = float(sv[0] / sv[-1]) ** 2 if sv[-1] > 0 else math.inf
    if not cond < MAX_CONDITION:
        raise FitError("Gram matrix is numerically singular", n_eff, cond)
    yy = y[used]
    beta = np.linalg.solve(rr, q.T @ (sw * yy))
    rinv = np.linalg.solve(rr, np.eye(p + 1))
    gamma = (rr.T @ rr) / n
    gamma_inv = (rinv @ rinv.T) * n
    resid = yy - r @ beta
    return LocalPolyFit(h=float(h), p=p, n=n, kernel=kern, beta_scaled=beta, gamma=gamma,
                        gamma_inv=gamma_inv, used=used, u=u, weights=w, residuals=resid,
                        condition=cond)
