from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate

from netrdd.kernel_fit import FitError, Kernel, kernel_eval, local_poly_fit

KERNELS = list(Kernel)


def test_kernel_values():
    assert kernel_eval(Kernel.TRIANGULAR, 0.0) == 1.0
    assert kernel_eval(Kernel.UNIFORM, 1.5) == 0.0
    assert kernel_eval(Kernel.EPANECHNIKOV, 0.5) == 0.5625
    assert kernel_eval(Kernel.UNIFORM, 1.0) == 0.5


@pytest.mark.parametrize("k", KERNELS)
def test_kernel_integrates_to_one(k):
    val, _ = integrate.quad(lambda u: kernel_eval(k, u), -1, 1, points=[0.0], epsabs=1e-13)
    assert abs(val - 1) < 1e-10


@pytest.mark.parametrize("k", KERNELS)
def test_kernel_symmetric_nonnegative(k):
    u = np.linspace(-2, 2, 401)
    v = kernel_eval(k, u)
    assert (v >= 0).all()
    np.testing.assert_array_equal(v, kernel_eval(k, -u))
    assert (v[np.abs(u) > 1] == 0).all()


def test_unknown_kernel_name():
    with pytest.raises(ValueError):
        Kernel.from_name("gaussian")


def _data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    xt = rng.uniform(0, 1.5, n)
    inc = rng.random(n) < 0.8
    return rng, xt, inc


def test_constant_outcome():
    _, xt, inc = _data()
    fit = local_poly_fit(np.full(xt.size, 3.7), xt, inc, 0.9, 1)
    assert fit.intercept == pytest.approx(3.7, abs=1e-12)
    assert fit.beta[1] == pytest.approx(0.0, abs=1e-11)


@pytest.mark.parametrize("k", KERNELS)
@pytest.mark.parametrize("h", [0.4, 1.0, 3.0])
def test_linear_outcome_exact(k, h):
    _, xt, inc = _data()
    fit = local_poly_fit(2 + 3 * xt, xt, inc, h, 1, k)
    np.testing.assert_allclose(fit.beta_scaled, [2, 3 * h], rtol=1e-10)
    assert fit.derivative(1) == pytest.approx(3.0, rel=1e-10)


def _oracle_beta(y, xt, include, h, p, kernel):
    """Normal equations in exact rational arithmetic on the double inputs."""
    rows = []
    for yi, xi, inc in zip(y, xt, include):
        if not inc:
            continue
        u = Fraction(float(xi)) / Fraction(float(h))
        k = {Kernel.TRIANGULAR: max(Fraction(0), 1 - abs(u)),
             Kernel.UNIFORM: Fraction(1, 2) if abs(u) <= 1 else Fraction(0),
             Kernel.EPANECHNIKOV: Fraction(3, 4) * max(Fraction(0), 1 - u * u)}[kernel]
        if k > 0:
            rows.append((Fraction(float(yi)), u, k))
    a = [[sum(k * u ** (i + j) for _, u, k in rows) for j in range(p + 1)] for i in range(p + 1)]
    b = [sum(k * u ** i * yy for yy, u, k in rows) for i in range(p + 1)]
    # Gauss-Jordan on rationals
    m = [row + [bi] for row, bi in zip(a, b)]
    for c in range(p + 1):
        piv = next(r for r in range(c, p + 1) if m[r][c] != 0)
        m[c], m[piv] = m[piv], m[c]
        for r in range(p + 1):
            if r != c:
                f = m[r][c] / m[c][c]
                m[r] = [x - f * z for x, z in zip(m[r], m[c])]
    return np.array([float(m[i][p + 1] / m[i][i]) for i in range(p + 1)])


def test_five_point_against_exact_oracle():
    xt = np.array([0.1, 0.2, 0.4, 0.7, 0.9])
    y = np.array([1.0, 2.0, 2.0, 3.0, 5.0])
    fit = local_poly_fit(y, xt, np.ones(5, bool), 1.0, 1, Kernel.TRIANGULAR)
    np.testing.assert_allclose(fit.beta_scaled, _oracle_beta(y, xt, np.ones(5), 1.0, 1, Kernel.TRIANGULAR),
                               rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 3), k=st.sampled_from(KERNELS),
       h=st.floats(0.3, 2.0))
def test_random_against_exact_oracle(seed, p, k, h):
    rng = np.random.default_rng(seed)
    xt = rng.uniform(0, 1.2, 40)
    y = rng.normal(size=40) + xt ** 2
    inc = rng.random(40) < 0.9
    try:
        fit = local_poly_fit(y, xt, inc, h, p, k)
    except FitError:
        assume(False)
    np.testing.assert_allclose(fit.beta_scaled, _oracle_beta(y, xt, inc, h, p, k), rtol=1e-8, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))
def test_scale_equivariance(seed, lam):
    rng, xt, inc = _data(seed=seed)
    y = rng.normal(size=xt.size)
    a = local_poly_fit(y, xt, inc, 0.8, 1)
    b = local_poly_fit(lam * y, xt, inc, 0.8, 1)
    np.testing.assert_allclose(b.beta_scaled, lam * a.beta_scaled, rtol=1e-12, atol=1e-14)


def test_scaled_equals_raw_coordinates():
    rng, xt, inc = _data(seed=4)
    y = np.sin(3 * xt) + rng.normal(scale=0.1, size=xt.size)
    h = 0.7
    fit = local_poly_fit(y, xt, inc, h, 2)
    sel = inc & (xt < h)
    w = np.maximum(0, 1 - xt[sel] / h)
    x = np.vander(xt[sel], 3, increasing=True)
    raw = np.linalg.lstsq(x * np.sqrt(w)[:, None], y[sel] * np.sqrt(w), rcond=None)[0]
    np.testing.assert_allclose(fit.beta, raw, rtol=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 2), k=st.sampled_from(KERNELS))
def test_residual_orthogonality_and_weights(seed, p, k):
    rng, xt, inc = _data(seed=seed)
    y = rng.normal(size=xt.size) * 10
    fit = local_poly_fit(y, xt, inc, 0.9, p, k)
    score = fit.design.T @ (fit.weights * fit.residuals)
    scale = np.abs(fit.design).T @ (fit.weights * np.abs(y[fit.used]))
    assert (np.abs(score) <= 1e-8 * scale).all()
    assert (fit.weights > 0).all()
    assert (xt[fit.used] <= 0.9).all() and inc[fit.used].all()
    assert fit.n_eff == fit.used.size
    np.testing.assert_allclose(fit.gamma, fit.gamma.T, atol=1e-15)
    assert (np.linalg.eigvalsh(fit.gamma) >= -1e-14).all()


def test_zero_distance_full_weight():
    xt = np.array([0.0, 0.0, 0.2, 0.5, 0.8])
    fit = local_poly_fit(np.arange(5.0), xt, np.ones(5, bool), 1.0, 1)
    assert fit.weights[0] == 1.0


def test_failures():
    xt = np.array([0.1, 0.2, 2.0])
    with pytest.raises(FitError, match="n_eff=2"):
        local_poly_fit(np.ones(3), xt, np.ones(3, bool), 1.0, 1)
    with pytest.raises(FitError, match="singular"):
        local_poly_fit(np.ones(5), np.full(5, 0.3), np.ones(5, bool), 1.0, 1)
    with pytest.raises(ValueError):
        local_poly_fit(np.ones(3), xt, np.ones(3, bool), 0.0, 1)
