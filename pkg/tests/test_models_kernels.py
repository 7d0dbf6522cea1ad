import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pumrom import fem, kernels, models


def kappa_ref(u, mu1, mu2):
    return (36 / mu2) * (u * (1 - u) / (u ** 3 + (12 / mu2) * (1 - u) ** 3)) ** 2 + mu1


def test_kappa_values(backend):
    u = np.linspace(0, 1, 11)
    val, dval = models.kappa(u, 0.15, 35.0, backend)
    assert np.allclose(val, kappa_ref(u, 0.15, 35.0), rtol=1e-14)
    h = 1e-6
    fd = (kappa_ref(u + h, 0.15, 35.0) - kappa_ref(u - h, 0.15, 35.0)) / (2 * h)
    assert np.allclose(dval, fd, rtol=1e-7, atol=1e-7)


def test_kappa_endpoints():
    # u = 0 and u = 1 make the fraction vanish
    assert models.kappa(0.0, 0.12, 31.0)[0] == pytest.approx(0.12, abs=1e-15)
    assert models.kappa(1.0, 0.12, 31.0)[0] == pytest.approx(0.12, abs=1e-15)


@given(st.floats(0, 1), st.floats(0.1, 0.2), st.floats(30, 40))
@settings(max_examples=200, deadline=None)
def test_kappa_bounded_below(u, mu1, mu2):
    assert models.kappa(u, mu1, mu2)[0] >= mu1


def test_kappa_denominator_underflow():
    # with mu2 = -12 the denominator u^3 - (1-u)^3 vanishes at u = 1/2
    with pytest.raises(models.DenominatorUnderflow):
        models.kappa(0.5, 0.1, -12.0)


def test_source_peak_and_mask():
    grid = models.SubdomainGrid(3)
    c = grid.centroid(4)
    assert np.allclose(c, [0.15, 0.15])
    assert models.source(c, 5, grid)[0] == pytest.approx(100.0)
    # inside, 0.04 from the centroid: 100 exp(-50 * 0.0016)
    assert models.source(c + [0.04, 0.0], 5, grid)[0] == pytest.approx(100 * np.exp(-0.08))
    # outside the active subdomain the source vanishes
    assert models.source(c + [0.06, 0.0], 5, grid)[0] == 0.0
    assert np.all(models.source(np.random.default_rng(0).random((20, 2)) * 0.3, 0, grid) == 0)


def test_kernel_backends_agree():
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    d = fem.build_discretization(((0, 1), (0, 1)), (5, 5), 3)
    rng = np.random.default_rng(0)
    for nonlinear in (True, False):
        c = models.Coefficients.zeros(d.nelem, d.ref.Q, nonlinear)
        c.mu1[:] = rng.uniform(0.1, 0.2, d.nelem)
        c.mu2[:] = rng.uniform(30, 40, d.nelem)
        for name in ("diffusion", "advection_x", "advection_y", "reaction", "source"):
            setattr(c, name, rng.random((d.nelem, d.ref.Q)))
        ue = rng.random(d.ndof)[d.elem_dofs]
        a = kernels.element_kernel(ue, d.ref, d.hx, d.hy, c, True, "compiled")
        b = kernels.element_kernel(ue, d.ref, d.hx, d.hy, c, True, "python")
        for x, y in zip(a, b):
            assert np.allclose(x, y, rtol=1e-12, atol=1e-13)


def test_adr_weak_form_matches_integrand():
    # assembled form vs direct quadrature of the documented integrand
    d = fem.build_discretization(((0, 0.3), (0, 0.3)), (3, 3), 2)
    mu = (0.5, 0.3, -0.7, 0.4)
    model = models.LinearADRModel()
    A = fem.Problem(d, model.coefficients(d, mu)).jacobian(np.zeros(d.ndof))
    rng = np.random.default_rng(1)
    w, v = rng.random(d.ndof), rng.random(d.ndof)
    wq, wx, wy = d.at_quad(w)
    vq, vx, vy = d.at_quad(v)
    xq = d.quad_points
    ref = d.integrate(mu[0] * models.adr_kappa(xq) * (wx * vx + wy * vy)
                      - (mu[1] * wx + mu[2] * wy) * vq + mu[3] * wq * vq)
    assert np.isclose(v @ (A @ w), ref, rtol=1e-12)
    # pointwise integrand at one point
    x = np.array([0.1, 0.2])
    val = model.integrand(2.0, np.array([1.0, -1.0]), 3.0, np.array([0.5, 2.0]), x, mu)
    k = 1 / (1 + 0.05)
    assert np.isclose(val, 0.5 * k * (0.5 - 2.0) - (0.3 + 0.7) * 3.0 + 0.4 * 6.0)


def test_adr_rotation_pullback():
    d = fem.build_discretization(((0, 1), (0, 1)), (1, 1), 1)
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    c = models.LinearADRModel().coefficients(d, (0.5, 1.0, 0.0, 0.0), rotation=R)
    # b = (1, 0) seen in the rotated frame is R^T b = (0, -1)
    assert np.allclose(c.advection_x, 0.0) and np.allclose(c.advection_y, -1.0)


def test_kappa_midpoint_exact_rational():
    from fractions import Fraction as F
    u, mu1, mu2 = F(1, 2), F(1, 10), F(30)
    ref = F(36) / mu2 * (u * (1 - u) / (u ** 3 + F(12) / mu2 * (1 - u) ** 3)) ** 2 + mu1
    assert models.kappa(0.5, 0.1, 30.0)[0] == pytest.approx(float(ref), rel=1e-15)
    assert float(ref) == pytest.approx(2.548979, abs=1e-6)


def test_kappa_derivative_random_states():
    rng = np.random.default_rng(7)
    u = rng.uniform(0.05, 0.95, 100)
    mu1, mu2 = rng.uniform(0.1, 0.2, 100), rng.uniform(30, 40, 100)
    _, d = models.kappa(u, mu1, mu2)
    h = 1e-6
    fd = (kappa_ref(u + h, mu1, mu2) - kappa_ref(u - h, mu1, mu2)) / (2 * h)
    assert np.all(np.abs(d - fd) <= 1e-8 * np.maximum(np.abs(fd), 1.0))


def test_kappa_bounds_bulk():
    rng = np.random.default_rng(8)
    u = rng.random(10 ** 5)
    mu1, mu2 = rng.uniform(0.1, 0.2, 10 ** 5), rng.uniform(30, 40, 10 ** 5)
    v, _ = models.kappa(u, mu1, mu2)
    assert np.all(np.isfinite(v)) and np.all(v >= mu1)


def test_symmetric_adr_stiffness():
    d = fem.build_discretization(((0, 0.3), (0, 0.3)), (4, 4), 3)
    A = fem.Problem(d, models.LinearADRModel().coefficients(d, (0.7, 0.0, 0.0, 0.5))) \
        .jacobian(np.zeros(d.ndof))
    assert abs(A - A.T).max() <= 1e-13 * abs(A).max()
    A2 = fem.Problem(d, models.LinearADRModel().coefficients(d, (0.7, 0.5, 0.0, 0.5))) \
        .jacobian(np.zeros(d.ndof))
    assert abs(A2 - A2.T).max() > 1e-6


def test_constant_state_gives_zero_integrand():
    model = models.LinearADRModel()
    x = np.array([0.1, 0.1])
    assert model.integrand(3.0, np.zeros(2), 1.0, np.array([1.0, 2.0]), x, (1, 0, 0, 0)) == 0.0
