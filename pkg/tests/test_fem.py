import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pumrom import fem, models


def test_gll_nodes_closed_form():
    # interior nodes are roots of P_p'; closed forms for p = 3, 4
    assert np.allclose(fem.gll_nodes(3), [-1, -1 / np.sqrt(5), 1 / np.sqrt(5), 1], atol=1e-15)
    assert np.allclose(fem.gll_nodes(4), [-1, -np.sqrt(3 / 7), 0, np.sqrt(3 / 7), 1],
                       atol=1e-15)


def test_lagrange_tables_interpolate_nodes():
    r = fem.gll_nodes(5)
    V, dV = fem.lagrange_tables(r, r)
    assert np.allclose(V, np.eye(6), atol=1e-14)
    # derivative of x^3 reproduced exactly
    assert np.allclose(dV @ r ** 3, 3 * r ** 2, atol=1e-12)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_quadrature_exactness(p):
    ref = fem.ReferenceElement(p)
    X, Y = np.meshgrid(ref.qpts1d, ref.qpts1d)
    X, Y = X.ravel(), Y.ravel()
    q = 2 * p + 3
    for a in range(q + 1):
        for b in range(q + 1 - a):
            ex = ((1 - (-1) ** (a + 1)) / (a + 1)) * ((1 - (-1) ** (b + 1)) / (b + 1))
            assert abs(np.sum(ref.wq * X ** a * Y ** b) - ex) <= 1e-13 * max(1, abs(ex))


def test_dof_counts():
    d = fem.build_discretization(((0, 0.1), (0, 0.1)), (10, 10), 3)
    assert d.ndof == 961 and d.nelem == 100
    d1 = fem.build_discretization(((0, 1), (0, 1)), (1, 1), 1)
    assert d1.ndof == 4
    d2 = fem.build_discretization(((0, 0.3), (0, 0.3)), (9, 9), 3)
    assert d2.ndof == 784 and d2.boundary_mask.sum() == 108


def test_degenerate_geometry_rejected():
    with pytest.raises(fem.DegenerateGeometry):
        fem.build_discretization(((0, 0), (0, 1)), (2, 2), 2)


def test_mass_and_stiffness_on_polynomials():
    d = fem.build_discretization(((0, 2), (0, 1)), (3, 2), 3)
    one = np.ones(d.ndof)
    assert np.isclose(one @ d.mass_matrix @ one, 2.0, rtol=1e-13)
    x = d.coords[:, 0]
    # |grad x|^2 integrated = area
    assert np.isclose(x @ d.stiffness_matrix @ x, 2.0, rtol=1e-13)
    assert abs(one @ d.stiffness_matrix @ one) < 1e-12


def test_subdomain_breaks_align_with_overlap():
    b = fem.subdomain_breaks(0.0, 0.1, 2, 10, 0.01)
    for t in (0.005, 0.095, 0.105, 0.195):
        assert np.min(np.abs(b - t)) < 1e-15
    assert np.all(np.diff(b) > 0)


def _nonlinear_problem(backend=None):
    d = fem.build_discretization(((0, 1), (0, 1)), (4, 4), 3)
    rng = np.random.default_rng(3)
    c = models.Coefficients.zeros(d.nelem, d.ref.Q, nonlinear=True)
    c.mu1[:] = rng.uniform(0.1, 0.2, d.nelem)
    c.mu2[:] = rng.uniform(30, 40, d.nelem)
    c.source[:] = 10 * rng.random((d.nelem, d.ref.Q))
    return fem.Problem(d, c, backend)


def test_hf_jacobian_finite_differences(backend):
    prob = _nonlinear_problem(backend)
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = 0.8 * rng.random(prob.disc.ndof)
        J = prob.jacobian(u).toarray()
        h = 1e-6
        V = rng.standard_normal((prob.disc.ndof, 4))
        FD = np.column_stack([(prob.residual(u + h * v) - prob.residual(u - h * v)) / (2 * h)
                              for v in V.T])
        assert np.linalg.norm(FD - J @ V) <= 1e-6 * np.linalg.norm(FD)


def test_dirichlet_imposition_exact():
    prob = _nonlinear_problem()
    d = prob.disc
    g = 0.3 * np.sin(3 * d.coords[:, 0]) ** 2
    u = fem.solve_nonlinear(prob, g, init=fem.harmonic_lifting(d, g))
    assert np.array_equal(u.values[d.dirichlet_mask], g[d.dirichlet_mask])
    r = prob.residual(u.values)[~d.dirichlet_mask]
    assert np.linalg.norm(r) < 1e-9


def test_newton_nonconvergence_carries_trace():
    prob = _nonlinear_problem()
    with pytest.raises(fem.NonConvergence) as ei:
        fem.solve_nonlinear(prob, None, fem.NewtonSettings(max_iter=1, rel_tol=1e-14,
                                                          abs_tol=1e-300),
                            context={"tag": 1})
    assert ei.value.history and ei.value.context.get("tag") == 1


def test_newton_settings_validation():
    with pytest.raises(ValueError):
        fem.NewtonSettings(rel_tol=0)
    with pytest.raises(ValueError):
        fem.NewtonSettings(max_iter=0)


def test_dual_norm_identity_gram():
    f = np.array([1.0, -2.0, 2.0])
    assert np.isclose(fem.dual_norm(f, np.eye(3)), 3.0, rtol=1e-15)
    assert fem.dual_norm(np.zeros(3), np.eye(3)) == 0.0


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_dual_norm_matches_sup(seed):
    # sup_v f(v)/|v|_G is attained at v = G^{-1} f
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    G = A @ A.T + 6 * np.eye(6)
    f = rng.standard_normal(6)
    v = np.linalg.solve(G, f)
    assert np.isclose(fem.dual_norm(f, G), (f @ v) / np.sqrt(v @ G @ v), rtol=1e-12)
    # masked version equals the dual norm of the sub-block
    m = np.array([1, 0, 1, 1, 0, 1], bool)
    assert np.isclose(fem.dual_norm(f, sp.csr_matrix(G), m),
                      fem.dual_norm(f[m], G[np.ix_(m, m)]), rtol=1e-12)


def test_dual_norm_indefinite_gram():
    with pytest.raises(fem.IndefiniteGram):
        fem.dual_norm(np.ones(2), np.diag([1.0, -1.0]))


def test_weighted_gram():
    d = fem.build_discretization(((0, 1), (0, 1)), (2, 2), 2)
    w = d.coords[:, 0]
    G = fem.assemble_weighted_h1_gram(d, w)
    v = np.ones(d.ndof)
    # |x|_{H1}^2 on the unit square = 1/3 + 1
    assert np.isclose(v @ G @ v, 1 / 3 + 1, rtol=1e-13)
    with pytest.raises(ValueError):
        fem.assemble_weighted_h1_gram(d, -w)


def test_evaluate_interpolates_polynomials():
    d = fem.build_discretization(((0, 1), (0, 2)), (3, 3), 3)
    u = d.coords[:, 0] ** 3 - 2 * d.coords[:, 0] * d.coords[:, 1] ** 2
    pts = np.array([[0.13, 0.7], [0.91, 1.95], [0.5, 0.01]])
    val, grad = d.evaluate(u, pts, grad=True)
    x, y = pts.T
    assert np.allclose(val, x ** 3 - 2 * x * y ** 2, atol=1e-12)
    assert np.allclose(grad[:, 0], 3 * x ** 2 - 2 * y ** 2, atol=1e-11)
    assert np.allclose(grad[:, 1], -4 * x * y, atol=1e-11)
