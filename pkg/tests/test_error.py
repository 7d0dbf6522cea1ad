import json
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pumrom import components as comp
from pumrom import error as er
from pumrom import fem
from pumrom import rom

from conftest import linear_problem


def test_residual_constant_values():
    C = np.sqrt(2) / 0.01
    assert er.residual_constant(C) == pytest.approx(np.sqrt(C + C * C + 1), rel=1e-15)
    assert float(er.residual_constant(C)) == pytest.approx(141.92399, abs=1e-5)
    # small C hits the floor of 2
    assert er.residual_constant(0.5) == pytest.approx(np.sqrt(2))


def test_delta_and_global_bound():
    assert er.delta_indicator([3.0, 4.0]) == 5.0
    assert er.global_residual_bound([3.0, 4.0], [0.0, 0.0], M=4) == pytest.approx(
        2 * np.sqrt(2) * 5)
    assert er.global_residual_bound([3.0, 4.0], [0.0], M=4, scale=0.5) == pytest.approx(
        np.sqrt(2) * 5)


@given(r=st.lists(st.floats(1e-8, 1e-3), min_size=1, max_size=6),
       beta=st.floats(0.1, 10), c_h=st.floats(0.5, 5), L=st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_brr_estimator_formula(r, beta, c_h, L):
    res = er.brr_estimator(r, [1.0], 4, beta, c_h, L)
    R = er.global_residual_bound(r, [1.0], 4)
    assert res.tau == pytest.approx(2 * L * c_h / beta ** 2 * R, rel=1e-13)
    if res.valid:
        # 1 - sqrt(1 - tau) = -expm1(log1p(-tau) / 2), free of cancellation
        direct = beta / (L * c_h) * -np.expm1(0.5 * np.log1p(-res.tau))
        assert res.delta == pytest.approx(direct, rel=1e-10)
        # first-order term R / beta, and the bound sits between R/beta and 2R/beta
        assert R / beta * (1 - 1e-12) <= res.delta <= 2 * R / beta * (1 + 1e-12)
    else:
        assert res.tau >= 1 and res.delta is None


def test_brr_proximity_failure_and_constants():
    # tau = 1 exactly fails the proximity test
    R = er.global_residual_bound([1.0], [0.0], 1)
    res = er.brr_estimator([1.0], [0.0], 1, beta=1.0, c_h=1.0, L=1 / (2 * R))
    assert res.tau == pytest.approx(1.0) and not res.valid
    for kw in (dict(beta=0.0, c_h=1, L=1), dict(beta=1, c_h=-1, L=1),
               dict(beta=1, c_h=1, L=0)):
        with pytest.raises(er.NonPositiveConstant):
            er.brr_estimator([1.0], [0.0], 4, **kw)


def test_residuals_vanish_at_hf_solution(nl_system, nl_hf):
    ev = er.LocalResidualEvaluator.for_system(nl_system)
    r = ev.residuals(nl_hf)
    z = ev.residuals(np.zeros(nl_system.disc.ndof))
    assert r.max() <= 1e-8 * z.max()


def test_local_riesz_matches_dual_norm(nl_system):
    ev = er.LocalResidualEvaluator.for_system(nl_system)
    u = nl_system.reconstruct(0.05 * np.random.default_rng(0).standard_normal(nl_system.N))
    rh = ev.hf_residual(u)
    r = ev.residuals(u)
    for i, cm in enumerate(nl_system.maps):
        m = cm.arche.interior_mask
        G = cm.arche.gram.toarray()[np.ix_(m, m)]
        assert r[i] == pytest.approx(fem.dual_norm(rh[ev.local_idx[i]], G), rel=1e-10)
        assert er.local_riesz_residual(ev, i, u) == pytest.approx(r[i], rel=1e-14)


def test_global_residual_bound_holds(nl_system):
    ev = er.LocalResidualEvaluator.for_system(nl_system)
    rng = np.random.default_rng(1)
    for _ in range(3):
        u = nl_system.reconstruct(0.05 * rng.standard_normal(nl_system.N))
        r = ev.residuals(u)
        glob = er.global_dual_residual(nl_system.problem, nl_system.disc, u)
        assert glob <= er.global_residual_bound(r, nl_system.pou.C, nl_system.pou.M)
        assert glob > 0


def test_residual_homogeneity_linear(fast_mesh):
    prob, _ = linear_problem(fast_mesh, load=False)
    disc = comp.global_discretization(prob.cfg)
    maps = comp.component_maps(prob.cfg, disc)
    ev = er.LocalResidualEvaluator(prob, disc, maps)
    u = np.random.default_rng(2).standard_normal(disc.ndof)
    u[disc.dirichlet_mask] = 0
    assert np.allclose(ev.residuals(-2.5 * u), 2.5 * ev.residuals(u), rtol=1e-12)


def test_energy_norm_residuals(fast_mesh):
    prob, model = linear_problem(fast_mesh)
    disc = comp.global_discretization(prob.cfg)
    ev = er.LocalResidualEvaluator(prob, disc, comp.component_maps(prob.cfg, disc), "energy")
    u = rom.solve_hf(prob, disc)
    assert ev.residuals(u).max() < 1e-9 * ev.residuals(np.zeros(disc.ndof)).max()
    with pytest.raises(ValueError):
        er.LocalResidualEvaluator(prob, disc, ev.maps, "l7").residuals(u)


def test_beta_app_identity_operator(nl_system, nl_hf):
    K = nl_system.disc.stiffness_matrix
    assert er.beta_app(nl_system, nl_hf, operator=K) == pytest.approx(1.0, rel=1e-8)


def test_beta_app_full_space_oracle(nl_system, nl_hf):
    disc = nl_system.disc
    free = np.flatnonzero(~disc.dirichlet_mask)
    B = sp.csr_matrix((np.ones(len(free)), (free, np.arange(len(free)))),
                      shape=(disc.ndof, len(free)))
    fake = SimpleNamespace(B=B, hf=nl_system.hf, disc=disc)
    beta = er.beta_app(fake, nl_hf)
    # oracle: smallest eigenvalue of A^T K^{-1} A against K
    J = nl_system.hf.jacobian(nl_hf.values).toarray()[np.ix_(free, free)]
    K = disc.stiffness_matrix.toarray()[np.ix_(free, free)]
    lam = sla.eigh(J.T @ np.linalg.solve(K, J), K, eigvals_only=True, subset_by_index=[0, 0])
    assert beta == pytest.approx(np.sqrt(lam[0]), rel=1e-8)
    assert er.beta_app(fake, nl_hf) == beta


def test_beta_app_rank_deficient(nl_system, nl_hf):
    B = sp.hstack([nl_system.B[:, :1], nl_system.B[:, :1]]).tocsr()
    fake = SimpleNamespace(B=B, hf=nl_system.hf, disc=nl_system.disc)
    with pytest.raises(er.RankDeficientEnrichment):
        er.beta_app(fake, nl_hf)


def test_c_h_single_direction(nl_system, nl_hf):
    disc = nl_system.disc
    u = nl_hf.values
    B = u[:, None]
    expect = er.w1p_seminorm(disc, u) / np.sqrt(u @ disc.stiffness_matrix @ u)
    assert er.estimate_c_h(disc, B) == pytest.approx(expect, rel=1e-10)
    # a richer space can only increase the supremum
    big = er.estimate_c_h(disc, np.hstack([B, nl_system.B[:, :8].toarray()]))
    assert big >= expect * (1 - 1e-10)


def test_lipschitz_positive(nl_system, nl_hf):
    L = er.estimate_lipschitz(nl_system, nl_hf, samples=2)
    assert np.isfinite(L) and L > 0


def test_error_report(nl_system, nl_hf):
    ev = er.LocalResidualEvaluator.for_system(nl_system)
    rep = er.error_report(ev, nl_system.reconstruct(np.zeros(nl_system.N)), nl_system.pou,
                          dict(beta=1.0, c_h=1.0, L=1.0))
    d = json.loads(rep.to_json())
    assert d["M"] == 4 and len(d["residuals"]) == nl_system.cfg.N
    assert d["bound"] == pytest.approx(2 * d["Cr"] * d["delta"])
    assert set(d["brr"]) >= {"tau", "delta", "valid"}
