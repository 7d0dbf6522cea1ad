import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pumrom import components as comp
from pumrom import fem


@pytest.mark.parametrize("n, counts", [(2, (0, 4, 0)), (4, (4, 4, 8)), (10, (64, 4, 32))])
def test_label_counts(n, counts):
    cfg = comp.instantiate_configuration(n, np.tile([0.15, 35], (n * n, 1)))
    c = cfg.counts()
    assert (c["int"], c["co"], c["ed"]) == counts
    # counting formula: 4 corners, 4(n-2) edges, (n-2)^2 internal
    assert c["ed"] == 4 * (n - 2) and c["int"] == (n - 2) ** 2


def test_bad_configuration():
    with pytest.raises(ValueError):
        comp.instantiate_configuration(1, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        comp.instantiate_configuration(2, np.zeros((3, 2)))


def test_configuration_json_roundtrip(fast_mesh):
    cfg = comp.instantiate_configuration(3, np.random.default_rng(0).random((9, 2)), 4,
                                         fast_mesh, seed=11)
    back = comp.GlobalConfiguration.from_json(cfg.to_json())
    assert np.array_equal(back.mu, cfg.mu) and back.i_star == 4 and back.mesh == fast_mesh
    assert json.loads(cfg.to_json())["seed"] == 11


def test_rotations_are_orthogonal():
    for k in range(4):
        R = comp.rotation(k)
        assert np.allclose(R @ R.T, np.eye(2), atol=1e-15) and np.isclose(np.linalg.det(R), 1)


def test_walls_map_to_global_boundary(fast_mesh):
    cfg = comp.instantiate_configuration(4, np.tile([0.15, 35], (16, 1)), 0, fast_mesh)
    L = 4 * fast_mesh.H
    for i in range(cfg.N):
        arc = comp.archetype(cfg.labels[i], fast_mesh)
        X = cfg.to_physical(i)(arc.disc.coords[arc.wall_mask])
        on = (np.isclose(X[:, 0], 0) | np.isclose(X[:, 0], L)
              | np.isclose(X[:, 1], 0) | np.isclose(X[:, 1], L))
        assert np.all(on)
        # round trip of the map
        Y = arc.disc.coords[:5]
        assert np.allclose(cfg.to_reference(i)(cfg.to_physical(i)(Y)), Y, atol=1e-15)


def test_neighbor_counts():
    cfg = comp.instantiate_configuration(10, np.tile([0.15, 35], (100, 1)))
    sizes = [len(cfg.neighbors(i)) for i in range(cfg.N)]
    assert max(sizes) == 9 and sizes[0] == 4 and sizes[1] == 6
    cfg2 = comp.instantiate_configuration(2, np.tile([0.15, 35], (4, 1)))
    assert all(len(cfg2.neighbors(i)) == 4 for i in range(4))


@pytest.fixture(scope="module")
def pou3(fast_mesh):
    cfg = comp.instantiate_configuration(3, np.tile([0.15, 35], (9, 1)), 0, fast_mesh)
    disc = comp.global_discretization(cfg)
    return cfg, disc, comp.build_pou(cfg, disc)


def test_pou_invariants(pou3, fast_mesh):
    cfg, disc, pou = pou3
    assert np.max(np.abs(pou.values.sum(0) - 1)) <= 1e-13
    assert pou.values.min() >= 0 and pou.values.max() <= 1
    assert comp.overlap_count(pou) == 4 == pou.M
    g = comp.pou_gradient_max(pou, disc)
    assert np.allclose(g, np.sqrt(2) / fast_mesh.delta, rtol=0.02)
    assert np.allclose(pou.C, np.sqrt(2) / fast_mesh.delta)


def test_pou_point_values(pou3, fast_mesh):
    cfg, disc, pou = pou3
    H = fast_mesh.H
    i_mid = disc.node_index(np.array([[H, H / 2]]))[0]
    assert np.isclose(pou.values[0, i_mid], 0.5) and np.isclose(pou.values[1, i_mid], 0.5)
    i_c = disc.node_index(np.array([[H, H]]))[0]
    assert np.allclose(pou.values[[0, 1, 3, 4], i_c], 0.25)
    i_in = disc.node_index(np.array([[1.5 * H, 1.5 * H]]))[0]
    assert pou.values[4, i_in] == 1.0 and pou.values[:, i_in].sum() == 1.0


def test_pou_support(pou3, fast_mesh):
    cfg, disc, pou = pou3
    H, d = fast_mesh.H, fast_mesh.delta
    X = disc.coords
    for i in range(cfg.N):
        ix, iy = i % 3, i // 3
        out = ((X[:, 0] < ix * H - d / 2 - 1e-14) | (X[:, 0] > (ix + 1) * H + d / 2 + 1e-14)
               | (X[:, 1] < iy * H - d / 2 - 1e-14) | (X[:, 1] > (iy + 1) * H + d / 2 + 1e-14))
        assert np.all(pou.values[i, out] == 0)


def test_mesh_not_conforming(fast_mesh):
    cfg = comp.instantiate_configuration(2, np.tile([0.15, 35], (4, 1)), 0, fast_mesh)
    disc = fem.build_discretization(((0, 0.2), (0, 0.2)), (3, 3), 2)
    with pytest.raises(comp.MeshNotConforming):
        comp.build_pou(cfg, disc)


def test_reference_phi_matches_global(pou3):
    cfg, disc, pou = pou3
    for cm in comp.component_maps(cfg, disc):
        assert np.allclose(pou.values[cm.index, cm.gather], cm.arche.phi, atol=1e-15)


def _phi_norm_sq(H, d, sides):
    """||phi_hat||_{H^1}^2 from the 1-d factors: A = int f^2, B = int f'^2."""
    A = H - d / 3 if sides == 2 else H - d / 6
    B = 2 / d if sides == 2 else 1 / d
    return A, B


@pytest.mark.parametrize("label", comp.LABELS)
def test_local_norm_of_one(label, fast_mesh):
    arc = comp.archetype(label, fast_mesh)
    H, d = fast_mesh.H, fast_mesh.delta
    sx = 1 if "left" in arc.walls else 2
    sy = 1 if "bottom" in arc.walls else 2
    Ax, Bx = _phi_norm_sq(H, d, sx)
    Ay, By = _phi_norm_sq(H, d, sy)
    expected = np.sqrt(Ax * Ay + Bx * Ay + Ax * By)
    assert comp.local_norm(arc, np.ones(arc.disc.ndof)) == pytest.approx(expected, rel=1e-12)
    assert comp.local_norm(arc, np.zeros(arc.disc.ndof)) == 0.0
    w = np.where(arc.phi == 0, 1.0, 0.0)
    assert comp.local_norm(arc, w) == 0.0


def test_pum_basis_function_reproduces_pou(pou3):
    cfg, disc, pou = pou3
    maps = comp.component_maps(cfg, disc)
    tot = np.zeros(disc.ndof)
    for i in range(cfg.N):
        f = comp.pum_basis_function(cfg, pou, np.ones(maps[i].arche.disc.ndof), i, disc, maps)
        assert np.allclose(f.values, pou.values[i], atol=1e-15)
        tot += f.values
    assert np.allclose(tot, 1.0, atol=1e-14)


def test_mapped_orthonormality(nl_bases, fast_mesh):
    for lab, b in nl_bases.items():
        arc = comp.archetype(lab, fast_mesh)
        W = arc.phi[:, None] * b.vectors
        assert np.allclose(W.T @ (arc.gram @ W), np.eye(b.n), atol=1e-10)


def test_archetype_dof_counts_full_mesh():
    mesh = comp.MeshSpec()
    expect = {"int": (1369, 8281, 360, 9), "co": (1156, 3721, 121, 4),
              "ed": (1258, 5551, 211, 6)}
    for lab, (nref, npatch, nin, nact) in expect.items():
        arc = comp.archetype(lab, mesh)
        assert (arc.disc.ndof, arc.patch.ndof, int(arc.gamma_in.sum()), arc.n_active) == \
            (nref, npatch, nin, nact)
        # reference domain inside the patch, inflow on the patch boundary
        assert np.all(arc.restrict >= 0)
        assert np.all(arc.patch.boundary_mask[arc.gamma_in])
        s = arc.s[arc.gamma_in]
        # the internal loop is closed, so its endpoint is the start corner
        assert s.min() == 0.0 and s.max() <= 1.0
        assert (s.max() == 1.0) == (lab != "int")


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=6, deadline=None)
def test_pum_approximation_bound(nl_system, nl_bases, seed):
    rng = np.random.default_rng(seed)
    sys = nl_system
    u = comp.random_sine_field(sys.disc, rng, decay=rng.uniform(0.5, 2.0))
    z = comp.best_local_approximations(sys.maps, u, nl_bases)
    l2, l2b, h1, h1b = comp.pum_approximation_bounds(sys.pou, sys.disc, sys.maps, u, z)
    assert l2 <= l2b + 1e-10 and h1 <= h1b + 1e-10
