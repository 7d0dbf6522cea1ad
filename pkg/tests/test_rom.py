import numpy as np
import pytest

from pumrom import components as comp
from pumrom import rom
from pumrom import training as tr

from conftest import linear_bases, linear_problem


def _system(problem, bases):
    disc = comp.global_discretization(problem.cfg)
    return rom.assemble_rom(problem, comp.build_pou(problem.cfg, disc), bases, disc=disc)


def test_sizes_and_neighbors(fast_mesh):
    prob, model = linear_problem(fast_mesh)
    sys = _system(prob, linear_bases(fast_mesh, model, 3, np.random.default_rng(0)))
    assert sys.N == 12 and all(len(nb) == 4 for nb in sys.neighbors)
    assert list(sys.offsets) == [0, 3, 6, 9, 12]


def test_empty_or_missing_basis(fast_mesh):
    prob, model = linear_problem(fast_mesh)
    bases = linear_bases(fast_mesh, model, 2, np.random.default_rng(0))
    bad = dict(bases, co=np.zeros((comp.archetype("co", fast_mesh).disc.ndof, 0)))
    with pytest.raises(rom.DimensionMismatch):
        _system(prob, bad)
    with pytest.raises(rom.DimensionMismatch):
        _system(prob, dict(bases, co=np.ones((3, 2))))
    sys = _system(prob, bases)
    with pytest.raises(rom.DimensionMismatch):
        sys.reconstruct(np.zeros(sys.N + 1))


def test_component_assembly_matches_global(nl_system):
    rng = np.random.default_rng(2)
    for _ in range(3):
        u = 0.05 * rng.standard_normal(nl_system.N)
        R, J = nl_system.residual_and_jacobian(u)
        Rg = nl_system.residual_global(u)
        Jg = nl_system.jacobian_global(u)
        assert np.linalg.norm(R - Rg) <= 1e-12 * max(1.0, np.linalg.norm(Rg))
        assert abs(J - Jg).max() <= 1e-12 * max(1.0, abs(Jg).max())
        assert np.allclose(nl_system.residual(u), R, rtol=0, atol=1e-14 * np.abs(R).max())


def test_reduced_jacobian_finite_difference(nl_system):
    rng = np.random.default_rng(3)
    u = 0.05 * rng.standard_normal(nl_system.N)
    J = nl_system.jacobian(u)
    v = rng.standard_normal(nl_system.N)
    h = 1e-6
    fd = (nl_system.residual(u + h * v) - nl_system.residual(u - h * v)) / (2 * h)
    assert np.linalg.norm(fd - J @ v) <= 1e-6 * np.linalg.norm(fd)


def test_jacobian_sparsity_bound(nl_system):
    J = nl_system.jacobian(np.zeros(nl_system.N))
    assert J.nnz <= nl_system.jacobian_nnz_bound() < nl_system.N ** 2 + 1


def test_linear_jacobian_state_independent(fast_mesh):
    prob, model = linear_problem(fast_mesh)
    sys = _system(prob, linear_bases(fast_mesh, model, 3, np.random.default_rng(0)))
    rng = np.random.default_rng(1)
    J0 = sys.jacobian(np.zeros(sys.N)).toarray()
    J1 = sys.jacobian(rng.standard_normal(sys.N)).toarray()
    assert np.allclose(J0, J1, rtol=0, atol=1e-13 * np.abs(J0).max())


def test_reconstruct_linear_and_unit(nl_system):
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, nl_system.N))
    r = nl_system.reconstruct
    assert np.allclose(r(2 * a - b).values, 2 * r(a).values - r(b).values, atol=1e-13)
    # a unit coefficient gives phi_i times the mapped mode
    e = np.zeros(nl_system.N)
    e[nl_system.offsets[4] + 1] = 1.0
    cm = nl_system.maps[4]
    expect = np.zeros(nl_system.disc.ndof)
    expect[cm.gather] = cm.arche.phi * nl_system.bases[cm.label][:, 1]
    assert np.allclose(r(e).values, expect, atol=1e-15)


def test_project_round_trip(nl_system):
    a = np.random.default_rng(5).standard_normal(nl_system.N)
    assert np.allclose(nl_system.project(nl_system.reconstruct(a).values), a, atol=1e-8)


def test_zero_load_gives_zero(fast_mesh):
    prob, model = linear_problem(fast_mesh, load=False)
    bases = linear_bases(fast_mesh, linear_problem(fast_mesh)[1], 3, np.random.default_rng(0))
    st = rom.solve_rom(_system(prob, bases))
    assert np.all(st.coefficients == 0) and st.iterations == 0


def test_linear_converges_in_one_step(fast_mesh):
    prob, model = linear_problem(fast_mesh)
    sys = _system(prob, linear_bases(fast_mesh, model, 3, np.random.default_rng(0)))
    st = rom.solve_rom(sys)
    assert st.iterations == 1
    assert np.linalg.norm(sys.residual(st.coefficients)) <= 1e-10 * st.history[0]


def _exact_bases(sys, u):
    out = {}
    for lab in set(sys.cfg.labels):
        arc = comp.archetype(lab, sys.cfg.mesh)
        cols = np.column_stack([u[cm.gather] for cm in sys.maps if cm.label == lab])
        out[lab] = tr.orthonormalize(cols, arc.disc.h1_gram, tol=1e-8)
    return out


@pytest.mark.parametrize("kind", ["linear", "nonlinear"])
def test_space_containing_solution_reproduces_it(kind, fast_mesh, nl_system, nl_hf):
    if kind == "linear":
        prob, model = linear_problem(fast_mesh, n_dd=3)
        disc = comp.global_discretization(prob.cfg)
        u = rom.solve_hf(prob, disc).values
    else:
        prob, disc, u = nl_system.problem, nl_system.disc, nl_hf.values
    sys0 = rom.assemble_rom(prob, comp.build_pou(prob.cfg, disc),
                            {lab: np.ones((comp.archetype(lab, fast_mesh).disc.ndof, 1))
                             for lab in comp.LABELS}, disc=disc)
    sys = rom.assemble_rom(prob, sys0.pou, _exact_bases(sys0, u), disc=disc)
    st = rom.solve_rom(sys)
    err = sys.reconstruct(st).values - u
    K = disc.h1_gram
    assert np.sqrt(err @ K @ err) <= 1e-8 * np.sqrt(u @ K @ u)
