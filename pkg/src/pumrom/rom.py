"""Component-based Galerkin ROM on the partition-of-unity space.

The reduced space is spanned by ``phi_j (zeta^{L_j}_i o Phi_j^{-1})`` for
every component ``j`` and every mode ``i`` of its archetype basis, all
nodally interpolated into the global spectral-element space.  Coefficients
are ordered component-major: mode ``i`` of component ``j`` sits at
``offsets[j] + i``.
"""
from dataclasses import dataclass, field
import logging
import time

import numpy as np
import scipy.sparse as sp

from . import components as comp
from . import fem
from . import models

log = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    pass


class GlobalProblem:
    """A configuration together with the PDE model and its parameters.

    For the nonlinear diffusion model the parameters live in the
    configuration (per-subdomain ``mu`` and ``i_star``); linear models take
    their parameter vector from ``params``.
    """

    def __init__(self, cfg, model=None, params=None):
        self.cfg = cfg
        self.model = model or models.NonlinearDiffusionModel(cfg.grid)
        self.params = params

    @property
    def nonlinear(self):
        return self.model.nonlinear

    def coefficients(self, disc, to_physical=None, rot=None):
        tp = to_physical or models._identity
        if self.nonlinear:
            return self.model.coefficients(disc, self.cfg.mu, self.cfg.i_star, tp,
                                           grid=self.cfg.grid)
        return self.model.coefficients(disc, self.params, tp, rot)

    def hf_problem(self, disc, backend=None):
        return fem.Problem(disc, self.coefficients(disc), backend)

    def component_problem(self, cm, backend=None):
        return fem.Problem(cm.arche.disc, self.coefficients(cm.arche.disc, cm.to_physical,
                                                            cm.rot_matrix), backend)


def solve_hf(problem, disc=None, settings=None, init=None):
    """Global high-fidelity solve with homogeneous Dirichlet data."""
    disc = disc or comp.global_discretization(problem.cfg)
    return fem.solve_nonlinear(problem.hf_problem(disc), None, settings, init)


@dataclass
class ReducedState:
    coefficients: np.ndarray
    history: list = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0

    def report(self):
        return {"iterations": self.iterations, "residual_norms": list(map(float, self.history)),
                "wall_time": self.wall_time, "size": int(len(self.coefficients))}


class GlobalROMSystem:
    """PUM reduced space for one configuration and its residual evaluators."""

    def __init__(self, problem, pou, bases, disc=None, backend=None):
        cfg = problem.cfg
        self.problem = problem
        self.cfg = cfg
        self.disc = disc or comp.global_discretization(cfg)
        self.pou = pou
        self.backend = backend
        self.maps = comp.component_maps(cfg, self.disc)
        self.bases = {}
        for lab in set(cfg.labels):
            if lab not in bases:
                raise DimensionMismatch(f"no basis for archetype {lab!r}")
            b = bases[lab]
            V = np.asarray(getattr(b, "vectors", b), float)
            if V.ndim != 2 or V.shape[1] == 0:
                raise DimensionMismatch(f"empty basis for archetype {lab!r}")
            if V.shape[0] != comp.archetype(lab, cfg.mesh).disc.ndof:
                raise DimensionMismatch(f"basis for {lab!r} has wrong row count")
            self.bases[lab] = V
        self.sizes = np.array([self.bases[lab].shape[1] for lab in cfg.labels])
        self.offsets = np.concatenate(([0], np.cumsum(self.sizes)))
        self.N = int(self.offsets[-1])
        self.neighbors = [cfg.neighbors(i) for i in range(cfg.N)]
        self._build_basis_matrix()
        self._problems = None

    def block(self, i):
        return slice(self.offsets[i], self.offsets[i + 1])

    def _build_basis_matrix(self):
        rows, cols, vals = [], [], []
        self.test_blocks = []
        for i, cm in enumerate(self.maps):
            V = self.bases[cm.label]
            W = cm.arche.phi[:, None] * V           # nodal values of phi_hat * zeta
            self.test_blocks.append(W)
            r, c = np.nonzero(W)
            rows.append(cm.gather[r])
            cols.append(self.offsets[i] + c)
            vals.append(W[r, c])
        self.B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(self.disc.ndof, self.N))
        # per component: global basis restricted to its reference nodes,
        # dense on the neighbour columns
        self.local_cols, self.local_B = [], []
        for i, cm in enumerate(self.maps):
            colset = np.concatenate([np.arange(self.offsets[k], self.offsets[k + 1])
                                     for k in self.neighbors[i]])
            self.local_cols.append(colset)
            self.local_B.append(self.B[cm.gather][:, colset].toarray())

    @property
    def problems(self):
        if self._problems is None:
            self._problems = [self.problem.component_problem(cm, self.backend) for cm in self.maps]
        return self._problems

    def jacobian_nnz_bound(self):
        return int(sum(self.sizes[i] * sum(self.sizes[k] for k in self.neighbors[i])
                       for i in range(self.cfg.N)))

    # -- evaluation --------------------------------------------------------

    def reconstruct(self, u):
        u = np.asarray(getattr(u, "coefficients", u), float)
        if u.shape != (self.N,):
            raise DimensionMismatch(f"expected {self.N} coefficients")
        return fem.Field(self.disc, self.B @ u)

    def residual(self, u):
        """Reduced residual assembled component by component."""
        uh = self.B @ np.asarray(u, float)
        R = np.empty(self.N)
        for i, cm in enumerate(self.maps):
            w = uh[cm.gather]
            R[self.block(i)] = self.test_blocks[i].T @ self.problems[i].residual(w)
        return R

    def residual_and_jacobian(self, u):
        uh = self.B @ np.asarray(u, float)
        R = np.empty(self.N)
        rows, cols, vals = [], [], []
        for i, cm in enumerate(self.maps):
            w = uh[cm.gather]
            r, J = self.problems[i].residual_and_jacobian(w)
            W = self.test_blocks[i]
            R[self.block(i)] = W.T @ r
            Jb = W.T @ (J @ self.local_B[i])
            ri = np.arange(self.offsets[i], self.offsets[i + 1])
            rows.append(np.repeat(ri, len(self.local_cols[i])))
            cols.append(np.tile(self.local_cols[i], len(ri)))
            vals.append(Jb.ravel())
        Jr = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(self.N, self.N))
        return R, Jr

    def jacobian(self, u):
        return self.residual_and_jacobian(u)[1]

    # -- oracle ------------------------------------------------------------

    @property
    def hf(self):
        if not hasattr(self, "_hf"):
            self._hf = self.problem.hf_problem(self.disc, self.backend)
        return self._hf

    def residual_global(self, u):
        """Oracle: ``B^T r_h(B u)`` by one global assembly."""
        return self.B.T @ self.hf.residual(self.B @ np.asarray(u, float))

    def jacobian_global(self, u):
        J = self.hf.jacobian(self.B @ np.asarray(u, float))
        return (self.B.T @ J @ self.B).tocsr()

    def project(self, field_values, gram=None):
        """Coefficients of the ``gram``-orthogonal projection onto the space."""
        G = self.disc.h1_gram if gram is None else gram
        A = (self.B.T @ G @ self.B).toarray()
        b = self.B.T @ (G @ np.asarray(field_values, float))
        return np.linalg.solve(A, b)


def assemble_rom(cfg_or_problem, pou, bases, model=None, params=None, disc=None, backend=None):
    """Build the global ROM for a configuration and archetype bases."""
    if isinstance(cfg_or_problem, GlobalProblem):
        problem = cfg_or_problem
    else:
        problem = GlobalProblem(cfg_or_problem, model, params)
    return GlobalROMSystem(problem, pou, bases, disc, backend)


def reduced_residual(sys, u):
    return sys.residual(u)


def reduced_jacobian(sys, u):
    return sys.jacobian(u)


def reconstruct(sys, u):
    return sys.reconstruct(u)


def solve_rom(sys, settings=None, init=None):
    """Newton solve of the reduced system (zero initial state by default)."""
    t0 = time.perf_counter()
    x0 = np.zeros(sys.N) if init is None else np.asarray(getattr(init, "coefficients", init),
                                                          float)
    result = fem.newton(sys.residual, sys.jacobian, x0, settings,
                        context={"n_dd": sys.cfg.n_dd})
    return ReducedState(result.x, result.history, result.iterations,
                        time.perf_counter() - t0)
