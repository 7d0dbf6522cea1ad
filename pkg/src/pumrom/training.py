"""Randomized localized training.

Random local parameters and boundary data are pushed through the transfer
operator (oversampling solve, restricted to the reference domain) and the
resulting snapshots are compressed by POD in the local norm.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from . import models
from .components import ArchetypeComponent

log = logging.getLogger(__name__)


class DegenerateSample(RuntimeError):
    pass


class ZeroSnapshot(ValueError):
    pass


class TrainingFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- samplers

def sample_local_parameters(n_active, p_src=0.5, rng=None, box=models.MU_BOX):
    """iid uniform ``(mu1, mu2)`` per patch subdomain and a source index.

    The source index is ``t in 1..n_active`` with probability ``p_src/n_active``
    each, and 0 with probability ``1 - p_src``.
    """
    if not 0.0 <= p_src <= 1.0:
        raise ValueError("p_src must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    mu = lo + (hi - lo) * rng.random((n_active, len(box)))
    u = rng.random()
    i_star = 0 if u >= p_src else 1 + min(int(u / p_src * n_active), n_active - 1)
    return mu, i_star


@dataclass
class FourierField:
    """Random trigonometric field with Sobolev-scaled coefficients."""
    c: np.ndarray          # complex, length N_f
    alpha: float

    @property
    def n_f(self):
        return len(self.c)

    @property
    def weights(self):
        k = np.arange(self.n_f)
        return 1.0 / np.sqrt(1.0 + (2 * np.pi * k) ** (2 * self.alpha))

    def __call__(self, s, deriv=0):
        s = np.asarray(s, float)
        k = np.arange(self.n_f)
        coef = self.c * self.weights * (2j * np.pi * k) ** deriv
        return np.exp(2j * np.pi * np.multiply.outer(s, k)) @ coef

    def h_alpha_norm_sq(self):
        """``|g|_{L2}^2 + |g^(alpha)|_{L2}^2`` from the coefficients."""
        return float(np.sum(np.abs(self.c) ** 2))

    def h_alpha_norm_sq_quadrature(self, n_pts=None):
        """Same norm by trapezoidal quadrature (integer ``alpha`` only)."""
        if self.alpha != int(self.alpha):
            raise ValueError("quadrature norm needs integer alpha")
        n_pts = n_pts or 4 * self.n_f + 8
        s = np.arange(n_pts) / n_pts  # periodic trapezoid, exact here
        g = self(s)
        ga = self(s, deriv=int(self.alpha))
        return float(np.mean(np.abs(g) ** 2) + np.mean(np.abs(ga) ** 2))


def sample_fourier_field(n_f, alpha, rng=None, coefficients=None):
    if n_f < 1 or alpha < 0:
        raise ValueError("need N_f >= 1 and alpha >= 0")
    rng = rng if rng is not None else np.random.default_rng()
    if coefficients is None:
        cre = rng.standard_normal(n_f)
        cim = rng.standard_normal(n_f)
        coefficients = cre + 1j * cim
    return FourierField(np.asarray(coefficients, complex), float(alpha))


@dataclass
class BoundarySample:
    values: np.ndarray                         # on the inflow DOFs, in setup order
    provenance: dict = field(default_factory=dict)


def _rescale(g, a, b):
    span = g.max() - g.min()
    if span <= 1e-14 * max(1.0, np.abs(g).max()):
        raise DegenerateSample("flat boundary sample")
    return a + (b - a) / span * (g - g.min())


def smooth_bc_values(s, kind, n_f, alpha, u_max, rng, contraction=0.7, retries=5):
    """Smoothness-controlled boundary values at arclength positions ``s``.

    ``kind`` is the archetype label; ``int`` uses the periodic rescaled field,
    ``co``/``ed`` the contracted field damped by ``s(1-s)`` with a random peak.
    """
    if not 0 < u_max <= 1:
        raise ValueError("u_max must lie in (0, 1]")
    s = np.asarray(s, float)
    for _ in range(retries + 1):
        field_ = sample_fourier_field(n_f, alpha, rng)
        X = rng.uniform(0.0, u_max, 3)
        a, b = min(X[0], X[1]), max(X[0], X[1])
        try:
            if kind == "int":
                return _rescale(field_(s).real, a, b)
            g2 = field_(contraction * s).real
            g3 = _rescale(g2, a, b) * s * (1 - s)
            return X[2] / g3.max() * g3
        except DegenerateSample:
            continue
    raise DegenerateSample(f"flat sample after {retries} retries")


def gaussian_bc_values(n, u_max=None, rng=None, endpoints=None, mean=None):
    """Nodal Gaussian boundary data.

    Without ``u_max``: iid N(0, 1).  With ``u_max``: iid N(u_max/2, u_max^2/4)
    clamped to ``[0, u_max]``.  ``mean`` replaces the random draw (used to
    check the clamp); ``endpoints`` is a mask of nodes forced to zero.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if u_max is None:
        c = rng.standard_normal(n) if mean is None else np.full(n, float(mean))
    else:
        c = (u_max / 2 + u_max / 2 * rng.standard_normal(n)) if mean is None \
            else np.full(n, float(mean))
        c = np.maximum(np.minimum(c, u_max), 0.0)
    if endpoints is not None:
        c = np.where(endpoints, 0.0, c)
    return c


# ----------------------------------------------------------- transfer setup

class TransferSetup:
    """Oversampling patch, inflow boundary, reference domain and local norm."""

    def __init__(self, label, patch, gamma_in, s, ref, restrict, gram, model,
                 patch_grid=None, n_active=1, wall_mask=None, phi=None):
        self.label = label
        self.patch = patch
        self.gamma_in = np.asarray(gamma_in, bool)
        self.in_idx = np.flatnonzero(self.gamma_in)
        self.s = np.asarray(s)[self.in_idx]
        self.ref = ref
        self.restrict = np.asarray(restrict)
        self.gram = gram
        self.model = model
        self.patch_grid = patch_grid
        self.n_active = n_active
        self.wall_mask = np.zeros(ref.ndof, bool) if wall_mask is None else wall_mask
        self.phi = phi
        # endpoints of open inflow curves touch walls
        self.endpoints = np.isclose(self.s, 0.0) | np.isclose(self.s, 1.0)
        if label == "int":
            self.endpoints[:] = False

    @classmethod
    def from_archetype(cls, arc: ArchetypeComponent, model=None):
        model = model or models.NonlinearDiffusionModel(arc.patch_grid)
        return cls(arc.label, arc.patch, arc.gamma_in, arc.s, arc.disc, arc.restrict,
                   arc.weighted_gram, model, arc.patch_grid, arc.n_active,
                   arc.wall_mask, arc.phi)

    @property
    def n_in(self):
        return len(self.in_idx)

    @property
    def nonlinear(self):
        return self.model.nonlinear

    def coefficients(self, mu, i_star=0):
        if self.nonlinear:
            return self.model.coefficients(self.patch, mu, i_star, grid=self.patch_grid)
        return self.model.coefficients(self.patch, mu)

    def sample_mu(self, rng, p_src=0.5):
        if self.nonlinear:
            return sample_local_parameters(self.n_active, p_src, rng)
        box = np.array(self.model.box)
        return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random(len(box)), 0

    def sample_bc(self, rng, kind="smooth", n_f=20, alpha=1.0, u_max=0.5,
                  contraction=0.7):
        prov = dict(kind=kind, n_f=n_f, alpha=alpha, u_max=u_max)
        if kind == "smooth":
            if self.nonlinear:
                v = smooth_bc_values(self.s, self.label, n_f, alpha, u_max, rng, contraction)
            else:
                v = sample_fourier_field(n_f, alpha, rng)(self.s).real
        elif kind == "gaussian":
            v = gaussian_bc_values(self.n_in, u_max if self.nonlinear else None, rng,
                                   self.endpoints)
        else:
            raise ValueError(f"unknown sampler {kind!r}")
        return BoundarySample(v, prov)


def linear_study_setup(elems=9, degree=3, extent=0.3, inner=(0.1, 0.2), load=None):
    """ADR patch ``U = (0, extent)^2`` with extracted domain ``inner^2``.

    The inflow boundary is all of ``dU`` with arclength starting at the origin
    and running counterclockwise; the local norm is ``H^1`` on the extracted
    domain.
    """
    patch = fem.build_discretization(((0, extent), (0, extent)), (elems, elems), degree)
    xb = patch.xbreaks
    tol = 1e-12 * extent
    sel = xb[(xb >= inner[0] - tol) & (xb <= inner[1] + tol)]
    if abs(sel[0] - inner[0]) > tol or abs(sel[-1] - inner[1]) > tol:
        raise fem.DegenerateGeometry("extracted domain must align with element edges")
    ref = fem.Discretization(sel, sel, degree)
    restrict = patch.node_index(ref.coords)
    from .components import _arclength
    L = extent
    s = _arclength(patch.coords / L, [(0, 0), (1, 0), (1, 1), (0, 1), (0, 0)])
    gamma = patch.boundary_mask.copy()
    s[~gamma] = np.nan
    model = models.LinearADRModel(load=load)
    return TransferSetup("linear", patch, gamma, s, ref, restrict, ref.h1_gram, model)


def _problem(setup, mu, i_star):
    return fem.Problem(setup.patch, setup.coefficients(mu, i_star))


def solve_transfer(setup, mu, g, settings=None, i_star=0, full=False):
    """Patch solve with ``u = g`` on the inflow boundary and 0 elsewhere on
    the patch boundary; returns the restriction to the reference domain."""
    vals = g.values if isinstance(g, BoundarySample) else np.asarray(g, float)
    gd = np.zeros(setup.patch.ndof)
    gd[setup.in_idx] = vals
    prob = _problem(setup, mu, i_star)
    try:
        init = fem.harmonic_lifting(setup.patch, gd) if setup.nonlinear else None
        u = fem.solve_nonlinear(prob, gd, settings, init=init,
                                context={"mu": np.asarray(mu).tolist(), "i_star": i_star})
    except fem.NonConvergence as exc:
        exc.context.update(mu=np.asarray(mu).tolist(), i_star=i_star,
                           g=getattr(g, "provenance", None))
        raise
    if full:
        return u
    return fem.Field(setup.ref, u.values[setup.restrict])


def linear_transfer_matrix(setup, mu):
    """Dense matrix mapping inflow DOF values to reference-domain values."""
    if setup.nonlinear:
        raise TypeError("transfer matrices are only defined for linear models")
    prob = _problem(setup, mu, 0)
    A = prob.jacobian(np.zeros(setup.patch.ndof)).tocsr()
    mask = setup.patch.boundary_mask
    free = np.flatnonzero(~mask)
    A_ff = A[free][:, free]
    A_fb = A[free][:, setup.in_idx]
    X = spla.splu(A_ff.tocsc()).solve(-A_fb.toarray())
    full = np.zeros((setup.patch.ndof, setup.n_in))
    full[free] = X
    full[setup.in_idx, np.arange(setup.n_in)] = 1.0
    return full[setup.restrict]


# --------------------------------------------------------------------- POD

@dataclass
class ReducedBasis:
    label: str
    vectors: np.ndarray                       # (ndof_ref, n), columns orthonormal in gram
    eigenvalues: np.ndarray = None
    rank_deficient: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.vectors.shape[1]

    def truncate(self, n):
        return ReducedBasis(self.label, self.vectors[:, :n].copy(), self.eigenvalues,
                            self.rank_deficient, dict(self.meta))


def _dense(G):
    return G.toarray() if sp.issparse(G) else np.asarray(G)


def orthonormalize(B, G, against=None, tol=1e-10):
    """Modified Gram-Schmidt of columns of ``B`` in the ``G`` inner product.

    Columns are first made orthogonal to the (orthonormal) columns of
    ``against``; two passes are used, and columns that vanish relative to
    their initial norm are dropped.
    """
    B = np.array(B, float, copy=True)
    out = []
    for j in range(B.shape[1]):
        v = B[:, j]
        n0 = np.sqrt(max(v @ (G @ v), 0.0))
        if n0 == 0:
            continue
        for _ in range(2):
            if against is not None and against.shape[1]:
                v = v - against @ (against.T @ (G @ v))
            for q in out:
                v = v - q * (q @ (G @ v))
        nv = np.sqrt(max(v @ (G @ v), 0.0))
        if nv > tol * n0:
            out.append(v / nv)
    if not out:
        return np.zeros((B.shape[0], 0))
    return np.column_stack(out)


def pod(snapshots, gram, n, label="", rtol=1e-12):
    """Method-of-snapshots POD in the inner product ``gram``.

    Returns a :class:`ReducedBasis` with ``n`` modes (fewer, flagged
    ``rank_deficient``, when the numerical rank is smaller) and all snapshot
    Gram eigenvalues in descending order.
    """
    S = np.asarray(snapshots, float)
    if S.ndim == 1:
        S = S[:, None]
    if n < 0:
        raise ValueError("n must be nonnegative")
    GS = gram @ S
    K = S.T @ GS
    K = 0.5 * (K + K.T)
    lam, V = np.linalg.eigh(K)
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    lam_c = np.clip(lam, 0.0, None)
    rank = int(np.sum(lam_c > rtol * lam_c[0])) if len(lam) and lam_c[0] > 0 else 0
    m = min(n, rank)
    B = S @ V[:, :m] / np.sqrt(lam_c[:m])
    # one re-orthonormalization pass removes the eigen-solver drift
    if m:
        Gb = B.T @ (gram @ B)
        L = np.linalg.cholesky(0.5 * (Gb + Gb.T))
        B = sla.solve_triangular(L, B.T, lower=True).T
    return ReducedBasis(label, B, lam_c, rank_deficient=n > rank,
                        meta={"requested": n, "rank": rank})


def project(basis, gram, u):
    """G-orthogonal projection onto an orthonormal basis (columns)."""
    B = basis.vectors if isinstance(basis, ReducedBasis) else basis
    return B @ (B.T @ (gram @ u))


def projection_errors(basis, gram, snapshots):
    """Relative projection errors of each snapshot column."""
    S = np.asarray(snapshots, float)
    if S.ndim == 1:
        S = S[:, None]
    B = basis.vectors if isinstance(basis, ReducedBasis) else basis
    GS = gram @ S
    nrm2 = np.einsum("ij,ij->j", S, GS)
    if np.any(nrm2 <= 0):
        raise ZeroSnapshot("snapshot with zero norm")
    if B.shape[1] == 0:
        return np.ones(S.shape[1])
    C = B.T @ GS
    err2 = np.maximum(nrm2 - np.einsum("ij,ij->j", C, C), 0.0)
    return np.sqrt(err2 / nrm2)


def projection_error_indicator(basis, test_snapshots, gram):
    """Average relative projection error over the test snapshots."""
    return float(np.mean(projection_errors(basis, gram, test_snapshots)))


def max_projection_error(basis, test_snapshots, gram):
    return float(np.max(projection_errors(basis, gram, test_snapshots)))


# ---------------------------------------------------------------- training

@dataclass
class SnapshotSet:
    label: str
    values: np.ndarray                         # (ndof_ref, count)
    records: list = field(default_factory=list)

    @property
    def count(self):
        return self.values.shape[1]


def generate_snapshots(setup, n_train, rng, sampler="smooth", p_src=0.5, settings=None,
                       max_fail=0.1, **bc_kw):
    """Draw ``n_train`` (mu, g) pairs and compute transfer snapshots.

    All random draws happen before the solves, so the stream does not depend
    on solver outcomes.
    """
    draws = []
    for _ in range(n_train):
        mu, i_star = setup.sample_mu(rng, p_src)
        g = setup.sample_bc(rng, sampler, **bc_kw)
        draws.append((mu, i_star, g))
    cols, recs, fails = [], [], []
    for mu, i_star, g in draws:
        try:
            u = solve_transfer(setup, mu, g, settings, i_star)
        except (fem.NonConvergence, fem.SingularJacobian, models.DenominatorUnderflow) as exc:
            fails.append(str(exc))
            log.warning("transfer solve failed: %s", exc)
            continue
        cols.append(u.values)
        recs.append({"mu": np.asarray(mu).tolist(), "i_star": int(i_star), **g.provenance})
    if len(fails) > max_fail * n_train:
        raise TrainingFailure(f"{len(fails)} of {n_train} transfer solves failed")
    vals = np.column_stack(cols) if cols else np.zeros((setup.ref.ndof, 0))
    return SnapshotSet(setup.label, vals, recs)


def localized_training(setup, n_train, n, rng, sampler="smooth", p_src=0.5, settings=None,
                       return_snapshots=False, **bc_kw):
    """Randomized localized training: random transfer snapshots then POD."""
    if n > n_train:
        raise ValueError("n must not exceed n_train")
    snaps = generate_snapshots(setup, n_train, rng, sampler, p_src, settings, **bc_kw)
    basis = pod(snaps.values, setup.gram, n, setup.label)
    basis.meta.update(sampler=sampler, n_train=n_train, p_src=p_src, **bc_kw)
    return (basis, snaps) if return_snapshots else basis


def te_pod_baseline(setup, params, n):
    """Transfer-eigenproblem spaces per parameter combined by POD.

    For each parameter the transfer matrix (columns: responses to the inflow
    Lagrange functions) is decomposed by an SVD in the range norm; the left
    singular vectors scaled by their singular values are pooled and
    compressed with POD.
    """
    if setup.nonlinear:
        raise TypeError("TE+POD baseline requires a linear model")
    G = _dense(setup.gram)
    L = np.linalg.cholesky(G)
    pooled, svals = [], []
    for mu in params:
        T = linear_transfer_matrix(setup, mu)
        U, sv, _ = np.linalg.svd(L.T @ T, full_matrices=False)
        modes = sla.solve_triangular(L.T, U * sv, lower=False)
        pooled.append(modes)
        svals.append(sv)
    basis = pod(np.hstack(pooled), setup.gram, n, "te-pod")
    basis.meta["singular_values"] = [s.tolist() for s in svals]
    basis.meta["solves"] = len(params) * setup.n_in
    return basis
