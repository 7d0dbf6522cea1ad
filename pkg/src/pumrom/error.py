"""Localized residual-based error estimation.

Local Riesz residuals are dual norms of the high-fidelity residual over the
test space of each component (nodes strictly inside the PoU support, off the
Dirichlet boundary), measured in ``H^1(omega_i)`` or, for linear coercive
problems, in the energy norm.
"""
from dataclasses import dataclass, field, asdict
import json
import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import fem

log = logging.getLogger(__name__)


class NonPositiveConstant(ValueError):
    pass


class RankDeficientEnrichment(np.linalg.LinAlgError):
    pass


def residual_constant(C):
    """``C^r = sqrt(max(C + C^2 + 1, 2))``."""
    C = np.asarray(C, float)
    return np.sqrt(np.maximum(C + C * C + 1.0, 2.0))


def delta_indicator(residuals):
    r = np.asarray(residuals, float)
    return float(np.sqrt(np.sum(r * r)))


def global_residual_bound(residuals, C, M=4, scale=1.0):
    """``sqrt(M) max_i C^r_i sqrt(sum r_i^2)``.

    ``scale`` multiplies the constant; values below one are only used to
    inject faults into verification runs.
    """
    Cr = residual_constant(C)
    return float(np.sqrt(M) * scale * np.max(Cr) * delta_indicator(residuals))


def _cholesky(G):
    G = G.toarray() if sp.issparse(G) else np.asarray(G, float)
    try:
        return sla.cho_factor(G)
    except sla.LinAlgError as exc:
        raise fem.IndefiniteGram(str(exc)) from exc


class LocalResidualEvaluator:
    """Local Riesz residuals for a ROM system (or any problem + component maps).

    ``norm='h1'`` uses the reference ``H^1`` Gram, whose factorization is
    shared by all instances of an archetype.  ``norm='energy'`` uses the
    Jacobian of the (linear) high-fidelity problem restricted to each local
    test space.
    """

    def __init__(self, problem, disc, maps, norm="h1"):
        self.problem = problem
        self.disc = disc
        self.maps = maps
        self.norm = norm
        self._factors = {}
        self._hf = problem.hf_problem(disc)
        self.local_idx = [cm.gather[cm.arche.interior_mask] for cm in maps]

    @classmethod
    def for_system(cls, sys, norm="h1"):
        return cls(sys.problem, sys.disc, sys.maps, norm)

    def hf_residual(self, u):
        u = np.asarray(getattr(u, "values", u), float)
        return self._hf.residual(u)

    def factor(self, i):
        cm = self.maps[i]
        if self.norm == "h1":
            key = (cm.label, cm.arche.mesh)
            if key not in self._factors:
                m = cm.arche.interior_mask
                G = cm.arche.gram
                self._factors[key] = _cholesky(G[m][:, m])
            return self._factors[key]
        if self.norm == "energy":
            if i not in self._factors:
                A = self.energy_matrix
                idx = self.local_idx[i]
                self._factors[i] = _cholesky(A[idx][:, idx])
            return self._factors[i]
        raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def energy_matrix(self):
        if not hasattr(self, "_A"):
            if self.problem.nonlinear:
                raise TypeError("energy norm requires a linear problem")
            self._A = self._hf.jacobian(np.zeros(self.disc.ndof)).tocsr()
        return self._A

    def riesz(self, i, r):
        """Riesz representative coefficients on the local test space."""
        return sla.cho_solve(self.factor(i), r[self.local_idx[i]])

    def residuals(self, u, components=None):
        r = self.hf_residual(u)
        comps = range(len(self.maps)) if components is None else components
        out = []
        for i in comps:
            ri = r[self.local_idx[i]]
            out.append(float(np.sqrt(max(ri @ sla.cho_solve(self.factor(i), ri), 0.0))))
        return np.array(out)


def local_riesz_residual(evaluator, i, u):
    return float(evaluator.residuals(u, [i])[0])


def global_dual_residual(problem, disc, u, gram=None):
    """``sup_v G(u, v) / |v|`` over the global zero-trace space."""
    u = np.asarray(getattr(u, "values", u), float)
    r = problem.hf_problem(disc).residual(u)
    G = disc.h1_gram if gram is None else gram
    return fem.dual_norm(r, G, ~disc.dirichlet_mask)


# ------------------------------------------------------------ BRR estimate

@dataclass
class BRRResult:
    tau: float
    delta: float = None
    valid: bool = True


def brr_estimator(residuals, C, M, beta, c_h, L):
    """Proximity indicator and error bound with (approximate) constants.

    Returns ``BRRResult(tau, delta, valid)``; when ``tau >= 1`` the proximity
    condition fails, ``valid`` is False and ``delta`` is None.
    """
    for name, v in (("beta", beta), ("c_h", c_h), ("L", L)):
        if not v > 0:
            raise NonPositiveConstant(f"{name} must be positive, got {v}")
    R = global_residual_bound(residuals, C, M)
    tau = 2.0 * L * c_h / beta ** 2 * R
    if tau >= 1.0:
        return BRRResult(tau, None, False)
    # 1 - sqrt(1 - tau) written to avoid cancellation for small tau
    return BRRResult(tau, beta / (L * c_h) * tau / (1.0 + np.sqrt(1.0 - tau)), True)


def _sym_inv_sqrt(S, rtol=1e-12):
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    if lam.max() <= 0 or lam.min() <= rtol * lam.max():
        raise RankDeficientEnrichment("seminorm Gram of the enriched space is singular")
    return (V / np.sqrt(lam)) @ V.T


def seminorm_gram(disc, B, kind="h1semi"):
    K = disc.stiffness_matrix if kind == "h1semi" else disc.h1_gram
    return (B.T @ (K @ B))


def beta_app(enriched_sys, u_field, norm="h1semi", operator=None):
    """Inf-sup of the linearized form on the enriched reduced space.

    Computed as the smallest singular value of ``S^{-1/2} A S^{-1/2}`` with
    ``A = B^T G'(u) B`` and ``S`` the Gram of the chosen (semi)norm.
    ``operator`` overrides the high-fidelity linearization (sparse matrix).
    """
    B = enriched_sys.B
    u = np.asarray(getattr(u_field, "values", u_field), float)
    J = enriched_sys.hf.jacobian(u) if operator is None else operator
    A = np.asarray((B.T @ (J @ B)).todense() if sp.issparse(B) else B.T @ J @ B)
    S = np.asarray(seminorm_gram(enriched_sys.disc, B, norm).todense())
    Si = _sym_inv_sqrt(S)
    return float(np.linalg.svd(Si @ A @ Si, compute_uv=False).min())


def _grad_at_quad(disc, u):
    _, gx, gy = disc.at_quad(u)
    return gx, gy


def w1p_seminorm(disc, u, p=4):
    gx, gy = _grad_at_quad(disc, u)
    return float(disc.integrate((gx * gx + gy * gy) ** (p / 2)) ** (1.0 / p))


def estimate_c_h(disc, B, p=4, iters=50, starts=4, rng=None):
    """``sup_v |v|_{W^{1,p}} / |v|_{H^1}`` over span(B) by nonlinear power iteration.

    The iteration ``v <- S^{-1} grad(|v|_{W^{1,p}}^p)`` increases the quotient
    monotonically for ``p >= 2``; the best of several starts is returned.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    B = B.toarray() if sp.issparse(B) else np.asarray(B)
    S = B.T @ (disc.stiffness_matrix @ B)
    S = 0.5 * (S + S.T)
    Sc = _cholesky(S)
    ref = disc.ref
    W = disc.quad_weights
    sx = (2.0 / disc.hx)[:, None]
    sy = (2.0 / disc.hy)[:, None]
    best = 0.0
    for k in range(starts):
        c = rng.standard_normal(B.shape[1])
        for _ in range(iters):
            c = c / np.sqrt(c @ S @ c)
            u = B @ c
            ue = u[disc.elem_dofs]
            gx = (ue @ ref.Dxi.T) * sx
            gy = (ue @ ref.Deta.T) * sy
            m = (gx * gx + gy * gy) ** (p / 2 - 1)
            re = ((W * m * gx) * sx) @ ref.Dxi + ((W * m * gy) * sy) @ ref.Deta
            g = B.T @ disc.assemble_vector(re)
            c_new = sla.cho_solve(Sc, g)
            if np.allclose(c_new / np.linalg.norm(c_new), c / np.linalg.norm(c), atol=1e-10):
                c = c_new
                break
            c = c_new
        c = c / np.sqrt(c @ S @ c)
        best = max(best, w1p_seminorm(disc, B @ c, p))
    return best


def estimate_lipschitz(enriched_sys, u_field, p=4, samples=6, radius=0.05, rng=None):
    """Sampled difference quotients of the linearized operator.

    Pairs ``(u + e1, u + e2)`` with random reduced perturbations of ``H^1``
    seminorm ``radius * |u|_1`` give ``|| G'(w1) - G'(w2) || / |w1 - w2|_{W^{1,p}}``
    with the operator norm taken from ``|.|_1`` to its dual on the enriched
    space; the maximum is returned.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    sys = enriched_sys
    disc = sys.disc
    u = np.asarray(getattr(u_field, "values", u_field), float)
    B = sys.B
    S = np.asarray(seminorm_gram(disc, B).todense())
    Si = _sym_inv_sqrt(S)
    scale = max(np.sqrt(u @ (disc.stiffness_matrix @ u)), 1e-12) * radius
    Bd = B.toarray()
    best = 0.0
    for _ in range(samples):
        e = [rng.standard_normal(sys.N) for _ in range(2)]
        e = [c * scale / np.sqrt(c @ S @ c) for c in e]
        w1, w2 = u + Bd @ e[0], u + Bd @ e[1]
        dJ = sys.hf.jacobian(w1) - sys.hf.jacobian(w2)
        A = Bd.T @ (dJ @ Bd)
        nrm = np.linalg.svd(Si @ A @ Si, compute_uv=False).max()
        best = max(best, nrm / w1p_seminorm(disc, w1 - w2, p))
    return float(best)


@dataclass
class ErrorReport:
    residuals: list
    delta: float
    bound: float
    C: float
    Cr: float
    M: int
    brr: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self))


def error_report(evaluator, u, pou, brr_constants=None):
    r = evaluator.residuals(u)
    C = float(np.max(pou.C))
    rep = ErrorReport(r.tolist(), delta_indicator(r), global_residual_bound(r, pou.C, pou.M),
                      C, float(residual_constant(C)), int(pou.M))
    if brr_constants:
        res = brr_estimator(r, pou.C, pou.M, **brr_constants)
        rep.brr = dict(brr_constants, tau=res.tau, delta=res.delta, valid=res.valid)
    return rep
