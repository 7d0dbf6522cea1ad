"""Structured tensor-product spectral elements on rectangles.

Nodes are Gauss-Lobatto-Legendre points inside each element, global DOFs are
numbered ``ix + Nx * iy`` (x fastest) and elements ``ex + nex * ey``.  Element
breakpoints may be non-uniform per direction, which is how the partition of
unity ramps are made to coincide with element edges.
"""
from dataclasses import dataclass, field
from functools import cached_property
import logging

import numpy as np
from numpy.polynomial import legendre
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels

log = logging.getLogger(__name__)


class DegenerateGeometry(ValueError):
    pass


class IndefiniteGram(np.linalg.LinAlgError):
    pass


class SingularJacobian(np.linalg.LinAlgError):
    pass


class NonConvergence(RuntimeError):
    """Newton budget exhausted; carries the last iterate and residual history."""

    def __init__(self, msg, iterate=None, history=None, context=None):
        super().__init__(msg)
        self.iterate = iterate
        self.history = list(history or [])
        self.context = dict(context or {})


def gll_nodes(p):
    """Gauss-Lobatto-Legendre nodes on [-1, 1] for polynomial degree ``p``."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    if p == 1:
        return np.array([-1.0, 1.0])
    x = np.sort(legendre.Legendre.basis(p).deriv().roots().real)
    # Newton polish on P_p'(x) = 0, then enforce exact symmetry
    dP = legendre.Legendre.basis(p).deriv()
    ddP = dP.deriv()
    for _ in range(3):
        x = x - dP(x) / ddP(x)
    x = 0.5 * (x - x[::-1])
    return np.concatenate(([-1.0], x, [1.0]))


def lagrange_tables(nodes, pts):
    """Values and derivatives of the Lagrange basis on ``nodes`` at ``pts``.

    Returns two arrays of shape ``(len(pts), len(nodes))``.
    """
    nodes = np.asarray(nodes, float)
    pts = np.asarray(pts, float)
    n = len(nodes)
    V = np.ones((len(pts), n))
    dV = np.zeros((len(pts), n))
    for a in range(n):
        others = [m for m in range(n) if m != a]
        denom = np.prod(nodes[a] - nodes[others])
        V[:, a] = np.prod([pts - nodes[m] for m in others], axis=0) / denom
        acc = np.zeros(len(pts))
        for k in others:
            acc += np.prod([pts - nodes[m] for m in others if m != k], axis=0) if n > 2 else 1.0
        dV[:, a] = acc / denom
    return V, dV


class ReferenceElement:
    """Tensor-product basis tables on [-1, 1]^2.

    Local node ``a = ix + (p+1) iy``, quadrature point ``q = qx + nq qy``.
    """

    def __init__(self, degree, nq=None):
        self.degree = p = int(degree)
        # order 2p+3 needs p+2 Gauss points per direction
        self.nq = nq = int(nq or p + 2)
        self.nodes1d = gll_nodes(p)
        self.qpts1d, self.qw1d = legendre.leggauss(nq)
        V, dV = lagrange_tables(self.nodes1d, self.qpts1d)
        self.V1d, self.dV1d = V, dV
        # (Q, nb) with q = qx + nq*qy, a = ix + (p+1)*iy
        self.N = np.ascontiguousarray(np.einsum("xi,yj->yxji", V, V).reshape(nq * nq, -1))
        self.Dxi = np.ascontiguousarray(np.einsum("xi,yj->yxji", dV, V).reshape(nq * nq, -1))
        self.Deta = np.ascontiguousarray(np.einsum("xi,yj->yxji", V, dV).reshape(nq * nq, -1))
        self.wq = np.ascontiguousarray(np.outer(self.qw1d, self.qw1d).ravel())
        self.nb = (p + 1) ** 2
        self.Q = nq * nq


def uniform_breaks(a, b, n):
    return np.linspace(a, b, n + 1)


def subdomain_breaks(origin, H, n_sub, elems_per_sub, delta):
    """1D breakpoints over ``n_sub`` subdomains of width ``H``.

    Each subdomain gets half-overlap elements of width ``delta/2`` at both ends
    and ``elems_per_sub - 2`` uniform elements in between.
    """
    if elems_per_sub < 3:
        raise ValueError("need at least 3 elements per subdomain")
    inner = np.linspace(delta / 2, H - delta / 2, elems_per_sub - 1)
    local = np.concatenate(([0.0], inner, [H]))
    pts = [origin + k * H + local[:-1] for k in range(n_sub)]
    out = np.concatenate(pts + [[origin + n_sub * H]])
    return out


class Discretization:
    """Spectral-element space on an axis-aligned rectangle."""

    def __init__(self, xbreaks, ybreaks, degree):
        xb = np.asarray(xbreaks, float)
        yb = np.asarray(ybreaks, float)
        if len(xb) < 2 or len(yb) < 2:
            raise DegenerateGeometry("need at least one element per direction")
        if np.any(np.diff(xb) <= 0) or np.any(np.diff(yb) <= 0):
            raise DegenerateGeometry("breakpoints must be strictly increasing")
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.xbreaks, self.ybreaks = xb, yb
        self.degree = p = int(degree)
        self.ref = ReferenceElement(p)
        self.nex, self.ney = len(xb) - 1, len(yb) - 1
        self.Nx, self.Ny = self.nex * p + 1, self.ney * p + 1
        self.ndof = self.Nx * self.Ny
        self.nelem = self.nex * self.ney
        self.elems = (self.nex, self.ney)

        r = self.ref.nodes1d
        self.x1d = self._nodes_1d(xb, r)
        self.y1d = self._nodes_1d(yb, r)
        X, Y = np.meshgrid(self.x1d, self.y1d)  # (Ny, Nx)
        self.coords = np.column_stack([X.ravel(), Y.ravel()])

        ex, ey = np.meshgrid(np.arange(self.nex), np.arange(self.ney))
        ex, ey = ex.ravel(), ey.ravel()
        self.elem_ij = np.column_stack([ex, ey])
        ia = np.arange(p + 1)
        ix = ex[:, None, None] * p + ia[None, None, :]
        iy = ey[:, None, None] * p + ia[None, :, None]
        self.elem_dofs = (ix + self.Nx * iy).reshape(self.nelem, -1)
        self.hx = np.ascontiguousarray(np.diff(xb)[ex])
        self.hy = np.ascontiguousarray(np.diff(yb)[ey])
        self.x0 = xb[ex]
        self.y0 = yb[ey]

        bnd = np.zeros((self.Ny, self.Nx), bool)
        bnd[0, :] = bnd[-1, :] = bnd[:, 0] = bnd[:, -1] = True
        self.boundary_mask = bnd.ravel()
        self.dirichlet_mask = self.boundary_mask.copy()

    @staticmethod
    def _nodes_1d(breaks, r):
        p = len(r) - 1
        out = np.empty((len(breaks) - 1) * p + 1)
        for k in range(len(breaks) - 1):
            a, b = breaks[k], breaks[k + 1]
            out[k * p:(k + 1) * p + 1] = a + (r + 1) * 0.5 * (b - a)
        out[-1] = breaks[-1]
        return out

    @property
    def rect(self):
        return (self.xbreaks[0], self.xbreaks[-1]), (self.ybreaks[0], self.ybreaks[-1])

    @cached_property
    def quad_points(self):
        """Physical quadrature points, shape ``(E, Q, 2)``."""
        ref = self.ref
        qx = (ref.qpts1d + 1) * 0.5
        QX = self.x0[:, None] + self.hx[:, None] * qx[None, :]
        QY = self.y0[:, None] + self.hy[:, None] * qx[None, :]
        nq = ref.nq
        X = np.broadcast_to(QX[:, None, :], (self.nelem, nq, nq)).reshape(self.nelem, -1)
        Y = np.broadcast_to(QY[:, :, None], (self.nelem, nq, nq)).reshape(self.nelem, -1)
        return np.stack([X, Y], axis=-1)

    @cached_property
    def quad_weights(self):
        return self.ref.wq[None, :] * (0.25 * self.hx * self.hy)[:, None]

    @cached_property
    def elem_centers(self):
        return np.column_stack([self.x0 + 0.5 * self.hx, self.y0 + 0.5 * self.hy])

    @cached_property
    def _pattern(self):
        nb = self.ref.nb
        rows = np.repeat(self.elem_dofs, nb, axis=1).ravel()
        cols = np.tile(self.elem_dofs, (1, nb)).ravel()
        keys = rows.astype(np.int64) * self.ndof + cols
        uniq, inv = np.unique(keys, return_inverse=True)
        r = uniq // self.ndof
        indptr = np.zeros(self.ndof + 1, np.int64)
        np.add.at(indptr, r + 1, 1)
        indptr = np.cumsum(indptr)
        indices = (uniq % self.ndof).astype(np.int32)
        return indptr, indices, inv.ravel()

    def assemble_matrix(self, Ke):
        """Sum element matrices ``(E, nb, nb)`` into a CSR matrix."""
        indptr, indices, inv = self._pattern
        data = np.bincount(inv, weights=np.asarray(Ke).ravel(), minlength=len(indices))
        return sp.csr_matrix((data, indices, indptr), shape=(self.ndof, self.ndof))

    def assemble_vector(self, re):
        return np.bincount(self.elem_dofs.ravel(), weights=np.asarray(re).ravel(),
                           minlength=self.ndof)

    def at_quad(self, u):
        """Field values and physical gradients at quadrature points."""
        ref = self.ref
        ue = np.asarray(u)[self.elem_dofs]
        return (ue @ ref.N.T,
                (ue @ ref.Dxi.T) * (2.0 / self.hx)[:, None],
                (ue @ ref.Deta.T) * (2.0 / self.hy)[:, None])

    def integrate(self, values_q):
        return float(np.sum(self.quad_weights * values_q))

    def node_index(self, points, tol=1e-9):
        """Global DOF indices of nodes at the given coordinates."""
        pts = np.atleast_2d(points)
        out = []
        for k, grid in enumerate((self.x1d, self.y1d)):
            j = np.clip(np.searchsorted(grid, pts[:, k]), 1, len(grid) - 1)
            j = np.where(np.abs(grid[j - 1] - pts[:, k]) <= np.abs(grid[j] - pts[:, k]), j - 1, j)
            scale = grid[-1] - grid[0]
            if np.any(np.abs(grid[j] - pts[:, k]) > tol * scale):
                raise DegenerateGeometry("points do not coincide with mesh nodes")
            out.append(j)
        return out[0] + self.Nx * out[1]

    def locate(self, points):
        """Element index and reference coordinates of physical points."""
        pts = np.atleast_2d(points)
        ex = np.clip(np.searchsorted(self.xbreaks, pts[:, 0], side="right") - 1, 0, self.nex - 1)
        ey = np.clip(np.searchsorted(self.ybreaks, pts[:, 1], side="right") - 1, 0, self.ney - 1)
        e = ex + self.nex * ey
        xi = 2 * (pts[:, 0] - self.x0[e]) / self.hx[e] - 1
        eta = 2 * (pts[:, 1] - self.y0[e]) / self.hy[e] - 1
        return e, xi, eta

    def evaluate(self, u, points, grad=False):
        """Point evaluation of a field (and its gradient) at arbitrary points."""
        e, xi, eta = self.locate(points)
        r = self.ref.nodes1d
        out_v, out_g = [], []
        ue = np.asarray(u)[self.elem_dofs[e]]
        for k in range(len(e)):
            Vx, dVx = lagrange_tables(r, [xi[k]])
            Vy, dVy = lagrange_tables(r, [eta[k]])
            Nk = np.outer(Vy[0], Vx[0]).ravel()
            out_v.append(ue[k] @ Nk)
            if grad:
                gx = np.outer(Vy[0], dVx[0]).ravel() * 2 / self.hx[e[k]]
                gy = np.outer(dVy[0], Vx[0]).ravel() * 2 / self.hy[e[k]]
                out_g.append([ue[k] @ gx, ue[k] @ gy])
        if grad:
            return np.array(out_v), np.array(out_g)
        return np.array(out_v)

    @cached_property
    def mass_matrix(self):
        ref = self.ref
        W = self.quad_weights
        Me = np.einsum("eq,qa,qb->eab", W, ref.N, ref.N)
        return self.assemble_matrix(Me)

    @cached_property
    def stiffness_matrix(self):
        ref = self.ref
        W = self.quad_weights
        sx2 = (2.0 / self.hx) ** 2
        sy2 = (2.0 / self.hy) ** 2
        Ke = (np.einsum("eq,qa,qb->eab", W * sx2[:, None], ref.Dxi, ref.Dxi)
              + np.einsum("eq,qa,qb->eab", W * sy2[:, None], ref.Deta, ref.Deta))
        return self.assemble_matrix(Ke)

    @cached_property
    def h1_gram(self):
        return (self.stiffness_matrix + self.mass_matrix).tocsr()


def build_discretization(rect, elems, degree, xbreaks=None, ybreaks=None):
    """Spectral-element discretization of ``rect = ((x0, x1), (y0, y1))``.

    ``elems`` gives uniform element counts; explicit ``xbreaks``/``ybreaks``
    override them.
    """
    (x0, x1), (y0, y1) = rect
    if not (x1 > x0 and y1 > y0):
        raise DegenerateGeometry(f"degenerate rectangle {rect}")
    nx, ny = elems
    if nx < 1 or ny < 1:
        raise ValueError("need at least one element per direction")
    xb = uniform_breaks(x0, x1, nx) if xbreaks is None else xbreaks
    yb = uniform_breaks(y0, y1, ny) if ybreaks is None else ybreaks
    return Discretization(xb, yb, degree)


@dataclass
class Field:
    disc: Discretization
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != (self.disc.ndof,):
            raise ValueError(f"field has {self.values.shape} values, disc has {self.disc.ndof} DOFs")


@dataclass
class NewtonSettings:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_iter: int = 25
    damping: bool = True
    max_halvings: int = 8

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    history: list = field(default_factory=list)


def assemble_weighted_h1_gram(disc, weight=None):
    """H^1 Gram of the nodally weighted field ``I_h(w v)``.

    With ``weight`` None the plain H^1 Gram is returned.  The weight must be
    nonnegative; it enters as ``diag(w) G diag(w)``.
    """
    G = disc.h1_gram
    if weight is None:
        return G
    w = np.asarray(weight.values if isinstance(weight, Field) else weight, float)
    if np.any(w < 0):
        raise ValueError("weight must be nonnegative")
    D = sp.diags(w)
    return (D @ G @ D).tocsr()


def _factorize(A):
    try:
        return spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from exc


def newton(residual, jacobian, x0, settings=None, context=None):
    """Damped Newton iteration for ``residual(x) = 0``.

    ``jacobian(x)`` returns a sparse (or dense) matrix.  Converges when the
    residual 2-norm drops below ``abs_tol`` or ``rel_tol`` times the initial
    norm; backtracking halves the step until the norm decreases.
    """
    s = settings or NewtonSettings()
    x = np.array(x0, float)
    r = residual(x)
    r0 = nr = float(np.linalg.norm(r))
    history = [nr]
    if not np.isfinite(nr):
        raise NonConvergence("non-finite initial residual", x, history, context)
    for it in range(s.max_iter + 1):
        if nr <= s.abs_tol or nr <= s.rel_tol * r0:
            return NewtonResult(x, it, history)
        if it == s.max_iter:
            break
        J = jacobian(x)
        if sp.issparse(J):
            dx = -_factorize(J).solve(r)
        else:
            try:
                dx = -sla.solve(J, r)
            except sla.LinAlgError as exc:
                raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("non-finite Newton update")
        t = 1.0
        for _ in range(s.max_halvings + 1 if s.damping else 1):
            xt = x + t * dx
            rt = residual(xt)
            nt = float(np.linalg.norm(rt))
            if np.isfinite(nt) and nt < (1 - 1e-4 * t) * nr:
                break
            t *= 0.5
        if not np.isfinite(nt):
            raise NonConvergence("line search produced non-finite residual", x, history, context)
        x, r, nr = xt, rt, nt
        history.append(nr)
    raise NonConvergence(f"Newton did not converge in {s.max_iter} iterations "
                         f"(|r|={nr:.3e}, |r0|={r0:.3e})", x, history, context)


class Problem:
    """Nonlinear residual on a discretization with fixed coefficients."""

    def __init__(self, disc, coeffs, backend=None):
        self.disc = disc
        self.coeffs = coeffs
        self.backend = backend

    def element_terms(self, u, want_jac=True):
        d = self.disc
        return kernels.element_kernel(np.asarray(u)[d.elem_dofs], d.ref, d.hx, d.hy,
                                      self.coeffs, want_jac, self.backend)

    def residual(self, u):
        re, _ = self.element_terms(u, want_jac=False)
        return self.disc.assemble_vector(re)

    def residual_and_jacobian(self, u):
        re, Je = self.element_terms(u, want_jac=True)
        return self.disc.assemble_vector(re), self.disc.assemble_matrix(Je)

    def jacobian(self, u):
        return self.residual_and_jacobian(u)[1]


def solve_nonlinear(problem, g_dir=None, settings=None, init=None, dirichlet_mask=None,
                    context=None):
    """Solve ``residual(u) = 0`` on free DOFs with ``u = g_dir`` on the mask.

    ``g_dir`` is a full-length vector (only masked entries are read) or None for
    homogeneous data.  Returns a :class:`Field`; the Newton history is attached
    as ``field.history``.
    """
    disc = problem.disc
    mask = disc.dirichlet_mask if dirichlet_mask is None else np.asarray(dirichlet_mask, bool)
    free = ~mask
    u = np.zeros(disc.ndof) if init is None else np.array(
        init.values if isinstance(init, Field) else init, float)
    if g_dir is not None:
        g = np.asarray(g_dir.values if isinstance(g_dir, Field) else g_dir, float)
        u[mask] = g[mask]
    else:
        u[mask] = 0.0
    ub = u.copy()

    def full(xf):
        out = ub.copy()
        out[free] = xf
        return out

    def res(xf):
        return problem.residual(full(xf))[free]

    def jac(xf):
        J = problem.jacobian(full(xf))
        return J[free][:, free]

    result = newton(res, jac, u[free], settings, context)
    out = Field(disc, full(result.x))
    out.history = result.history
    out.iterations = result.iterations
    return out


def harmonic_lifting(disc, g_dir, dirichlet_mask=None):
    """Discrete harmonic extension of Dirichlet data (Newton initial guess)."""
    mask = disc.dirichlet_mask if dirichlet_mask is None else np.asarray(dirichlet_mask, bool)
    g = np.asarray(g_dir, float)
    u = np.zeros(disc.ndof)
    u[mask] = g[mask]
    if not np.any(u[mask]):
        return u
    K = disc.stiffness_matrix.tocsr()
    free = ~mask
    u[free] = _factorize(K[free][:, free]).solve(-(K[free][:, mask] @ u[mask]))
    return u


def dual_norm(functional, gram, subspace_mask=None):
    """``sqrt(f^T G^{-1} f)`` on the masked block (sup of f(v)/|v|_G)."""
    f = np.asarray(functional, float)
    G = gram
    if subspace_mask is not None:
        m = np.asarray(subspace_mask, bool)
        f = f[m]
        G = G[m][:, m] if sp.issparse(G) else np.asarray(G)[np.ix_(m, m)]
    if f.size == 0:
        return 0.0
    if not np.any(f):
        return 0.0
    if sp.issparse(G):
        G = G.toarray() if G.shape[0] <= 3000 else G
    if sp.issparse(G):
        lu = _factorize(G)
        z = lu.solve(f)
        val = float(f @ z)
        if val < 0:
            raise IndefiniteGram("Gram matrix is not positive definite")
        return float(np.sqrt(val))
    try:
        c = sla.cho_factor(np.asarray(G, float))
    except sla.LinAlgError as exc:
        raise IndefiniteGram(str(exc)) from exc
    return float(np.sqrt(f @ sla.cho_solve(c, f)))
