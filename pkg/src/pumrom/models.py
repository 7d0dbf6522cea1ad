"""PDE models and their element coefficients.

Every model produces a :class:`Coefficients` bundle for a discretization,
which the element kernels turn into residuals and Jacobians.  Coefficients
are evaluated at physical points: ``to_physical`` maps reference coordinates
of a discretization to the global domain (identity for global problems).
"""
from dataclasses import dataclass

import numpy as np

from . import kernels


class DenominatorUnderflow(FloatingPointError):
    pass


MU_BOX = ((0.1, 0.2), (30.0, 40.0))
ADR_BOX = ((0.2, 1.0), (-1.0, 1.0), (-1.0, 1.0), (0.0, 1.0))
SOURCE_AMP = 100.0
SOURCE_DECAY = 50.0


@dataclass
class Coefficients:
    """Element data consumed by :func:`pumrom.kernels.element_kernel`.

    ``mu1, mu2`` have shape (E,); the remaining arrays are (E, Q).
    """
    nonlinear: bool
    mu1: np.ndarray
    mu2: np.ndarray
    diffusion: np.ndarray
    advection_x: np.ndarray
    advection_y: np.ndarray
    reaction: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        for name in ("mu1", "mu2", "diffusion", "advection_x", "advection_y",
                     "reaction", "source"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))

    @classmethod
    def zeros(cls, E, Q, nonlinear=False):
        z = np.zeros((E, Q))
        return cls(nonlinear, np.zeros(E), np.ones(E), z, z.copy(), z.copy(), z.copy(), z.copy())

    def without_source(self):
        c = Coefficients(**self.__dict__)
        c.source = np.zeros_like(self.source)
        return c

    def select(self, elems):
        """Coefficients restricted to a subset of elements."""
        kw = {k: (v if k == "nonlinear" else v[elems]) for k, v in self.__dict__.items()}
        return Coefficients(**kw)


def kappa(u, mu1, mu2, backend=None):
    """Permeability ``(36/mu2) (u(1-u)/(u^3 + (12/mu2)(1-u)^3))^2 + mu1``.

    Returns ``(value, d value / du)``; arrays broadcast.
    """
    u = np.asarray(u, float)
    den = u**3 + (12.0 / np.asarray(mu2, float)) * (1 - u)**3
    if np.any(np.abs(den) < 1e-14):
        raise DenominatorUnderflow("permeability denominator below 1e-14")
    val, dval = kernels.kappa(u, mu1, mu2, backend)
    if val.ndim == 0:
        return float(val), float(dval)
    return val, dval


def source_profile(x, center):
    """Unmasked Gaussian bump ``100 exp(-50 |x - c|^2)``."""
    d = np.asarray(x, float) - np.asarray(center, float)
    return SOURCE_AMP * np.exp(-SOURCE_DECAY * np.sum(d * d, axis=-1))


class SubdomainGrid:
    """Grid of ``nx x ny`` square subdomains of side ``H`` starting at ``origin``.

    Subdomain ``i = ix + nx iy`` (0-based, x fastest).  ``n`` may be an int
    for a square grid.
    """

    def __init__(self, n, H=0.1, origin=(0.0, 0.0)):
        nx, ny = (n, n) if np.isscalar(n) else n
        if nx < 1 or ny < 1:
            raise ValueError("need at least one subdomain")
        self.nx, self.ny, self.H = int(nx), int(ny), float(H)
        self.origin = np.asarray(origin, float)

    @property
    def n(self):
        return self.nx

    @property
    def count(self):
        return self.nx * self.ny

    def index_of(self, pts):
        pts = np.atleast_2d(pts)
        ij = np.floor((pts - self.origin) / self.H).astype(int)
        ij[:, 0] = np.clip(ij[:, 0], 0, self.nx - 1)
        ij[:, 1] = np.clip(ij[:, 1], 0, self.ny - 1)
        return ij[:, 0] + self.nx * ij[:, 1]

    def centroid(self, i):
        ix, iy = i % self.nx, i // self.nx
        return self.origin + self.H * np.array([ix + 0.5, iy + 0.5])

    def box(self, i):
        c = self.centroid(i)
        return c - self.H / 2, c + self.H / 2

    def contains(self, i, pts):
        lo, hi = self.box(i)
        pts = np.atleast_2d(pts)
        return np.all((pts >= lo - 1e-14) & (pts <= hi + 1e-14), axis=1)


def source(x, i_star, grid):
    """Localized source: the Gaussian bump on subdomain ``i_star`` (1-based).

    ``i_star = 0`` means no source; the bump is centered at the subdomain
    centroid and cut off outside it.
    """
    x = np.atleast_2d(np.asarray(x, float))
    if i_star == 0:
        return np.zeros(len(x))
    k = i_star - 1
    return source_profile(x, grid.centroid(k)) * grid.contains(k, x)


def _identity(pts):
    return pts


class NonlinearDiffusionModel:
    """Nonlinear diffusion ``-div(kappa(u) grad u) = f`` on a subdomain grid."""

    nonlinear = True

    def __init__(self, grid=None, mu_box=MU_BOX):
        self.grid = grid
        self.mu_box = mu_box

    def coefficients(self, disc, mu, i_star, to_physical=_identity, grid=None):
        """Coefficients on ``disc``.

        ``mu`` has shape (N_sub, 2); ``i_star`` is the 1-based source
        subdomain (0: none).  Elements are attributed to the subdomain that
        contains the image of their center.  ``grid`` overrides the model's
        subdomain grid (training patches carry their own).
        """
        grid = grid or self.grid
        mu = np.asarray(mu, float).reshape(-1, 2)
        E, Q = disc.nelem, disc.ref.Q
        sub = grid.index_of(to_physical(disc.elem_centers))
        c = Coefficients.zeros(E, Q, nonlinear=True)
        c.mu1 = np.ascontiguousarray(mu[sub, 0])
        c.mu2 = np.ascontiguousarray(mu[sub, 1])
        if i_star:
            xq = to_physical(disc.quad_points.reshape(-1, 2)).reshape(E, Q, 2)
            f = source_profile(xq, grid.centroid(i_star - 1))
            f[sub != i_star - 1] = 0.0
            c.source = np.ascontiguousarray(f)
        return c


def adr_kappa(x):
    x = np.asarray(x, float)
    return 1.0 / (1.0 + np.sum(x * x, axis=-1))


class LinearADRModel:
    """Linear advection-diffusion-reaction problem.

    Strong form ``-div(mu1 kappa grad u + b u) + mu4 u = f`` with constant
    ``b = (mu2, mu3)``.  Expanding the divergence gives the weak form
    ``int mu1 kappa grad u . grad v - (b . grad u) v + mu4 u v``: the advection
    term enters with a minus sign and is not integrated by parts.
    """

    nonlinear = False

    def __init__(self, load=None, box=ADR_BOX):
        self.load = load
        self.box = box

    def integrand(self, w, grad_w, v, grad_v, x, mu):
        mu1, mu2, mu3, mu4 = mu
        k = adr_kappa(x)
        return (mu1 * k * np.dot(grad_w, grad_v) - (mu2 * grad_w[0] + mu3 * grad_w[1]) * v
                + mu4 * w * v)

    def coefficients(self, disc, mu, to_physical=_identity, rotation=None):
        """Coefficients on ``disc``; ``rotation`` (2x2) maps reference to physical
        directions so that the advection field is pulled back as ``R^T b``."""
        mu1, mu2, mu3, mu4 = map(float, mu)
        E, Q = disc.nelem, disc.ref.Q
        xq = to_physical(disc.quad_points.reshape(-1, 2)).reshape(E, Q, 2)
        c = Coefficients.zeros(E, Q)
        c.diffusion = mu1 * adr_kappa(xq)
        b = np.array([mu2, mu3])
        if rotation is not None:
            b = np.asarray(rotation).T @ b
        c.advection_x = np.full((E, Q), b[0])
        c.advection_y = np.full((E, Q), b[1])
        c.reaction = np.full((E, Q), mu4)
        if self.load is not None:
            c.source = np.ascontiguousarray(self.load(xq))
        return c


class LinearCoerciveModel(LinearADRModel):
    """Symmetric diffusion-reaction form ``a(u, v)`` with load ``f``.

    ``mu = (mu1, mu4)``; the energy norm is ``sqrt(a(v, v))``.
    """

    def __init__(self, load=None, box=((0.2, 1.0), (0.0, 1.0))):
        super().__init__(load=load, box=box)

    def coefficients(self, disc, mu, to_physical=_identity, rotation=None):
        mu1, mu4 = map(float, mu)
        return super().coefficients(disc, (mu1, 0.0, 0.0, mu4), to_physical)
