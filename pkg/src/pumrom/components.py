"""Archetype components, global configurations and the partition of unity.

Reference frame: every archetype's own subdomain is ``[0, H]^2``.  The
reference domain is the support of the reference PoU weight, i.e. the
subdomain widened by ``delta/2`` on every side that faces a neighbour.
Boundary archetypes (corner, edge) have their Dirichlet walls on the left
(and, for corners, the bottom) side in the reference frame; instantiations
rotate by ``k * 90`` degrees counterclockwise about the subdomain center.
"""
from dataclasses import dataclass, field
from functools import cached_property
import json

import numpy as np
import scipy.sparse as sp

from . import fem
from .models import SubdomainGrid

LABELS = ("int", "co", "ed")
ACTIVE_SUBDOMAINS = {"int": 9, "co": 4, "ed": 6}
OVERLAP_COUNT = 4


class MeshNotConforming(ValueError):
    pass


@dataclass(frozen=True)
class MeshSpec:
    """Per-subdomain mesh: ``elems_per_sub`` elements of degree ``degree``.

    Breakpoints are placed at ``delta/2`` from each subdomain edge so that the
    PoU ramps coincide with element boundaries.
    """
    H: float = 0.1
    delta_frac: float = 0.1
    elems_per_sub: int = 10
    degree: int = 3

    @property
    def delta(self):
        return self.delta_frac * self.H

    @classmethod
    def fast(cls):
        return cls(elems_per_sub=4, degree=2)

    def breaks(self, origin, n_sub):
        return fem.subdomain_breaks(origin, self.H, n_sub, self.elems_per_sub, self.delta)

    def to_dict(self):
        return {"H": self.H, "delta_frac": self.delta_frac,
                "elems_per_sub": self.elems_per_sub, "degree": self.degree}


def rotation(k):
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
    return np.array([[c, -s], [s, c]], float)


def ramp(x, t, delta):
    """Linear ramp from 0 at ``t - delta/2`` to 1 at ``t + delta/2``."""
    return np.clip((np.asarray(x, float) - t + delta / 2) / delta, 0.0, 1.0)


def pou_1d(x, i, n, H, delta, origin=0.0):
    """1D PoU function ``i`` (0-based) of ``n`` on ``[origin, origin + nH]``."""
    left = 1.0 if i == 0 else ramp(x, origin + i * H, delta)
    right = 0.0 if i == n - 1 else ramp(x, origin + (i + 1) * H, delta)
    return left - right


def pou_1d_derivative(x, i, n, H, delta, origin=0.0, side=1):
    """One-sided derivative (``side=+1`` right limit, ``-1`` left limit)."""
    x = np.asarray(x, float)
    eps = side * 1e-12 * H

    def dr(t):
        xs = x + eps
        return ((xs > t - delta / 2) & (xs < t + delta / 2)) / delta

    left = 0.0 if i == 0 else dr(origin + i * H)
    right = 0.0 if i == n - 1 else dr(origin + (i + 1) * H)
    return left - right


# archetype geometry in the reference frame, in units of H
#   walls: sides of the reference domain lying on the global boundary
#   patch: oversampling patch (x0, y0, nx, ny) and the index of [0,H]^2 in it
#   inflow: polyline (units of H) traversed with increasing arclength
_GEOMETRY = {
    "int": dict(walls=(), patch=(-1, -1, 3, 3), central=4,
                inflow=[(-1, -1), (2, -1), (2, 2), (-1, 2), (-1, -1)]),
    "co": dict(walls=("left", "bottom"), patch=(0, 0, 2, 2), central=0,
               inflow=[(2, 0), (2, 2), (0, 2)]),
    "ed": dict(walls=("left",), patch=(0, -1, 2, 3), central=2,
               inflow=[(0, -1), (2, -1), (2, 2), (0, 2)]),
}


def _arclength(points, poly):
    """Normalized arclength of points lying on a polyline (NaN if off it)."""
    poly = np.asarray(poly, float)
    seg = np.diff(poly, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    cum = np.concatenate(([0.0], np.cumsum(lens)))
    s = np.full(len(points), np.nan)
    for k in range(len(seg)):
        d = points - poly[k]
        t = d @ seg[k] / lens[k] ** 2
        dist = np.abs(d[:, 0] * seg[k, 1] - d[:, 1] * seg[k, 0]) / lens[k]
        on = (dist < 1e-9) & (t > -1e-9) & (t < 1 + 1e-9) & np.isnan(s)
        s[on] = (cum[k] + np.clip(t[on], 0, 1) * lens[k]) / cum[-1]
    return s


class ArchetypeComponent:
    """Reference geometry and discretizations of one archetype."""

    def __init__(self, label, mesh=None):
        if label not in LABELS:
            raise ValueError(f"unknown archetype {label!r}")
        self.label = label
        self.mesh = mesh = mesh or MeshSpec()
        g = _GEOMETRY[label]
        H, d = mesh.H, mesh.delta
        self.walls = g["walls"]
        self.n_active = ACTIVE_SUBDOMAINS[label]

        # reference domain = supp(phi_hat)
        lo = np.array([0.0 if "left" in self.walls else -d / 2,
                       0.0 if "bottom" in self.walls else -d / 2])
        hi = np.array([H + d / 2, H + d / 2])
        self.box = (lo, hi)

        px, py, nx, ny = g["patch"]
        self.patch_grid = SubdomainGrid((nx, ny), H, origin=(px * H, py * H))
        self.central = g["central"]
        self.patch = fem.Discretization(mesh.breaks(px * H, nx), mesh.breaks(py * H, ny),
                                        mesh.degree)
        xb = self.patch.xbreaks
        yb = self.patch.ybreaks
        tol = 1e-12 * H
        self.disc = fem.Discretization(
            xb[(xb >= lo[0] - tol) & (xb <= hi[0] + tol)],
            yb[(yb >= lo[1] - tol) & (yb <= hi[1] + tol)], mesh.degree)
        self.restrict = self.patch.node_index(self.disc.coords)

        X = self.disc.coords
        self.phi = self._phi_hat(X)

        wall = np.zeros(self.disc.ndof, bool)
        if "left" in self.walls:
            wall |= np.abs(X[:, 0] - lo[0]) < tol
        if "bottom" in self.walls:
            wall |= np.abs(X[:, 1] - lo[1]) < tol
        self.wall_mask = wall
        # local test space: nodes inside supp(phi_hat), off the walls
        self.interior_mask = (self.phi > 0) & ~wall

        P = self.patch.coords
        self.s = _arclength(P / H, g["inflow"])
        self.gamma_in = ~np.isnan(self.s) & self.patch.boundary_mask
        self.s[~self.gamma_in] = np.nan

    def _phi_hat(self, X):
        H, d = self.mesh.H, self.mesh.delta
        fx = 1.0 - ramp(X[:, 0], H, d)
        fy = 1.0 - ramp(X[:, 1], H, d)
        if "left" not in self.walls:
            fx = fx * ramp(X[:, 0], 0.0, d)
        if "bottom" not in self.walls:
            fy = fy * ramp(X[:, 1], 0.0, d)
        return fx * fy

    def phi_at(self, pts):
        return self._phi_hat(np.atleast_2d(pts))

    @cached_property
    def gram(self):
        """H^1(reference domain) Gram matrix."""
        return self.disc.h1_gram

    @cached_property
    def weighted_gram(self):
        """Gram of the local norm ``|I_h(phi_hat w)|_{H^1}``."""
        return fem.assemble_weighted_h1_gram(self.disc, self.phi)

    @cached_property
    def weighted_gram_dense(self):
        return self.weighted_gram.toarray()

    @property
    def C(self):
        return np.sqrt(2.0) / self.mesh.delta

    def local_norm(self, w):
        return local_norm(self, w)


def local_norm(component, w):
    """``|| I_h(phi_hat w) ||_{H^1}`` on the component's reference domain."""
    w = np.asarray(w.values if isinstance(w, fem.Field) else w, float)
    G = component.gram
    pw = component.phi * w
    return float(np.sqrt(max(pw @ (G @ pw), 0.0)))


_ARCHETYPE_CACHE = {}


def archetype(label, mesh=None):
    key = (label, mesh or MeshSpec())
    if key not in _ARCHETYPE_CACHE:
        _ARCHETYPE_CACHE[key] = ArchetypeComponent(label, key[1])
    return _ARCHETYPE_CACHE[key]


def label_and_rotation(ix, iy, n):
    """Archetype label and rotation index of subdomain ``(ix, iy)``.

    The rotation is the smallest ``k`` that places the reference walls on the
    global boundary.
    """
    bx = ix in (0, n - 1)
    by = iy in (0, n - 1)
    if bx and by:
        corner = {(0, 0): 0, (n - 1, 0): 1, (n - 1, n - 1): 2, (0, n - 1): 3}
        return "co", corner[(ix, iy)]
    if bx or by:
        if ix == 0:
            return "ed", 0
        if iy == 0:
            return "ed", 1
        if ix == n - 1:
            return "ed", 2
        return "ed", 3
    return "int", 0


@dataclass
class GlobalConfiguration:
    """An instantiated system of ``n_dd x n_dd`` components."""
    n_dd: int
    mu: np.ndarray
    i_star: int = 0
    mesh: MeshSpec = field(default_factory=MeshSpec)
    seed: object = None

    def __post_init__(self):
        if self.n_dd < 2:
            raise ValueError("n_dd must be >= 2")
        self.mu = np.asarray(self.mu, float).reshape(-1, 2)
        if len(self.mu) != self.N:
            raise ValueError(f"expected {self.N} parameter pairs, got {len(self.mu)}")
        if not 0 <= self.i_star <= self.N:
            raise ValueError("i_star out of range")
        n = self.n_dd
        self.labels, self.rotations = [], []
        for i in range(self.N):
            lab, k = label_and_rotation(i % n, i // n, n)
            self.labels.append(lab)
            self.rotations.append(k)
        self.grid = SubdomainGrid(n, self.mesh.H)

    @property
    def N(self):
        return self.n_dd ** 2

    @property
    def H(self):
        return self.mesh.H

    @property
    def domain(self):
        L = self.n_dd * self.mesh.H
        return (0.0, L), (0.0, L)

    def counts(self):
        return {lab: self.labels.count(lab) for lab in LABELS}

    def center(self, i):
        return self.grid.centroid(i)

    def to_physical(self, i):
        """``Phi_i``: reference coordinates to physical coordinates."""
        R = rotation(self.rotations[i])
        c_hat = np.full(2, self.mesh.H / 2)
        c = self.center(i)

        def phi(pts):
            return (np.asarray(pts) - c_hat) @ R.T + c
        return phi

    def to_reference(self, i):
        R = rotation(self.rotations[i])
        c_hat = np.full(2, self.mesh.H / 2)
        c = self.center(i)

        def inv(pts):
            return (np.asarray(pts) - c) @ R + c_hat
        return inv

    def neighbors(self, i):
        """Components whose PoU supports overlap that of ``i`` (incl. itself)."""
        n = self.n_dd
        ix, iy = i % n, i // n
        return [jx + n * jy for jy in range(max(iy - 1, 0), min(iy + 2, n))
                for jx in range(max(ix - 1, 0), min(ix + 2, n))]

    def to_json(self):
        return json.dumps({"n_dd": self.n_dd, "mu": self.mu.tolist(), "i_star": self.i_star,
                           "mesh": self.mesh.to_dict(), "seed": self.seed})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["n_dd"], np.array(d["mu"]), d["i_star"], MeshSpec(**d["mesh"]), d.get("seed"))


def instantiate_configuration(n_dd, mu, i_star=0, mesh=None, seed=None):
    return GlobalConfiguration(n_dd, mu, i_star, mesh or MeshSpec(), seed)


def global_discretization(cfg):
    m = cfg.mesh
    b = m.breaks(0.0, cfg.n_dd)
    return fem.Discretization(b, b, m.degree)


@dataclass
class PoUField:
    """Nodal PoU values on the global mesh and their constants."""
    values: np.ndarray            # (N_dd, ndof)
    C: np.ndarray                 # gradient bounds per component
    M: int

    def __getitem__(self, i):
        return self.values[i]


def check_conforming(cfg, disc):
    m = cfg.mesh
    need = []
    for k in range(1, cfg.n_dd):
        need += [k * m.H - m.delta / 2, k * m.H + m.delta / 2]
    for br in (disc.xbreaks, disc.ybreaks):
        for t in need:
            if np.min(np.abs(br - t)) > 1e-12 * m.H:
                raise MeshNotConforming(f"no element edge at {t:.6g}")


def build_pou(cfg, disc):
    """Tensorized piecewise-bilinear PoU on ``disc``."""
    check_conforming(cfg, disc)
    m, n = cfg.mesh, cfg.n_dd
    X = disc.coords
    fx = np.array([pou_1d(X[:, 0], i, n, m.H, m.delta) for i in range(n)])
    fy = np.array([pou_1d(X[:, 1], j, n, m.H, m.delta) for j in range(n)])
    vals = np.einsum("jd,id->jid", fy, fx).reshape(n * n, -1)
    C = np.full(n * n, np.sqrt(2.0) / m.delta)
    return PoUField(vals, C, OVERLAP_COUNT)


def pou_gradient_max(pou, disc):
    """Max of |grad phi_i| over elements, evaluated at element nodes (one-sided)."""
    p = disc.degree
    r = disc.ref.nodes1d
    V, dV = fem.lagrange_tables(r, r)
    Dx = np.einsum("xi,yj->yxji", dV, V).reshape((p + 1) ** 2, -1)
    Dy = np.einsum("xi,yj->yxji", V, dV).reshape((p + 1) ** 2, -1)
    out = []
    for phi in pou.values:
        pe = phi[disc.elem_dofs]
        gx = (pe @ Dx.T) * (2 / disc.hx)[:, None]
        gy = (pe @ Dy.T) * (2 / disc.hy)[:, None]
        out.append(np.sqrt(gx ** 2 + gy ** 2).max())
    return np.array(out)


def overlap_count(pou, tol=0.0):
    return int(np.max(np.sum(pou.values > tol, axis=0)))


@dataclass
class ComponentMap:
    """Node bookkeeping for one instantiated component."""
    index: int
    label: str
    rotation: int
    arche: ArchetypeComponent
    gather: np.ndarray            # global DOF of each reference node
    to_physical: object

    @property
    def rot_matrix(self):
        return rotation(self.rotation)


def component_maps(cfg, disc):
    out = []
    for i in range(cfg.N):
        arc = archetype(cfg.labels[i], cfg.mesh)
        phys = cfg.to_physical(i)
        gather = disc.node_index(phys(arc.disc.coords))
        out.append(ComponentMap(i, cfg.labels[i], cfg.rotations[i], arc, gather, phys))
    return out


def pum_basis_function(cfg, pou, zeta, i, disc=None, maps=None):
    """Global nodal interpolant of ``(zeta o Phi_i^{-1}) phi_i``."""
    disc = disc or global_discretization(cfg)
    cm = (maps or component_maps(cfg, disc))[i]
    z = np.asarray(zeta.values if isinstance(zeta, fem.Field) else zeta, float)
    out = np.zeros(disc.ndof)
    out[cm.gather] = cm.arche.phi * z
    return fem.Field(disc, out)


def extension_matrix(cm, ndof):
    """Sparse ``(ndof, nref)`` scatter of reference nodal values weighted by phi_hat."""
    nref = cm.arche.disc.ndof
    return sp.csr_matrix((cm.arche.phi, (cm.gather, np.arange(nref))), shape=(ndof, nref))


def restriction_matrix(cm, ndof):
    """Sparse ``(nref, ndof)`` gather of global nodal values."""
    nref = cm.arche.disc.ndof
    return sp.csr_matrix((np.ones(nref), (np.arange(nref), cm.gather)), shape=(nref, ndof))


def best_local_approximations(maps, u, bases):
    """``H^1(Omega_hat)``-best approximation of ``u o Phi_i`` in each archetype space."""
    u = np.asarray(getattr(u, "values", u), float)
    out = []
    for cm in maps:
        V = np.asarray(getattr(bases[cm.label], "vectors", bases[cm.label]), float)
        G = cm.arche.gram
        w = u[cm.gather]
        A = V.T @ (G @ V)
        out.append(V @ np.linalg.solve(A, V.T @ (G @ w)))
    return out


def pum_approximation_bounds(pou, disc, maps, u, zetas):
    """Errors of ``u_gfem = I_h sum phi_i zeta_i`` against the PUM bounds.

    Returns (L2 error, L2 bound, gradient error, gradient bound) with the
    local errors measured on the reference domains (the supports of phi_i).
    """
    u = np.asarray(getattr(u, "values", u), float)
    ug = np.zeros(disc.ndof)
    eps, eps_g = [], []
    for cm, z in zip(maps, zetas):
        ug[cm.gather] += cm.arche.phi * z
        e = u[cm.gather] - z
        eps.append(np.sqrt(max(e @ (cm.arche.disc.mass_matrix @ e), 0.0)))
        eps_g.append(np.sqrt(max(e @ (cm.arche.disc.stiffness_matrix @ e), 0.0)))
    eps, eps_g = np.array(eps), np.array(eps_g)
    d = u - ug
    l2 = np.sqrt(max(d @ (disc.mass_matrix @ d), 0.0))
    h1 = np.sqrt(max(d @ (disc.stiffness_matrix @ d), 0.0))
    C = np.asarray(pou.C, float) * np.ones(len(maps))
    l2_bound = np.sqrt(pou.M) * np.sqrt(np.sum(eps ** 2))
    h1_bound = np.sqrt(2 * pou.M) * np.sqrt(np.sum(C ** 2 * eps ** 2 + eps_g ** 2))
    return float(l2), float(l2_bound), float(h1), float(h1_bound)


def random_sine_field(disc, rng, modes=6, decay=1.0):
    """Random ``H^1_0`` field: sine series on the bounding box with decaying amplitudes."""
    (x0, x1), (y0, y1) = (disc.x1d[0], disc.x1d[-1]), (disc.y1d[0], disc.y1d[-1])
    X = (disc.coords[:, 0] - x0) / (x1 - x0)
    Y = (disc.coords[:, 1] - y0) / (y1 - y0)
    u = np.zeros(disc.ndof)
    for k in range(1, modes + 1):
        sx = np.sin(k * np.pi * X)
        for l in range(1, modes + 1):
            u += rng.standard_normal() / (k * k + l * l) ** decay * sx * np.sin(l * np.pi * Y)
    return fem.Field(disc, u)
