"""Residual-driven enrichment of the archetype bases with global reduced solves."""
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from . import components as comp
from . import error
from . import fem
from . import rom
from . import training

log = logging.getLogger(__name__)


@dataclass
class EnrichmentConfig:
    n_train_glo: int = 50
    n_glo: int = 10
    maxit: int = 3
    tol: float = 0.0
    m_r: float = 25.0
    n_dd_range: tuple = (4, 12)
    indicator: str = "delta"          # or "brr"
    brr_constants: dict = None

    def __post_init__(self):
        if not 0 < self.m_r <= 100:
            raise ValueError("m_r must lie in (0, 100]")
        if self.n_glo < 1 or self.maxit < 0 or self.n_train_glo < 1:
            raise ValueError("n_glo, n_train_glo must be >= 1 and maxit >= 0")


@dataclass
class EnrichmentTrace:
    iterations: list = field(default_factory=list)

    def rows(self):
        out = []
        for it in self.iterations:
            for k, d in enumerate(it["max_delta_per_mu"]):
                out.append({"iteration": it["iteration"], "mu_id": k, "delta": d,
                            **{f"n_{lab}": n for lab, n in it["sizes"].items()}})
        return out


def local_correction(problem, cm, u_hat, settings=None):
    """Local correction on the support of ``phi_i``.

    Solves ``G(u_hat + T, v) = 0`` for ``v`` in the local test space, Newton
    started from ``T = 0``.  Returns ``(T, u_star)`` on the reference nodes,
    where ``u_star = T / phi_hat`` with 0 wherever ``phi_hat`` vanishes.
    """
    u = np.asarray(getattr(u_hat, "values", u_hat), float)
    w = u[cm.gather]
    prob = problem.component_problem(cm)
    fixed = ~cm.arche.interior_mask
    try:
        sol = fem.solve_nonlinear(prob, w, settings, init=w, dirichlet_mask=fixed,
                                  context={"component": cm.index, "label": cm.label})
    except fem.NonConvergence as exc:
        exc.context.update(component=cm.index, label=cm.label)
        raise
    T = sol.values - w
    T[fixed] = 0.0
    phi = cm.arche.phi
    u_star = np.zeros_like(T)
    pos = phi > 0
    u_star[pos] = T[pos] / phi[pos]
    return T, u_star


def mark_components(residuals, m_r):
    """Indices of the top ``ceil(m_r% * count)`` residuals (ties: lower index)."""
    r = np.asarray(residuals, float)
    if len(r) == 0:
        return np.array([], int)
    k = min(len(r), max(1, math.ceil(m_r / 100.0 * len(r) - 1e-12)))
    order = np.lexsort((np.arange(len(r)), -r))
    return np.sort(order[:k])


def pod_update(basis, data, gram, n_glo):
    """``Z <- Z + POD({w - P_Z w}, n_glo)``, orthonormalized against ``Z``."""
    V = basis.vectors if isinstance(basis, training.ReducedBasis) else np.asarray(basis)
    if data.shape[1] == 0:
        return V
    resid = data - V @ (V.T @ (gram @ data))
    new = training.pod(resid, gram, n_glo)
    add = training.orthonormalize(new.vectors, gram, against=V)
    return np.hstack([V, add])


def sample_global_configuration(rng, n_dd_range, mesh, n_src=1):
    """Global configuration with uniform ``n_dd``, iid local parameters and one source."""
    lo, hi = n_dd_range
    n = int(rng.integers(lo, hi + 1))
    mu, _ = training.sample_local_parameters(n * n, 0.0, rng)
    i_star = int(rng.integers(1, n * n + 1)) if n_src else 0
    return comp.instantiate_configuration(n, mu, i_star, mesh)


def enrich(bases, config, rng, mesh=None, configurations=None, settings=None,
           callback=None):
    """Randomized localized training with global enrichment (multi-archetype).

    ``bases``: dict label -> :class:`ReducedBasis` (or matrix).  Training
    configurations are drawn once up front unless given.  Each iteration
    solves the ROM per configuration (warm-started from the previous
    iteration), marks the ``m_r`` percent largest local residuals of each
    archetype, collects the local corrections and appends ``n_glo`` POD
    modes per archetype.
    """
    mesh = mesh or comp.MeshSpec()
    V = {lab: np.array(getattr(b, "vectors", b), float) for lab, b in bases.items()}
    cfgs = configurations if configurations is not None else [
        sample_global_configuration(rng, config.n_dd_range, mesh)
        for _ in range(config.n_train_glo)]
    trace = EnrichmentTrace()
    warm = {}
    for it in range(1, config.maxit + 1):
        data = {lab: [] for lab in V}
        deltas, marked_all = [], []
        for k, cfg in enumerate(cfgs):
            disc = comp.global_discretization(cfg)
            pou = comp.build_pou(cfg, disc)
            sys = rom.assemble_rom(cfg, pou, V, disc=disc)
            init = warm.get(k)
            try:
                st = rom.solve_rom(sys, settings, init)
            except (fem.NonConvergence, fem.SingularJacobian) as exc:
                if init is None:
                    _tag(exc, k, it)
                    raise
                log.warning("warm-started ROM solve failed (mu %d, iteration %d): %s", k, it, exc)
                try:
                    st = rom.solve_rom(sys, settings, None)
                except (fem.NonConvergence, fem.SingularJacobian) as exc2:
                    _tag(exc2, k, it)
                    raise
            warm[k] = st.coefficients
            uh = sys.reconstruct(st.coefficients)
            ev = error.LocalResidualEvaluator.for_system(sys)
            r = ev.residuals(uh)
            deltas.append(error.delta_indicator(r))
            if config.indicator == "brr" and config.brr_constants:
                b = error.brr_estimator(r, pou.C, pou.M, **config.brr_constants)
                deltas[-1] = b.delta if b.valid else np.inf
            marks = {}
            for lab in V:
                idx = np.flatnonzero(np.array(cfg.labels) == lab)
                if not len(idx):
                    continue
                sel = idx[mark_components(r[idx], config.m_r)]
                marks[lab] = sel.tolist()
                for i in sel:
                    try:
                        _, ustar = local_correction(sys.problem, sys.maps[i], uh, settings)
                    except (fem.NonConvergence, fem.SingularJacobian) as exc:
                        log.warning("skipping component %d: %s", i, exc)
                        continue
                    data[lab].append(ustar)
            marked_all.append(marks)
        sizes_before = {lab: V[lab].shape[1] for lab in V}
        for lab in V:
            if data[lab]:
                arc = comp.archetype(lab, mesh)
                V[lab] = pod_update(V[lab], np.column_stack(data[lab]), arc.weighted_gram,
                                    config.n_glo)
        rec = {"iteration": it, "max_delta": float(np.max(deltas)),
               "max_delta_per_mu": [float(d) for d in deltas],
               "dataset_sizes": {lab: len(d) for lab, d in data.items()},
               "marked": marked_all,
               "sizes": {lab: int(V[lab].shape[1]) for lab in V}}
        trace.iterations.append(rec)
        if callback is not None:
            callback(it, V, rec)
        if rec["max_delta"] < config.tol:
            break
        # warm starts: pad previous coefficients with zeros for the new modes
        for k, cfg in enumerate(cfgs):
            warm[k] = _pad(warm[k], cfg, sizes_before, V)
    out = {lab: training.ReducedBasis(lab, V[lab]) for lab in V}
    return out, trace


def _tag(exc, mu_id, iteration):
    ctx = getattr(exc, "context", None)
    if isinstance(ctx, dict):
        ctx.update(mu_id=mu_id, iteration=iteration)
    else:
        exc.context = {"mu_id": mu_id, "iteration": iteration}


def _pad(u, cfg, old_sizes, V):
    parts, pos = [], 0
    for lab in cfg.labels:
        n_old, n_new = old_sizes[lab], V[lab].shape[1]
        parts.append(np.concatenate([u[pos:pos + n_old], np.zeros(n_new - n_old)]))
        pos += n_old
    return np.concatenate(parts)


# ---------------------------------------------------- linear coercive case

@dataclass
class SimplifiedTrace:
    errors: list = field(default_factory=list)          # energy errors per iteration
    residuals: list = field(default_factory=list)       # max local residual r_k
    marked: list = field(default_factory=list)
    sizes: list = field(default_factory=list)
    c_pu: float = None
    n_dd: int = None

    def geometric_bound(self, ell):
        rate = 1.0 - 1.0 / (self.n_dd * self.c_pu ** 2)
        return rate ** (ell / 2.0) * self.errors[0]


def energy_norm(A, v):
    return float(np.sqrt(max(v @ (A @ v), 0.0)))


def simplified_enrich_linear(problems, bases, maxit, mesh=None, tol=1e-13):
    """Simplified enrichment for linear coercive problems.

    ``problems`` is one :class:`rom.GlobalProblem` (single configuration) or
    a list of them (several configurations, processed round-robin).  Each
    iteration solves the ROM, picks the component with the largest energy
    residual, solves the exact local problem there and appends
    ``(T / phi_k) o Phi_k`` to the archetype basis of that component.
    """
    probs = problems if isinstance(problems, (list, tuple)) else [problems]
    V = {lab: np.array(getattr(b, "vectors", b), float) for lab, b in bases.items()}
    ctx = []
    for p in probs:
        disc = comp.global_discretization(p.cfg)
        pou = comp.build_pou(p.cfg, disc)
        hf = p.hf_problem(disc)
        A = hf.jacobian(np.zeros(disc.ndof)).tocsr()
        u = fem.solve_nonlinear(hf, None).values
        ctx.append((p, disc, pou, A, u))
    trace = SimplifiedTrace(n_dd=probs[0].cfg.N)
    trace.c_pu = float(np.sqrt(ctx[0][2].M) * np.max(error.residual_constant(ctx[0][2].C)))
    for ell in range(maxit + 1):
        p, disc, pou, A, u = ctx[ell % len(ctx)]
        sys = rom.assemble_rom(p, pou, V, disc=disc)
        uhat = sys.reconstruct(rom.solve_rom(sys).coefficients).values
        err = energy_norm(A, u - uhat)
        trace.errors.append(err)
        trace.sizes.append({lab: int(v.shape[1]) for lab, v in V.items()})
        ev = error.LocalResidualEvaluator.for_system(sys, norm="energy")
        r = ev.residuals(uhat)
        k = int(np.argmax(r))
        trace.residuals.append(float(r[k]))
        trace.marked.append(k)
        if ell == maxit or err <= tol:
            break
        cm = sys.maps[k]
        _, ustar = local_correction(p, cm, uhat)
        arc = cm.arche
        add = training.orthonormalize(ustar[:, None], arc.weighted_gram, against=V[cm.label])
        if add.shape[1]:
            V[cm.label] = np.hstack([V[cm.label], add])
    return trace, V
