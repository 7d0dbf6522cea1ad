"""Named invariant checks at desk scale with a JSON report.

Each check returns ``(passed, margin, details)``.  ``margin`` is the
relative slack of the checked inequality (negative when violated).
``fault_scale`` multiplies the constant of the global residual bound; values
well below one make the residual-bound check fail on purpose.
"""
from dataclasses import dataclass, field, asdict
import logging
import os
import tempfile
import time

import numpy as np

from . import components as comp
from . import enrichment as enr
from . import error
from . import fem
from . import io
from . import kernels
from . import models
from . import rom
from . import training

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float
    details: dict = field(default_factory=dict)
    seconds: float = 0.0


def _slack(value, bound):
    """Relative slack of ``value <= bound``."""
    return float((bound - value) / max(abs(bound), 1e-300))


class Context:
    """Shared fixtures: a small nonlinear configuration with trained bases."""

    def __init__(self, seed=0, mesh=None, n_dd=3, n=6, n_train=20):
        self.rng = np.random.default_rng(seed)
        self.mesh = mesh or comp.MeshSpec.fast()
        self.bases = {lab: training.localized_training(
            training.TransferSetup.from_archetype(comp.archetype(lab, self.mesh)),
            n_train, n, self.rng) for lab in comp.LABELS}
        mu, _ = training.sample_local_parameters(n_dd * n_dd, 0.0, self.rng)
        self.cfg = comp.instantiate_configuration(n_dd, mu, int(self.rng.integers(1, n_dd ** 2 + 1)),
                                                  self.mesh)
        self.disc = comp.global_discretization(self.cfg)
        self.pou = comp.build_pou(self.cfg, self.disc)
        self.sys = rom.assemble_rom(self.cfg, self.pou, self.bases, disc=self.disc)


# ------------------------------------------------------------------ checks

def check_pou_sum(ctx):
    err = float(np.max(np.abs(ctx.pou.values.sum(0) - 1.0)))
    return err <= 1e-13, _slack(err, 1e-13), {"max_deviation": err}


def check_pou_overlap(ctx):
    M = comp.overlap_count(ctx.pou)
    return M == 4 and ctx.pou.M == 4, 0.0 if M == 4 else -1.0, {"M": int(M)}


def check_pou_gradient(ctx):
    g = float(np.max(comp.pou_gradient_max(ctx.pou, ctx.disc)))
    ref = np.sqrt(2.0) / ctx.mesh.delta
    rel = abs(g - ref) / ref
    return rel <= 0.02, _slack(rel, 0.02), {"measured": float(g), "expected": float(ref)}


def check_quadrature(ctx):
    ref = fem.ReferenceElement(3)
    q = 2 * ref.nq - 1
    X, Y = np.meshgrid(ref.qpts1d, ref.qpts1d)       # q = qx + nq*qy ordering
    X, Y = X.ravel(), Y.ravel()
    worst = 0.0
    for a in range(q + 1):
        for b in range(q + 1 - a):
            num = np.sum(ref.wq * X ** a * Y ** b)
            ex = ((1 - (-1) ** (a + 1)) / (a + 1)) * ((1 - (-1) ** (b + 1)) / (b + 1))
            worst = max(worst, abs(num - ex) / max(abs(ex), 1.0))
    return worst <= 1e-13, _slack(worst, 1e-13), {"degree": q, "max_error": worst}


def _fd_rel(res, jac, x, rng, h=1e-6, k=3):
    worst = 0.0
    J = jac(x)
    for _ in range(k):
        v = rng.standard_normal(len(x))
        fd = (res(x + h * v) - res(x - h * v)) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - J @ v) / max(np.linalg.norm(fd), 1e-300))
    return float(worst)


def check_hf_jacobian(ctx):
    hf = ctx.sys.hf
    x = 0.3 * ctx.rng.random(ctx.disc.ndof)
    e = _fd_rel(hf.residual, hf.jacobian, x, ctx.rng)
    return e <= 1e-6, _slack(e, 1e-6), {"rel_discrepancy": e}


def check_reduced_consistency(ctx):
    u = 0.05 * ctx.rng.standard_normal(ctx.sys.N)
    R, R2 = ctx.sys.residual(u), ctx.sys.residual_global(u)
    e = float(np.linalg.norm(R - R2) / np.linalg.norm(R2))
    return e <= 1e-12, _slack(e, 1e-12), {"rel_discrepancy": e}


def check_reduced_jacobian(ctx):
    u = 0.05 * ctx.rng.standard_normal(ctx.sys.N)
    e = _fd_rel(ctx.sys.residual, ctx.sys.jacobian, u, ctx.rng)
    nnz = ctx.sys.jacobian(u).nnz
    ok = e <= 1e-6 and nnz <= ctx.sys.jacobian_nnz_bound()
    return ok, _slack(e, 1e-6), {"rel_discrepancy": e, "nnz": int(nnz),
                                 "nnz_bound": ctx.sys.jacobian_nnz_bound()}


def check_residual_bound(ctx, trials=10, fault_scale=1.0):
    ev = error.LocalResidualEvaluator.for_system(ctx.sys)
    worst = np.inf
    for _ in range(trials):
        u = ctx.sys.reconstruct(0.1 * ctx.rng.standard_normal(ctx.sys.N)).values
        u = u + 0.01 * comp.random_sine_field(ctx.disc, ctx.rng).values
        d = error.global_dual_residual(ctx.sys.problem, ctx.disc, u)
        R = error.global_residual_bound(ev.residuals(u), ctx.pou.C, ctx.pou.M, fault_scale)
        worst = min(worst, (R + 1e-10 - d) / R)
    return worst >= 0, float(worst), {"trials": trials, "fault_scale": fault_scale}


def check_riesz(ctx):
    ev = error.LocalResidualEvaluator.for_system(ctx.sys)
    u = ctx.sys.reconstruct(0.1 * ctx.rng.standard_normal(ctx.sys.N)).values
    r = ev.residuals(u)
    f = ev.hf_residual(u)
    worst = 0.0
    for i in range(0, ctx.cfg.N, max(1, ctx.cfg.N // 4)):
        cm = ctx.sys.maps[i]
        ref = fem.dual_norm(f[cm.gather], cm.arche.gram, cm.arche.interior_mask)
        worst = max(worst, abs(ref - r[i]) / max(ref, 1e-300))
    return worst <= 1e-10, _slack(worst, 1e-10), {"max_rel_discrepancy": float(worst)}


def check_chi2(ctx, samples=2000, n_f=20):
    out = {}
    worst = 0.0
    for alpha in (1.0, 2.0):
        m = np.mean([training.sample_fourier_field(n_f, alpha, ctx.rng).h_alpha_norm_sq()
                     for _ in range(samples)])
        rel = abs(m / (2 * n_f) - 1)
        out[f"alpha={alpha:g}"] = float(m)
        worst = max(worst, rel)
    return worst <= 0.05, _slack(worst, 0.05), out


def check_sampler_range(ctx, samples=50, u_max=0.5):
    worst_lo, worst_hi, ends = 0.0, 0.0, 0.0
    for lab in comp.LABELS:
        st = training.TransferSetup.from_archetype(comp.archetype(lab, ctx.mesh))
        for _ in range(samples):
            v = st.sample_bc(ctx.rng, "smooth", u_max=u_max).values
            worst_lo = min(worst_lo, v.min())
            worst_hi = max(worst_hi, v.max() - u_max)
            if lab != "int":
                ends = max(ends, np.abs(v[st.endpoints]).max())
    ok = worst_lo >= 0 and worst_hi <= 0 and ends == 0.0
    return ok, 0.0 if ok else -1.0, {"min": worst_lo, "excess": worst_hi, "endpoint_max": ends}


def check_pod_optimality(ctx):
    st = training.TransferSetup.from_archetype(comp.archetype("int", ctx.mesh))
    snaps = training.generate_snapshots(st, 15, ctx.rng).values
    full = training.pod(snaps, st.gram, 15)
    n = 5
    b = full.truncate(n)
    P = snaps - b.vectors @ (b.vectors.T @ (st.gram @ snaps))
    lhs = float(np.einsum("ij,ij->", P, st.gram @ P))
    rhs = float(np.sum(full.eigenvalues[n:]))
    rel = abs(lhs - rhs) / rhs
    return rel <= 1e-10, _slack(rel, 1e-10), {"sum_sq_errors": lhs, "tail": rhs}


def check_determinism(ctx):
    st = training.TransferSetup.from_archetype(comp.archetype("ed", ctx.mesh))
    a = [st.sample_bc(np.random.default_rng(7), k).values for k in ("smooth", "gaussian")]
    b = [st.sample_bc(np.random.default_rng(7), k).values for k in ("smooth", "gaussian")]
    ok = all(np.array_equal(x, y) for x, y in zip(a, b))
    return ok, 0.0 if ok else -1.0, {}


def _linear_problem(ctx, n_dd=2):
    center = np.array([n_dd * ctx.mesh.H / 2] * 2)
    model = models.LinearCoerciveModel(load=lambda x: models.source_profile(x, center))
    cfg = comp.instantiate_configuration(n_dd, np.tile([0.15, 35.0], (n_dd * n_dd, 1)), 0,
                                         ctx.mesh)
    params = [ctx.rng.uniform(0.2, 1.0), ctx.rng.uniform(0.0, 1.0)]
    return rom.GlobalProblem(cfg, model, params), model


def _linear_bases(ctx, model, n):
    return {lab: training.localized_training(
        training.TransferSetup.from_archetype(comp.archetype(lab, ctx.mesh), model),
        max(n, 4), n, ctx.rng) for lab in comp.LABELS}


def check_galerkin_optimality(ctx):
    prob, model = _linear_problem(ctx)
    disc = comp.global_discretization(prob.cfg)
    pou = comp.build_pou(prob.cfg, disc)
    sys = rom.assemble_rom(prob, pou, _linear_bases(ctx, model, 3), disc=disc)
    A = sys.hf.jacobian(np.zeros(disc.ndof)).tocsr()
    u = fem.solve_nonlinear(sys.hf).values
    uh = sys.reconstruct(rom.solve_rom(sys).coefficients).values
    best = sys.B @ sys.project(u, A)
    e = enr.energy_norm(A, u - uh)
    eb = enr.energy_norm(A, u - best)
    d = error.global_dual_residual(prob, disc, uh, gram=A)
    worst = max(abs(e - eb), abs(e - d))
    return worst <= 1e-8, _slack(worst, 1e-8), {"energy_error": e, "best": eb, "dual": d}


def check_simplified_enrichment(ctx, maxit=10):
    prob, model = _linear_problem(ctx)
    tr, _ = enr.simplified_enrich_linear(prob, _linear_bases(ctx, model, 1), maxit)
    e, r = np.array(tr.errors), np.array(tr.residuals)
    step = float(np.max(e[1:] ** 2 - (e[:-1] ** 2 - r[:-1] ** 2)))
    bound = min(tr.geometric_bound(l) - e[l] for l in range(len(e)))
    ok = step <= 1e-8 and bound >= 0 and np.all(np.diff(e) <= 1e-14)
    return ok, float(min(1e-8 - step, bound)), {"errors": e.tolist(), "step_excess": step}


def check_pum_approximation(ctx, trials=5):
    maps = ctx.sys.maps
    worst = np.inf
    for _ in range(trials):
        u = comp.random_sine_field(ctx.disc, ctx.rng, decay=ctx.rng.uniform(0.5, 2.0))
        z = comp.best_local_approximations(maps, u, ctx.bases)
        l2, l2b, h1, h1b = comp.pum_approximation_bounds(ctx.pou, ctx.disc, maps, u, z)
        worst = min(worst, _slack(l2, l2b + 1e-10), _slack(h1, h1b + 1e-10))
    return worst >= 0, float(worst), {"trials": trials}


def check_mapped_orthonormality(ctx):
    worst = 0.0
    for lab in set(ctx.cfg.labels):
        i = ctx.cfg.labels.index(lab)
        cm = ctx.sys.maps[i]
        W = cm.arche.phi[:, None] * ctx.bases[lab].vectors
        G = W.T @ (cm.arche.gram @ W)
        worst = max(worst, float(np.abs(G - np.eye(G.shape[0])).max()))
    return worst <= 1e-10, _slack(worst, 1e-10), {"max_offdiag": worst}


def check_io_roundtrip(ctx):
    A = ctx.rng.standard_normal((7, 3))
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.bin")
        io.write_matrix(p, A, {"k": 1})
        B, meta = io.read_matrix(p, with_meta=True)
    ok = np.array_equal(A, B) and meta == {"k": 1}
    return ok, 0.0 if ok else -1.0, {}


def check_kernel_backends(ctx):
    if len(kernels.available_backends()) < 2:
        return True, 0.0, {"skipped": "compiled kernels not built"}
    u = 0.3 * ctx.rng.random(ctx.disc.ndof)
    coeffs = ctx.sys.problem.coefficients(ctx.disc)
    a = fem.Problem(ctx.disc, coeffs, "compiled").residual_and_jacobian(u)
    b = fem.Problem(ctx.disc, coeffs, "python").residual_and_jacobian(u)
    e = max(np.abs(a[0] - b[0]).max() / np.abs(b[0]).max(),
            abs(a[1] - b[1]).max() / abs(b[1]).max())
    return e <= 1e-12, _slack(e, 1e-12), {"max_rel_difference": float(e)}


CHECKS = [
    ("pou_partition_of_unity", check_pou_sum),
    ("pou_overlap_count", check_pou_overlap),
    ("pou_gradient_constant", check_pou_gradient),
    ("quadrature_exactness", check_quadrature),
    ("hf_jacobian_finite_difference", check_hf_jacobian),
    ("reduced_residual_consistency", check_reduced_consistency),
    ("reduced_jacobian_finite_difference", check_reduced_jacobian),
    ("global_residual_bound", check_residual_bound),
    ("local_riesz_vs_dual_norm", check_riesz),
    ("fourier_norm_chi2_law", check_chi2),
    ("smooth_sampler_range", check_sampler_range),
    ("pod_tail_identity", check_pod_optimality),
    ("seed_determinism", check_determinism),
    ("galerkin_optimality_linear", check_galerkin_optimality),
    ("simplified_enrichment_decrease", check_simplified_enrichment),
    ("pum_approximation_bound", check_pum_approximation),
    ("mapped_orthonormality", check_mapped_orthonormality),
    ("matrix_file_roundtrip", check_io_roundtrip),
    ("kernel_backends_agree", check_kernel_backends),
]


def run_checks(seed=0, mesh=None, fault_scale=None, only=None):
    ctx = Context(seed, mesh)
    results = []
    for name, fn in CHECKS:
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        kw = {"fault_scale": fault_scale} if (fn is check_residual_bound and fault_scale) else {}
        try:
            ok, margin, det = fn(ctx, **kw)
        except Exception as exc:  # a crashing check is a failed check
            log.exception("check %s raised", name)
            ok, margin, det = False, -1.0, {"exception": repr(exc)}
        results.append(CheckResult(name, bool(ok), float(margin), det,
                                   time.perf_counter() - t0))
        log.info("%s %s (margin %.3g)", "PASS" if ok else "FAIL", name, margin)
    return results


def report(results):
    return {"passed": all(r.passed for r in results), "count": len(results),
            "checks": [asdict(r) for r in results]}
