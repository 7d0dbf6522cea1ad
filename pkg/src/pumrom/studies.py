"""Experiment drivers: linear ADR study, nonlinear study, enrichment study.

Every driver takes a plain parameter dict (already validated), an integer
seed, an output directory (or None) and returns a dict of in-memory results.
CSV outputs carry a header row; JSON manifests record inputs and summaries.
All randomness flows from ``numpy.random.SeedSequence(seed)`` children, so
identical inputs reproduce identical CSV files.
"""
import logging
import os
import time

import numpy as np
from scipy import stats

from . import components as comp
from . import enrichment as enr
from . import error
from . import fem
from . import io
from . import rom
from . import training

log = logging.getLogger(__name__)

LINEAR_DEFAULTS = dict(n_train=50, ns=list(range(0, 41, 4)), n_test=100, n_rep=10,
                       alpha=1.0, n_f=20, te_pod_train=20, eff_reps=100, eff_n=10,
                       eff_small=10, elems=9, degree=3)
NONLINEAR_DEFAULTS = dict(n_dd=4, n_test=5, n_train=50, ns=[1, 2, 4, 6, 8, 10, 15, 20, 25],
                          alphas=[0.5, 1.0, 2.0], gaussian=True, n_f=20, u_max=0.5, p_src=0.5,
                          rom_alpha=1.0, rom=True)
ENRICHMENT_DEFAULTS = dict(n_train_loc=30, n_loc=20, n_train_glo=10, n_glo=5, maxit=3,
                           n_test=10, n_dd_range=[2, 6], m_r=25.0, tol=0.0, n_f=20,
                           u_max=0.5, alpha=1.0, p_src=0.5, samplers=["smooth", "gaussian"])


def merged(defaults, params):
    out = dict(defaults)
    out.update(params or {})
    return out


def _rngs(seed, k):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def _out(out_dir, name):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


# ------------------------------------------------------------------ linear

def draw_test_set(setup, n, rng, sampler, **bc_kw):
    return training.generate_snapshots(setup, n, rng, sampler, **bc_kw).values


def max_relative_error(basis, gram, snapshots, n):
    if n == 0:
        return 1.0
    return training.max_projection_error(basis.truncate(n), snapshots, gram)


def effectivity_run(setup, rng, sampler, n_train, n, n_small, n_test, **bc_kw):
    """``E_hat(n_small) / E_hat(n_test)``; the small set is the head of the large one."""
    basis = training.localized_training(setup, n_train, n, rng, sampler, **bc_kw)
    test = draw_test_set(setup, n_test, rng, sampler, **bc_kw)
    errs = training.projection_errors(basis, setup.gram, test)
    return float(np.mean(errs[:n_small]) / np.mean(errs)), float(np.mean(errs[:n_small])), \
        float(np.mean(errs))


def study_linear(params=None, seed=0, out_dir=None):
    p = merged(LINEAR_DEFAULTS, params)
    t0 = time.perf_counter()
    setup = training.linear_study_setup(p["elems"], p["degree"])
    kw = dict(n_f=p["n_f"], alpha=p["alpha"])
    n_max = max(p["ns"])
    if n_max > p["n_train"]:
        raise ValueError("largest n exceeds n_train")
    r_test, r_te, r_train, r_eff = _rngs(seed, 4)
    tests = {s: draw_test_set(setup, p["n_test"], r_test, s, **kw) for s in ("smooth", "gaussian")}
    rows = []
    train_rngs = _rngs(int(r_train.integers(2**32)), p["n_rep"])
    for rep, rng in enumerate(train_rngs):
        for tr in ("smooth", "gaussian"):
            basis = training.localized_training(setup, p["n_train"], n_max, rng, tr, **kw)
            for ts, S in tests.items():
                for n in p["ns"]:
                    rows.append([rep, tr, ts, n, max_relative_error(basis, setup.gram, S, n)])
    # transfer-eigenproblem baseline
    params_te = [setup.sample_mu(r_te)[0] for _ in range(p["te_pod_train"])]
    te = training.te_pod_baseline(setup, params_te, min(n_max, setup.ref.ndof))
    te_rows = [[ts, n, max_relative_error(te, setup.gram, S, n)]
               for ts, S in tests.items() for n in p["ns"]]
    eff_rows = []
    for rep, rng in enumerate(_rngs(int(r_eff.integers(2**32)), p["eff_reps"])):
        for tr in ("smooth", "gaussian"):
            eta, es, el = effectivity_run(setup, rng, tr, p["n_train"], p["eff_n"],
                                          p["eff_small"], p["n_test"], **kw)
            eff_rows.append([rep, tr, es, el, eta])
    res = {"errors": rows, "te_pod": te_rows, "effectivity": eff_rows,
           "te_pod_solves": te.meta["solves"]}
    if out_dir is not None:
        io.write_csv(_out(out_dir, "linear_errors.csv"),
                     ["rep", "train", "test", "n", "E_max_rel"], rows,
                     units={"E_max_rel": "relative H1(extracted domain), dimensionless"})
        io.write_csv(_out(out_dir, "linear_te_pod.csv"), ["test", "n", "E_max_rel"], te_rows,
                     units={"E_max_rel": "relative H1(extracted domain), dimensionless"})
        io.write_csv(_out(out_dir, "linear_effectivity.csv"),
                     ["rep", "train", "E_hat_small", "E_hat_full", "eta"], eff_rows,
                     units={"eta": "ratio, dimensionless"})
        _manifest(out_dir, "linear", p, seed, t0, {"te_pod_solves": te.meta["solves"]})
    return res


def _manifest(out_dir, study, params, seed, t0, summary):
    io.write_json(_out(out_dir, f"{study}_manifest.json"),
                  {"study": study, "params": params, "seed": seed,
                   "wall_time": time.perf_counter() - t0, "summary": summary})


# --------------------------------------------------------------- nonlinear

def random_configuration(rng, n_dd, mesh, n_src=1):
    mu, _ = training.sample_local_parameters(n_dd * n_dd, 0.0, rng)
    i_star = int(rng.integers(1, n_dd * n_dd + 1)) if n_src else 0
    return comp.instantiate_configuration(n_dd, mu, i_star, mesh)


def hf_test_set(cfgs, settings=None):
    """HF solutions of the test configurations and the extracted component data."""
    sols, data = [], {lab: [] for lab in comp.LABELS}
    for k, cfg in enumerate(cfgs):
        disc = comp.global_discretization(cfg)
        problem = rom.GlobalProblem(cfg)
        try:
            u = rom.solve_hf(problem, disc, settings)
        except fem.NonConvergence as exc:
            exc.context.update(test_id=k)
            raise
        sols.append(u)
        for cm in comp.component_maps(cfg, disc):
            data[cm.label].append(u.values[cm.gather])
    data = {lab: np.column_stack(v) if v else None for lab, v in data.items()}
    return sols, data


def train_bases(mesh, n_train, n, rng, sampler, settings=None, **kw):
    out = {}
    for lab in comp.LABELS:
        setup = training.TransferSetup.from_archetype(comp.archetype(lab, mesh))
        out[lab] = training.localized_training(setup, n_train, n, rng, sampler,
                                               settings=settings, **kw)
    return out


def local_error_curves(bases, data, mesh, ns):
    """``E_avg,rel`` per archetype and basis size on the extracted test data."""
    out = {}
    for lab, D in data.items():
        if D is None:
            continue
        G = comp.archetype(lab, mesh).weighted_gram
        out[lab] = [float(training.projection_error_indicator(bases[lab].truncate(n), D, G))
                    for n in ns]
    return out


def global_errors(sys, u_hf, state):
    """Relative Galerkin and projection errors in L2 and H1."""
    d = sys.disc
    u = u_hf.values
    ur = sys.reconstruct(state.coefficients).values
    M, G = d.mass_matrix, d.h1_gram
    nrm = lambda v, A: float(np.sqrt(max(v @ (A @ v), 0.0)))
    pl2 = sys.B @ sys.project(u, M)
    ph1 = sys.B @ sys.project(u, G)
    return {"gal_l2": nrm(u - ur, M) / nrm(u, M), "gal_h1": nrm(u - ur, G) / nrm(u, G),
            "proj_l2": nrm(u - pl2, M) / nrm(u, M), "proj_h1": nrm(u - ph1, G) / nrm(u, G)}


def study_nonlinear(params=None, seed=0, out_dir=None, mesh=None, settings=None):
    p = merged(NONLINEAR_DEFAULTS, params)
    mesh = mesh or comp.MeshSpec()
    t0 = time.perf_counter()
    ns = list(p["ns"])
    n_max = max(ns)
    r_test, r_train = _rngs(seed, 2)
    cfgs = [random_configuration(r_test, p["n_dd"], mesh) for _ in range(p["n_test"])]
    sols, data = hf_test_set(cfgs, settings)
    kinds = [("smooth", a) for a in p["alphas"]] + ([("gaussian", None)] if p["gaussian"] else [])
    train_rngs = _rngs(int(r_train.integers(2**32)), len(kinds))
    local_rows, all_bases = [], {}
    bc = dict(n_f=p["n_f"], u_max=p["u_max"], p_src=p["p_src"])
    for (kind, alpha), rng in zip(kinds, train_rngs):
        name = kind if alpha is None else f"smooth_a{alpha:g}"
        b = train_bases(mesh, p["n_train"], n_max, rng, kind, settings,
                        alpha=1.0 if alpha is None else alpha, **bc)
        all_bases[name] = b
        for lab, curve in local_error_curves(b, data, mesh, ns).items():
            local_rows += [[name, lab, n, e] for n, e in zip(ns, curve)]
    for lab, D in data.items():
        if D is None:
            continue
        G = comp.archetype(lab, mesh).weighted_gram
        opt = training.pod(D, G, min(n_max, D.shape[1]), lab)
        for n in ns:
            e = training.projection_error_indicator(opt.truncate(min(n, opt.n)), D, G)
            local_rows.append(["opt", lab, n, float(e)])
    counts = {lab: (0 if D is None else int(D.shape[1])) for lab, D in data.items()}
    glob_rows = []
    if p["rom"]:
        bases = all_bases.get(f"smooth_a{p['rom_alpha']:g}") or next(iter(all_bases.values()))
        for k, (cfg, u) in enumerate(zip(cfgs, sols)):
            disc = u.disc
            pou = comp.build_pou(cfg, disc)
            for n in ns:
                sys = rom.assemble_rom(cfg, pou, {l: b.truncate(n) for l, b in bases.items()},
                                       disc=disc)
                try:
                    st = rom.solve_rom(sys, settings)
                except (fem.NonConvergence, fem.SingularJacobian) as exc:
                    log.warning("ROM failed (test %d, n=%d): %s", k, n, exc)
                    glob_rows.append([k, n] + [float("nan")] * 4 + [-1])
                    continue
                e = global_errors(sys, u, st)
                glob_rows.append([k, n, e["gal_l2"], e["gal_h1"], e["proj_l2"], e["proj_h1"],
                                  st.iterations])
    res = {"local": local_rows, "global": glob_rows, "counts": counts, "ns": ns}
    if out_dir is not None:
        io.write_csv(_out(out_dir, "nonlinear_local.csv"),
                     ["sampler", "component", "n", "E_avg_rel"], local_rows,
                     units={"E_avg_rel": "relative weighted local norm, dimensionless"})
        io.write_csv(_out(out_dir, "nonlinear_global.csv"),
                     ["test_id", "n", "gal_l2_rel", "gal_h1_rel", "proj_l2_rel", "proj_h1_rel",
                      "newton_iterations"], glob_rows,
                     units={"*_rel": "relative global norm, dimensionless"})
        _manifest(out_dir, "nonlinear", p, seed, t0, {"dataset_sizes": counts,
                                                      "mesh": mesh.to_dict()})
    return res


# -------------------------------------------------------------- enrichment

def evaluate_rom(bases, cfgs, sols, settings=None):
    """Relative H1 errors and residual indicators of the ROM on test configurations."""
    errs, deltas = [], []
    for cfg, u in zip(cfgs, sols):
        disc = u.disc
        pou = comp.build_pou(cfg, disc)
        sys = rom.assemble_rom(cfg, pou, bases, disc=disc)
        st = rom.solve_rom(sys, settings)
        ur = sys.reconstruct(st.coefficients)
        e = u.values - ur.values
        G = disc.h1_gram
        errs.append(float(np.sqrt(e @ (G @ e) / (u.values @ (G @ u.values)))))
        r = error.LocalResidualEvaluator.for_system(sys).residuals(ur)
        deltas.append(error.delta_indicator(r))
    return np.array(errs), np.array(deltas)


def study_enrichment(params=None, seed=0, out_dir=None, mesh=None, settings=None):
    p = merged(ENRICHMENT_DEFAULTS, params)
    mesh = mesh or comp.MeshSpec()
    t0 = time.perf_counter()
    lo, hi = p["n_dd_range"]
    r_test, r_cfg, r_loc, r_enr = _rngs(seed, 4)
    # out-of-sample test configurations, drawn like the training ones
    test_cfgs = [enr.sample_global_configuration(r_test, (lo, hi), mesh)
                 for _ in range(p["n_test"])]
    sols, _ = hf_test_set(test_cfgs, settings)
    train_cfgs = [enr.sample_global_configuration(r_cfg, (lo, hi), mesh)
                  for _ in range(p["n_train_glo"])]
    ecfg = enr.EnrichmentConfig(n_train_glo=p["n_train_glo"], n_glo=p["n_glo"],
                                maxit=p["maxit"], tol=p["tol"], m_r=p["m_r"],
                                n_dd_range=(lo, hi))
    err_rows, trace_rows, summary = [], [], {}
    loc_rngs = _rngs(int(r_loc.integers(2**32)), len(p["samplers"]))
    enr_rngs = _rngs(int(r_enr.integers(2**32)), len(p["samplers"]))
    for sampler, rl, re_ in zip(p["samplers"], loc_rngs, enr_rngs):
        bases0 = train_bases(mesh, p["n_train_loc"], p["n_loc"], rl, sampler, settings,
                             n_f=p["n_f"], alpha=p["alpha"], u_max=p["u_max"], p_src=p["p_src"])
        snaps = {0: bases0}

        def keep(it, V, rec, snaps=snaps):
            snaps[it] = {lab: training.ReducedBasis(lab, v.copy()) for lab, v in V.items()}

        _, trace = enr.enrich(bases0, ecfg, re_, mesh, configurations=train_cfgs,
                              settings=settings, callback=keep)
        for rec in trace.rows():
            trace_rows.append([sampler, rec["iteration"], rec["mu_id"], rec["delta"]]
                              + [rec.get(f"n_{lab}", "") for lab in comp.LABELS])
        med = {}
        for it, b in sorted(snaps.items()):
            errs, deltas = evaluate_rom(b, test_cfgs, sols, settings)
            sizes = {lab: b[lab].n for lab in comp.LABELS}
            for k, (e, d) in enumerate(zip(errs, deltas)):
                err_rows.append([sampler, it, k, test_cfgs[k].n_dd, e, d, d / e]
                                + [sizes[lab] for lab in comp.LABELS])
            med[it] = float(np.median(errs))
        summary[sampler] = {"median_h1": med}
    for sampler in p["samplers"]:
        sub = [(r[4], r[5]) for r in err_rows if r[0] == sampler]
        e, d = np.array(sub).T
        summary[sampler]["spearman"] = float(stats.spearmanr(d, e).statistic)
    e, d = np.array([(r[4], r[5]) for r in err_rows]).T
    summary["spearman_all"] = float(stats.spearmanr(d, e).statistic)
    res = {"errors": err_rows, "trace": trace_rows, "summary": summary}
    if out_dir is not None:
        io.write_csv(_out(out_dir, "enrichment_errors.csv"),
                     ["sampler", "iteration", "test_id", "n_dd", "h1_rel", "delta",
                      "effectivity", "n_int", "n_co", "n_ed"], err_rows,
                     units={"h1_rel": "relative H1, dimensionless",
                            "delta": "dual norm of residual", "effectivity": "delta/h1_rel"})
        io.write_csv(_out(out_dir, "enrichment_trace.csv"),
                     ["sampler", "iteration", "mu_id", "delta", "n_int", "n_co", "n_ed"],
                     trace_rows, units={"delta": "dual norm of residual"})
        _manifest(out_dir, "enrichment", p, seed, t0, summary)
    return res
