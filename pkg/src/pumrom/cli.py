"""Command line entry point ``pum-rom``.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 solver failure.
"""
import argparse
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import components as comp
from . import enrichment as enr
from . import error
from . import fem
from . import io
from . import models
from . import rom
from . import studies
from . import training
from . import verify as verify_mod

log = logging.getLogger("pumrom")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

_num = {"type": "number"}
_pos = {"type": "integer", "minimum": 1}
_nonneg = {"type": "integer", "minimum": 0}
_str = {"type": "string"}
_sampler = {"enum": ["smooth", "gaussian"]}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "study": {"enum": ["linear", "nonlinear", "enrichment", "verify", "train", "solve"]},
    "seed": _nonneg,
    "fast": {"type": "boolean"},
    "output": _str,
    "log_level": {"enum": ["DEBUG", "INFO", "WARNING", "ERROR"]},
    "backend": {"enum": ["compiled", "python"]},
    "mesh": _obj({"H": {"type": "number", "exclusiveMinimum": 0},
                  "delta_frac": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                  "elems_per_sub": {"type": "integer", "minimum": 3},
                  "degree": {"type": "integer", "minimum": 1, "maximum": 8}}),
    "newton": _obj({"rel_tol": _num, "abs_tol": _num, "max_iter": _pos,
                    "max_halvings": _nonneg, "damping": {"type": "boolean"}}),
    "train": _obj({"n_train": _pos, "n": _pos, "sampler": _sampler, "n_f": _pos,
                   "alpha": _num, "u_max": _num, "p_src": _num,
                   "labels": {"type": "array", "items": {"enum": list(comp.LABELS)}}}),
    "solve": _obj({"bases_dir": _str, "n_dd": {"type": "integer", "minimum": 2},
                   "mu": {"type": "array", "items": _pair},
                   "i_star": _nonneg, "compare_hf": {"type": "boolean"},
                   "n_train": _pos, "n": _pos}),
    "linear": _obj({"n_train": _pos, "ns": {"type": "array", "items": _nonneg},
                    "n_test": _pos, "n_rep": _pos, "alpha": _num, "n_f": _pos,
                    "te_pod_train": _pos, "eff_reps": _nonneg, "eff_n": _pos,
                    "eff_small": _pos, "elems": _pos, "degree": _pos}),
    "nonlinear": _obj({"n_dd": {"type": "integer", "minimum": 2}, "n_test": _pos,
                       "n_train": _pos, "ns": {"type": "array", "items": _pos},
                       "alphas": {"type": "array", "items": _num},
                       "gaussian": {"type": "boolean"}, "n_f": _pos, "u_max": _num,
                       "p_src": _num, "rom_alpha": _num, "rom": {"type": "boolean"}}),
    "enrichment": _obj({"n_train_loc": _pos, "n_loc": _pos, "n_train_glo": _pos,
                        "n_glo": _pos, "maxit": _nonneg, "n_test": _pos,
                        "n_dd_range": {"type": "array", "items": {"type": "integer",
                                                                  "minimum": 2},
                                       "minItems": 2, "maxItems": 2},
                        "m_r": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
                        "tol": _num, "n_f": _pos, "u_max": _num, "alpha": _num,
                        "p_src": _num, "bases_dir": _str,
                        "samplers": {"type": "array", "items": _sampler, "minItems": 1}}),
    "verify": _obj({"fault_injection": {"type": "boolean"},
                    "fault_scale": {"type": "number", "exclusiveMinimum": 0},
                    "checks": {"type": "array", "items": _str}}),
})

COMMANDS = ["train", "enrich", "solve", "study-linear", "study-nonlinear", "study-enrichment",
            "verify"]


class ConfigError(ValueError):
    pass


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {exc.message}") from exc
    return cfg


def mesh_from(cfg, fast):
    m = comp.MeshSpec(**cfg.get("mesh", {}))
    if fast or cfg.get("fast", False):
        m = comp.MeshSpec(m.H, m.delta_frac, 4, 2)
    return m


def newton_from(cfg):
    return fem.NewtonSettings(**cfg.get("newton", {}))


# ----------------------------------------------------------------- commands

def _train_params(cfg):
    p = dict(n_train=30, n=20, sampler="smooth", n_f=20, alpha=1.0, u_max=0.5, p_src=0.5,
             labels=list(comp.LABELS))
    p.update(cfg.get("train", {}))
    if p["n"] > p["n_train"]:
        raise ConfigError("train.n must not exceed train.n_train")
    return p


def cmd_train(cfg, mesh, seed, out, settings):
    p = _train_params(cfg)
    rngs = studies._rngs(seed, len(p["labels"]))
    for lab, rng in zip(p["labels"], rngs):
        setup = training.TransferSetup.from_archetype(comp.archetype(lab, mesh))
        b = training.localized_training(setup, p["n_train"], p["n"], rng, p["sampler"],
                                        p["p_src"], settings, n_f=p["n_f"], alpha=p["alpha"],
                                        u_max=p["u_max"])
        io.save_basis(os.path.join(out, f"basis_{lab}.bin"), b,
                      {"seed": seed, "mesh": mesh.to_dict(), **p})
        log.info("trained %s basis of size %d", lab, b.n)
    return EXIT_OK


def load_bases(directory, labels=comp.LABELS):
    out = {}
    for lab in labels:
        path = os.path.join(directory, f"basis_{lab}.bin")
        if not os.path.exists(path):
            raise ConfigError(f"missing basis file {path}")
        out[lab] = io.load_basis(path)
    return out


def cmd_enrich(cfg, mesh, seed, out, settings):
    p = studies.merged(studies.ENRICHMENT_DEFAULTS, cfg.get("enrichment", {}))
    r_loc, r_enr = studies._rngs(seed, 2)
    if "bases_dir" in p:
        bases = load_bases(p["bases_dir"])
    else:
        bases = studies.train_bases(mesh, p["n_train_loc"], p["n_loc"], r_loc, p["samplers"][0],
                                    settings, n_f=p["n_f"], alpha=p["alpha"], u_max=p["u_max"],
                                    p_src=p["p_src"])
    ecfg = enr.EnrichmentConfig(n_train_glo=p["n_train_glo"], n_glo=p["n_glo"],
                                maxit=p["maxit"], tol=p["tol"], m_r=p["m_r"],
                                n_dd_range=tuple(p["n_dd_range"]))
    new, trace = enr.enrich(bases, ecfg, r_enr, mesh, settings=settings)
    for lab, b in new.items():
        io.save_basis(os.path.join(out, f"basis_{lab}.bin"), b, {"seed": seed, "enriched": True})
    rows = trace.rows()
    io.write_csv(os.path.join(out, "enrichment_trace.csv"),
                 ["iteration", "mu_id", "delta", "n_int", "n_co", "n_ed"], rows,
                 units={"delta": "dual norm of residual"})
    io.write_json(os.path.join(out, "enrichment_summary.json"),
                  {"iterations": [{k: v for k, v in it.items() if k != "max_delta_per_mu"}
                                  for it in trace.iterations]})
    return EXIT_OK


def cmd_solve(cfg, mesh, seed, out, settings):
    p = dict(n_dd=4, i_star=None, compare_hf=True, n_train=30, n=20)
    p.update(cfg.get("solve", {}))
    rng = np.random.default_rng(seed)
    n_dd = p["n_dd"]
    if "mu" in p:
        mu = np.asarray(p["mu"], float)
        if mu.shape != (n_dd * n_dd, 2):
            raise ConfigError(f"solve.mu needs {n_dd * n_dd} pairs")
    else:
        mu, _ = training.sample_local_parameters(n_dd * n_dd, 0.0, rng)
    i_star = p["i_star"] if p["i_star"] is not None else int(rng.integers(1, n_dd * n_dd + 1))
    if i_star > n_dd * n_dd:
        raise ConfigError("solve.i_star out of range")
    gc = comp.instantiate_configuration(n_dd, mu, i_star, mesh, seed)
    if "bases_dir" in p:
        bases = load_bases(p["bases_dir"], sorted(set(gc.labels)))
    else:
        bases = studies.train_bases(mesh, p["n_train"], p["n"], rng, "smooth", settings)
    disc = comp.global_discretization(gc)
    pou = comp.build_pou(gc, disc)
    sys_ = rom.assemble_rom(gc, pou, bases, disc=disc, backend=cfg.get("backend"))
    st = rom.solve_rom(sys_, settings)
    uh = sys_.reconstruct(st.coefficients)
    ev = error.LocalResidualEvaluator.for_system(sys_)
    rep = st.report()
    rep["error_report"] = json.loads(error.error_report(ev, uh, pou).to_json())
    if p["compare_hf"]:
        u = rom.solve_hf(sys_.problem, disc, settings)
        rep["hf_relative_errors"] = studies.global_errors(sys_, u, st)
    io.save_state(os.path.join(out, "reduced_state.bin"), st)
    io.write_field(os.path.join(out, "rom_field.bin"), uh.values, io.discretization_meta(disc))
    with open(os.path.join(out, "configuration.json"), "w", encoding="utf-8") as fh:
        fh.write(gc.to_json())
    io.write_json(os.path.join(out, "solve_report.json"), rep)
    return EXIT_OK


def cmd_study(name):
    def run(cfg, mesh, seed, out, settings):
        if name == "linear":
            studies.study_linear(cfg.get("linear"), seed, out)
        elif name == "nonlinear":
            studies.study_nonlinear(cfg.get("nonlinear"), seed, out, mesh, settings)
        else:
            studies.study_enrichment(cfg.get("enrichment"), seed, out, mesh, settings)
        return EXIT_OK
    return run


def cmd_verify(cfg, mesh, seed, out, settings):
    p = dict(fault_injection=False, fault_scale=1e-3, checks=None)
    p.update(cfg.get("verify", {}))
    unknown = set(p["checks"] or ()) - {n for n, _ in verify_mod.CHECKS}
    if unknown:
        raise ConfigError(f"unknown checks: {sorted(unknown)}")
    res = verify_mod.run_checks(seed, mesh, p["fault_scale"] if p["fault_injection"] else None,
                                set(p["checks"]) if p["checks"] else None)
    rep = verify_mod.report(res)
    io.write_json(os.path.join(out, "verify_report.json"), rep)
    for r in res:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} margin={r.margin:.3g}")
    return EXIT_OK if rep["passed"] else EXIT_CHECK


HANDLERS = {"train": cmd_train, "enrich": cmd_enrich, "solve": cmd_solve,
            "study-linear": cmd_study("linear"), "study-nonlinear": cmd_study("nonlinear"),
            "study-enrichment": cmd_study("enrichment"), "verify": cmd_verify}


def build_parser():
    ap = argparse.ArgumentParser(prog="pum-rom", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment configuration")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--fast", action="store_true", help="coarse 4x4 Q2 subdomain meshes")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        logging.basicConfig(level=cfg.get("log_level", "INFO"),
                            format="%(levelname)s %(name)s: %(message)s")
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        out = args.out or cfg.get("output", "pumrom_out")
        mesh = mesh_from(cfg, args.fast)
        settings = newton_from(cfg)
        os.makedirs(out, exist_ok=True)
        return HANDLERS[args.command](cfg, mesh, seed, out, settings)
    except (fem.NonConvergence, fem.SingularJacobian, fem.IndefiniteGram,
            training.TrainingFailure, training.DegenerateSample,
            models.DenominatorUnderflow) as exc:
        ctx = getattr(exc, "context", None)
        print(f"solver failure: {exc}" + (f" [{ctx}]" if ctx else ""), file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, comp.MeshNotConforming, fem.DegenerateGeometry, ValueError) as exc:
        # ValueError: values that pass the schema but are inconsistent (sizes, boxes)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
