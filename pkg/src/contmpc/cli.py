"""Batch front-end: ``python -m contmpc <simulate|certify|verify-lemma3|estimate-constants>``.

Exit codes: 0 success, 1 a failed certificate, bound or divergence, 2 a
configuration or usage error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import time

import numpy as np

from . import benchmark
from .config import INEQUALITIES, ConfigError, ExperimentConfig
from .contraction import (CERTIFICATE_SCHEMA, MetricConfig, check_assumption1, check_ineq_GK,
                          check_ineq_P_full, check_ineq_P_opt, check_ineq_Q, estimate_constants,
                          verify_lemma3)
from .continuation import simulate_batch
from .errors import ContMPCError, Divergence
from .mesh import MeshSpec
from .optimal import simulate_optimal_batch

log = logging.getLogger("contmpc")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SIMULATE_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["preset", "optimal", "tau", "t_end", "trajectories", "pairwise_distance",
                 "converged", "zeta_decayed", "wall_time_s"],
    "properties": {
        "preset": {"type": "string"},
        "optimal": {"type": "boolean"},
        "tau": {"type": "number"},
        "t_end": {"type": "number"},
        "trajectories": {"type": "array", "items": {
            "type": "object",
            "required": ["ic", "csv", "zeta_norm_initial", "zeta_norm_final", "zeta_ratio",
                         "max_zeta_norm", "x_final"],
            "properties": {"ic": {"type": "integer"}, "csv": {"type": "string"},
                           "zeta_norm_initial": {"type": "number"},
                           "zeta_norm_final": {"type": "number"},
                           "zeta_ratio": {"type": "number"},
                           "max_zeta_norm": {"type": "number"},
                           "x_final": {"type": "array", "items": {"type": "number"}}}}},
        "pairwise_distance": {"type": "array", "items": {
            "type": "object", "required": ["pair", "distance"],
            "properties": {"pair": {"type": "array", "items": {"type": "integer"}},
                           "distance": {"type": "number"}}}},
        "distance_threshold": {"type": "number"},
        "zeta_ratio_threshold": {"type": "number"},
        "converged": {"type": ["boolean", "null"]},
        "zeta_decayed": {"type": "boolean"},
        "wall_time_s": {"type": "number"},
    },
}

CERTIFY_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["preset", "mesh", "pass", "reports"],
    "properties": {
        "preset": {"type": "string"},
        "mesh": {"type": "string"},
        "pass": {"type": "boolean"},
        "reports": {"type": "array", "items": CERTIFICATE_SCHEMA},
    },
}

LEMMA3_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["max_abs_r_e", "bound", "pass", "seed", "epsilon", "tau", "t_end",
                 "n_perturb", "per_run_max_abs_r_e", "csv_files"],
    "properties": {
        "max_abs_r_e": {"type": "number"},
        "bound": {"type": "number"},
        "pass": {"type": "boolean"},
        "seed": {"type": "integer"},
        "epsilon": {"type": "number"},
        "tau": {"type": "number"},
        "t_end": {"type": "number"},
        "n_perturb": {"type": "integer", "minimum": 1},
        "per_run_max_abs_r_e": {"type": "array", "items": {"type": "number"}},
        "csv_files": {"type": "array", "items": {"type": "string"}},
    },
}

CONSTANTS_SCHEMA = {
    "type": "object",
    "required": ["lambda_H", "c_x_zeta", "c_u_f", "p_min", "p_max", "beta_p",
                 "sufficient_condition_holds"],
    "properties": {k: {"type": "number"} for k in
                   ("lambda_H", "c_x_zeta", "c_u_f", "p_min", "p_max", "beta_p")}
    | {"sufficient_condition_holds": {"type": "boolean"}, "mesh": {"type": "string"}},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="contmpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--preset", default=None)
        sp.add_argument("--config", help="JSON experiment config; flags override it")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    def metric(sp):
        for name in ("kappa", "gamma", "beta-x", "beta-z", "beta-p"):
            sp.add_argument(f"--{name}", type=float, default=None)

    sp = sub.add_parser("simulate", help="closed-loop trajectories to CSV")
    common(sp)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--all-initial-conditions", action="store_true")
    g.add_argument("--ic", type=int, action="append", help="1-based, repeatable")
    sp.add_argument("--optimal", action="store_true", help="use the exact optimum instead")
    sp.add_argument("--tau", type=float)
    sp.add_argument("--t-end", type=float)
    sp.add_argument("--threshold", type=float, help="pairwise end distance threshold")
    sp.add_argument("--strict", action="store_true", help="exit 1 when a verdict fails")

    sp = sub.add_parser("certify", help="mesh certificates of the matrix inequalities")
    common(sp)
    metric(sp)
    sp.add_argument("--ineq", action="append", choices=INEQUALITIES)
    sp.add_argument("--mesh", help="desk, paper, or a JSON MeshSpec file")

    sp = sub.add_parser("verify-lemma3", help="perturbation check of the decomposition")
    common(sp)
    metric(sp)
    sp.add_argument("--n-perturb", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--t-end", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--bound", type=float)
    sp.add_argument("--ic", type=int)

    sp = sub.add_parser("estimate-constants", help="mesh extrema for the scalar condition")
    common(sp)
    metric(sp)
    sp.add_argument("--mesh", help="desk, paper, or a JSON MeshSpec file")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.preset is not None:
        cfg.preset = args.preset
    if args.workers is not None:
        cfg.workers = args.workers
    for name in ("kappa", "gamma", "beta_x", "beta_z", "beta_p"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg.metric, name, v)
    if args.command == "simulate":
        s = cfg.simulation
        if args.all_initial_conditions:
            s.initial_conditions = [1, 2, 3]
        elif args.ic:
            s.initial_conditions = list(args.ic)
        s.optimal = s.optimal or args.optimal
        s.tau = args.tau if args.tau is not None else s.tau
        s.t_end = args.t_end if args.t_end is not None else s.t_end
        if args.threshold is not None:
            s.distance_threshold = args.threshold
    elif args.command in ("certify", "estimate-constants"):
        if getattr(args, "ineq", None):
            cfg.certify.inequalities = list(dict.fromkeys(args.ineq))
        if args.mesh is not None:
            cfg.certify.mesh = args.mesh
    elif args.command == "verify-lemma3":
        lm = cfg.lemma3
        for k in ("n_perturb", "epsilon", "tau", "t_end", "seed", "bound"):
            v = getattr(args, k)
            if v is not None:
                setattr(lm, k, v)
        if args.ic is not None:
            lm.initial_condition = args.ic
    cfg.validate()
    return cfg


def metric_config(cfg: ExperimentConfig, n, hm) -> MetricConfig:
    m = cfg.metric
    return MetricConfig.identity(n, hm, kappa=m.kappa, gamma=m.gamma, beta_x=m.beta_x,
                                 beta_z=m.beta_z, beta_p=m.beta_p)


def mesh_for(ineq, which) -> MeshSpec:
    if which in ("desk", "paper"):
        return benchmark.MESH_PRESETS[ineq](which)
    try:
        with open(which) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read mesh {which}: {exc}") from exc
    if "axes" not in data:
        if ineq not in data:
            raise ConfigError(f"mesh file {which} has no entry for {ineq}")
        data = data[ineq]
    try:
        return MeshSpec.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mesh for {ineq}: {exc}") from exc


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


def cmd_simulate(cfg: ExperimentConfig, out):
    s = cfg.simulation
    problem = benchmark.build_benchmark()
    ics = [problem.initial[i - 1] for i in s.initial_conditions]
    t0 = time.perf_counter()
    x0 = np.array([ic.x for ic in ics])
    if s.optimal:
        recs = simulate_optimal_batch(problem.plant, problem.spec, x0, 0.0, s.t_end, s.tau)
    else:
        U0 = np.array([ic.U for ic in ics])
        recs = simulate_batch(problem.plant, problem.spec, problem.vd, x0, U0, 0.0, s.t_end,
                              s.tau)
    wall = time.perf_counter() - t0
    trajs = []
    for i, r in zip(s.initial_conditions, recs):
        name = f"trajectory_ic{i}{'_optimal' if s.optimal else ''}.csv"
        r.to_csv(os.path.join(out, name))
        z0, z1 = float(r.zeta_norm[0]), float(r.zeta_norm[-1])
        trajs.append({"ic": i, "csv": name, "zeta_norm_initial": z0, "zeta_norm_final": z1,
                      "zeta_ratio": z1 / z0 if z0 > 0 else 0.0,
                      "max_zeta_norm": float(r.zeta_norm.max()),
                      "x_final": r.x[-1].tolist()})
    pairs = [{"pair": [a, b], "distance": float(np.linalg.norm(ra.x[-1] - rb.x[-1]))}
             for (a, ra), (b, rb) in itertools.combinations(zip(s.initial_conditions, recs), 2)]
    converged = all(p["distance"] < s.distance_threshold for p in pairs) if pairs else None
    decayed = all(t["zeta_ratio"] < s.zeta_ratio_threshold or t["max_zeta_norm"] == 0
                  for t in trajs)
    summary = {"preset": cfg.preset, "optimal": s.optimal, "tau": s.tau, "t_end": s.t_end,
               "trajectories": trajs, "pairwise_distance": pairs,
               "distance_threshold": s.distance_threshold,
               "zeta_ratio_threshold": s.zeta_ratio_threshold,
               "converged": converged, "zeta_decayed": decayed, "wall_time_s": wall}
    _write_json(os.path.join(out, "summary.json"), summary)
    for p in pairs:
        log.info("distance ic%d-ic%d at t=%g: %.3e", *p["pair"], s.t_end, p["distance"])
    return summary, converged is not False and decayed


def cmd_certify(cfg: ExperimentConfig, out):
    problem = benchmark.build_benchmark()
    plant, spec = problem.plant, problem.spec
    mcfg = metric_config(cfg, spec.n, spec.hm)
    mcfg.require_rate_ordering()
    checks = {
        "Q": lambda mesh: check_ineq_Q(mcfg, problem.vd, mesh, workers=cfg.workers),
        "P-opt": lambda mesh: check_ineq_P_opt(mcfg, plant, spec, mesh, workers=cfg.workers),
        "GK": lambda mesh: check_ineq_GK(mcfg, plant, spec, mesh, workers=cfg.workers),
        "P-full": lambda mesh: check_ineq_P_full(mcfg, plant, spec, mesh, workers=cfg.workers),
        "assumption1": lambda mesh: check_assumption1(spec, mesh, workers=cfg.workers),
    }
    meshes = {q: mesh_for(q, cfg.certify.mesh) for q in cfg.certify.inequalities}
    reports = []
    summary = {"preset": cfg.preset, "mesh": cfg.certify.mesh, "pass": True, "reports": reports}
    for q in cfg.certify.inequalities:
        log.info("certifying %s on %d points", q, meshes[q].total)
        rep = checks[q](meshes[q]).to_dict()
        reports.append(rep)
        summary["pass"] = summary["pass"] and rep["pass"]
        _write_json(os.path.join(out, f"certificate_{q}.json"), rep)
        _write_json(os.path.join(out, "summary.json"), summary)
        log.info("%s: worst margin %.6g, %s", q, rep["worst_margin"],
                 "pass" if rep["pass"] else "FAIL")
    return summary, summary["pass"]


def cmd_verify_lemma3(cfg: ExperimentConfig, out):
    lm = cfg.lemma3
    problem = benchmark.build_benchmark()
    spec = problem.spec
    mcfg = metric_config(cfg, spec.n, spec.hm)
    ic = problem.initial[lm.initial_condition - 1]
    t0 = time.perf_counter()
    res = verify_lemma3(mcfg, problem.plant, spec, problem.vd, ic, lm.n_perturb, lm.epsilon,
                        lm.tau, lm.t_end, lm.seed, workers=cfg.workers)
    files = []
    for j in range(lm.n_perturb):
        name = f"lemma3_run{j:03d}.csv"
        res.run_csv(j, os.path.join(out, name))
        files.append(name)
    per_run = np.max(np.abs(res.r_e), axis=0)
    summary = {"max_abs_r_e": res.max_abs_r_e, "bound": lm.bound,
               "pass": res.max_abs_r_e <= lm.bound, "seed": lm.seed, "epsilon": lm.epsilon,
               "tau": lm.tau, "t_end": lm.t_end, "n_perturb": lm.n_perturb,
               "initial_condition": lm.initial_condition, "kappa": mcfg.kappa,
               "gamma": mcfg.gamma, "per_run_max_abs_r_e": per_run.tolist(),
               "csv_files": files, "wall_time_s": time.perf_counter() - t0}
    _write_json(os.path.join(out, "summary.json"), summary)
    log.info("max |r_e| = %.4e (bound %.1e)", res.max_abs_r_e, lm.bound)
    return summary, summary["pass"]


def cmd_estimate_constants(cfg: ExperimentConfig, out):
    problem = benchmark.build_benchmark()
    mcfg = metric_config(cfg, problem.spec.n, problem.spec.hm)
    mesh = mesh_for("GK", cfg.certify.mesh)
    c = estimate_constants(problem.plant, problem.spec, mesh, mcfg, workers=cfg.workers)
    summary = c.to_dict() | {"beta_p": mcfg.beta_p, "mesh": cfg.certify.mesh,
                             "sufficient_condition_holds": bool(c.sufficient_for_GK(mcfg.beta_p))}
    _write_json(os.path.join(out, "constants.json"), summary)
    return summary, True


COMMANDS = {"simulate": cmd_simulate, "certify": cmd_certify,
            "verify-lemma3": cmd_verify_lemma3, "estimate-constants": cmd_estimate_constants}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(message)s")
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = resolve_config(args)
        os.makedirs(args.out, exist_ok=True)
        _, ok = COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ValueError) as exc:
        print(f"contmpc: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Divergence as exc:
        print(f"contmpc: divergence: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ContMPCError as exc:
        print(f"contmpc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.command == "simulate" and not args.strict:
        return EXIT_OK
    return EXIT_OK if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
