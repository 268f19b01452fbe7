"""Certificates on the full benchmark meshes (long-running).

    CONTMPC_WORKERS=8 python scripts/full_mesh_certificates.py P-opt
    CONTMPC_WORKERS=8 python scripts/full_mesh_certificates.py GK assumption1

P-opt covers 7.8M points and takes 5 to 8 minutes on one core.  The (U, x, t)
mesh behind GK, P-full and assumption1 has 294M points; budget hours, and
spread it over as many workers as the machine has.
"""
import argparse
import json
import os

from contmpc.benchmark import MESH_PRESETS, build_benchmark
from contmpc.config import INEQUALITIES
from contmpc.contraction import (MetricConfig, check_assumption1, check_ineq_GK,
                                 check_ineq_P_full, check_ineq_P_opt, check_ineq_Q)
from contmpc.parallel import default_workers

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("ineq", nargs="+", choices=INEQUALITIES)
    ap.add_argument("--out", default="results/full_mesh")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    workers = args.workers or default_workers()
    os.makedirs(args.out, exist_ok=True)

    p = build_benchmark()
    cfg = MetricConfig.identity(4, 6)
    checks = {
        "Q": lambda m: check_ineq_Q(cfg, p.vd, m, workers=workers),
        "P-opt": lambda m: check_ineq_P_opt(cfg, p.plant, p.spec, m, workers=workers),
        "GK": lambda m: check_ineq_GK(cfg, p.plant, p.spec, m, workers=workers),
        "P-full": lambda m: check_ineq_P_full(cfg, p.plant, p.spec, m, workers=workers),
        "assumption1": lambda m: check_assumption1(p.spec, m, workers=workers),
    }
    for q in args.ineq:
        mesh = MESH_PRESETS[q]("paper")
        print(f"{q}: {mesh.total} points on {workers} worker(s)", flush=True)
        rep = checks[q](mesh).to_dict()
        with open(os.path.join(args.out, f"certificate_{q}.json"), "w") as fh:
            json.dump(rep, fh, indent=2)
        print(f"  worst margin {rep['worst_margin']:.6g} at {rep['argmax_point']}, "
              f"{'pass' if rep['pass'] else 'FAIL'}, {rep['wall_time_s']:.0f} s", flush=True)
