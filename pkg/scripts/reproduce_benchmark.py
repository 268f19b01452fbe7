"""Regenerate every benchmark output through the command-line front-end.

    python scripts/reproduce_benchmark.py --out results

Writes ``simulate/``, ``simulate_optimal/``, ``certify/``, ``constants/`` and
``lemma3_ic{1,2,3}/`` under the output directory.  Certificates use the desk
meshes unless ``--mesh paper`` is given.
"""
import argparse
import os
import sys

from contmpc.cli import main


def run(argv):
    print("contmpc", " ".join(argv), flush=True)
    return main(argv)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--mesh", default="desk")
    ap.add_argument("--workers", default=None)
    ap.add_argument("--n-perturb", default="100")
    args = ap.parse_args()
    extra = ["--workers", args.workers] if args.workers else []
    codes = [
        run(["simulate", "--all-initial-conditions", "--out", os.path.join(args.out, "simulate")]
            + extra),
        run(["simulate", "--all-initial-conditions", "--optimal",
             "--out", os.path.join(args.out, "simulate_optimal")] + extra),
        run(["certify", "--mesh", args.mesh, "--out", os.path.join(args.out, "certify"), "-v"]
            + extra),
        run(["estimate-constants", "--mesh", args.mesh,
             "--out", os.path.join(args.out, "constants")] + extra),
    ]
    for ic in (1, 2, 3):
        codes.append(run(["verify-lemma3", "--ic", str(ic), "--n-perturb", args.n_perturb,
                          "--out", os.path.join(args.out, f"lemma3_ic{ic}"), "-v"] + extra))
    print("exit codes:", codes)
    sys.exit(max(codes))
