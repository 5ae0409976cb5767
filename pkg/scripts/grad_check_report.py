"""Finite-difference report for every op, with the worst coordinates of the end-to-end loss.

    python3 scripts/grad_check_report.py --seeds 20
"""
import argparse

import numpy as np

from pvguard.tensor import grad_check_details
from pvguard.verify import CASES, STEPS, SUBSAMPLE, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--worst", type=int, default=5)
    args = ap.parse_args()

    for r in run_suite(seeds=args.seeds):
        print(f"{r.op:<24}{r.max_error:>12.3e} < {r.threshold:.0e}  {'PASS' if r.passed else 'FAIL'}  {r.seconds:.1f}s")

    rng = np.random.default_rng([0, 0x6C4])
    f, inputs = CASES["detector_loss"](rng, True)
    rows = sorted(grad_check_details(f, inputs, STEPS["detector_loss"], SUBSAMPLE, rng), key=lambda r: -r[4])
    print(f"\nworst detector coordinates (input, coord, analytic, numeric, rel err, step)")
    for row in rows[:args.worst]:
        print("  ", row[0], row[1], f"{row[2]:.6e}", f"{row[3]:.6e}", f"{row[4]:.2e}", row[5])


if __name__ == "__main__":
    main()
