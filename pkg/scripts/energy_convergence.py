"""Energy drift of RK4 geodesics against the number of steps.

    python3 scripts/energy_convergence.py --out drift.csv

Prints and writes one row per (case, N): the maximum deviation of the
(reduced) Hamiltonian from its initial value and the ratio to the next
refinement, which tends to 16 for a fourth-order scheme.
"""
import argparse
import csv
import sys

import numpy as np

from shapeoc.constraints import ConstraintSet, volume_constraint
from shapeoc.geodesics import integrate_geodesic
from shapeoc.kernels import KernelSpec, Metric
from shapeoc.shapes import LandmarkState, circle_shape


def instance(n, seed, momentum_scale):
    rng = np.random.default_rng(seed)
    q0 = circle_shape(n).points + 0.05 * rng.standard_normal((n, 2))
    p0 = momentum_scale * rng.standard_normal((n, 2))
    return q0, p0


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=10, help="number of landmarks")
    parser.add_argument("--seed", type=int, default=2)
    parser.add_argument("--momentum-scale", type=float, default=1.0)
    parser.add_argument("--sigma", type=float, default=1.0)
    parser.add_argument("--steps", type=int, nargs="+", default=[25, 50, 100, 200, 400])
    parser.add_argument("--out", default=None, help="CSV file (stdout only if omitted)")
    args = parser.parse_args(argv)

    q0, p0 = instance(args.n, args.seed, args.momentum_scale)
    metric = Metric.single(KernelSpec("gaussian", args.sigma), args.n)
    cases = {"free": None, "volume": ConstraintSet([volume_constraint(LandmarkState(q0))])}
    rows = []
    for case, cs in cases.items():
        drifts = [integrate_geodesic(metric, cs, q0, p0, n).energy_drift() for n in args.steps]
        for i, (n, d) in enumerate(zip(args.steps, drifts)):
            ratio = d / drifts[i + 1] if i + 1 < len(drifts) else float("nan")
            rows.append({"case": case, "steps": n, "drift": d, "ratio": ratio})

    writer = csv.DictWriter(sys.stdout, fieldnames=["case", "steps", "drift", "ratio"])
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=["case", "steps", "drift", "ratio"])
            out.writeheader()
            out.writerows(rows)


if __name__ == "__main__":
    main()
