"""Batch command-line driver.

    shapeoc example volume-circle --out volume.json
    shapeoc run volume.json --out out/volume
    shapeoc check-grad volume.json

Exit codes: 0 when a solve finishes (the report's ``termination`` says
whether it converged, stalled or ran out of iterations), 1 when a check
fails, 2 for bad input and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import BlowUpError, SchemaError, ShapeOCError, SingularConstraintError
from .experiments import (EXAMPLES, check_gradient, example_config, oracle_compare, run, shoot,
                          with_overrides)
from .io import (deform_grid, json_text, read_config, shape_to_dict, write_config, write_grid,
                 write_report, write_trajectory)

GRAD_TOL = 1e-3
ORACLE_TOL = 1e-2


def _load(args):
    path = Path(args.config)
    config = read_config(path)
    config = with_overrides(config, steps=args.steps, seed=args.seed, out=args.out)
    return config, path.parent


def _outdir(config):
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    config, base = _load(args)
    result = run(config, base)
    out = _outdir(config)
    traj, problem = result.trajectory, result.problem
    write_trajectory(traj, out / "trajectory.csv", problem.q0.groups)
    if problem.q0.dim <= 3:
        box = config.grid.box
        grid = deform_grid(traj, problem.metric, box, config.grid.m, problem.constraints,
                           state=problem.q0)
        write_grid(grid, out / "grid.csv")
    final = problem.q0.with_points(traj.q[-1])
    (out / "final_shape.json").write_text(json_text(shape_to_dict(final)))
    write_config(config, out / "config.json")
    write_report(result.report, out / "report.json",
                 {"name": config.name, "seed": config.seed, "steps": config.options.steps,
                  "diagnostics": result.diagnostics})
    r = result.report
    print(f"{config.name}: {r.termination} after {r.iterations} iterations, "
          f"objective {r.objective:.6g} (kinetic {r.kinetic:.6g}, attachment {r.attachment:.6g}), "
          f"max violation {r.max_violation:.3g}")
    for key, value in sorted(result.diagnostics.items()):
        print(f"  {key}: {value:.6g}")
    print(f"outputs written to {out}")
    return 0


def cmd_shoot(args) -> int:
    config, base = _load(args)
    problem, traj, value = shoot(config, base)
    out = _outdir(config)
    write_trajectory(traj, out / "trajectory.csv", problem.q0.groups)
    report = {"name": config.name, "objective": value, "energy_drift": traj.energy_drift(),
              "max_violation": float(traj.violation.max()), "steps": traj.steps}
    write_report(report, out / "report.json")
    print(f"objective {value:.10g}, energy drift {traj.energy_drift():.3g}")
    return 0


def cmd_check_grad(args) -> int:
    config, base = _load(args)
    err, analytic, numeric = check_gradient(config, base)
    if err is None:
        print("max relative error: n/a (analytic and finite-difference gradients are both zero)")
        return 0
    print(f"max relative error: {err:.3e} over {len(analytic)} coordinates ({config.solver})")
    return 0 if err < GRAD_TOL else 1


def cmd_oracle(args) -> int:
    config, base = _load(args)
    res = oracle_compare(config, base, args.grid)
    ref = res["oracle"]
    worst = max(abs(res[k] - ref) / max(abs(ref), 1e-300) for k in ("shooting", "augmented_lagrangian"))
    res["max_relative_gap"] = worst
    print(json.dumps(res, indent=2, sort_keys=True))
    if args.out:
        out = _outdir(config)
        write_report(res, out / "oracle.json")
    return 0 if worst < ORACLE_TOL else 1


def cmd_example(args) -> int:
    data = example_config(args.name)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.steps is not None:
        data.setdefault("options", {})["steps"] = args.steps
    if args.out:
        write_config(data, args.out)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(json_text(data))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapeoc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (overrides the config)"):
        p.add_argument("--out", default=None, help=out_help)
        p.add_argument("--seed", type=int, default=None, help="random seed override")
        p.add_argument("--steps", type=int, default=None, help="number of time steps override")

    for name, func, help_ in (("run", cmd_run, "solve the configured matching problem"),
                              ("shoot", cmd_shoot, "integrate one geodesic from the configured p0"),
                              ("check-grad", cmd_check_grad, "compare gradients to finite differences"),
                              ("oracle", cmd_oracle, "compare solvers with the brute-force oracle")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment config (JSON)")
        common(p)
        if name == "oracle":
            p.add_argument("--grid", type=int, default=11, help="oracle grid resolution")
        p.set_defaults(func=func)
    p = sub.add_parser("example", help="emit a built-in config")
    p.add_argument("name", choices=sorted(EXAMPLES))
    common(p, "file to write (stdout if omitted)")
    p.set_defaults(func=cmd_example)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BlowUpError, SingularConstraintError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ShapeOCError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
