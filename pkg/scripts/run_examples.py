"""Run the built-in examples and write their outputs.

    python3 scripts/run_examples.py --out results [--steps 20]

Each example gets a directory with config.json, trajectory.csv, grid.csv,
final_shape.json and report.json.  The volume example is also run with its
constraint removed for comparison.
"""
import argparse
import dataclasses
from pathlib import Path

from shapeoc.cli import main
from shapeoc.experiments import EXAMPLES, load_example
from shapeoc.io import write_config


def configs():
    for name in sorted(EXAMPLES):
        config = load_example(name)
        yield name, config
        if name == "volume-circle":
            yield name + "-free", dataclasses.replace(config, name=name + "-free", constraints=[])


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results", help="root output directory")
    parser.add_argument("--steps", type=int, default=None, help="time steps override")
    parser.add_argument("--only", nargs="*", default=None, help="subset of example names")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    for name, config in configs():
        if args.only and name not in args.only:
            continue
        path = root / f"{name}.json"
        write_config(config, path)
        argv = ["run", str(path), "--out", str(root / name)]
        if args.steps is not None:
            argv += ["--steps", str(args.steps)]
        code = main(argv)
        if code:
            raise SystemExit(code)
