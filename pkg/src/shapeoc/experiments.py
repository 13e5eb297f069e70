"""Problem construction from configs, built-in example setups and the batch drivers.

The drivers return plain results; :mod:`shapeoc.cli` handles files and exit codes.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .constraints import (ConstraintSet, FixedRows, sliding_between, stitched_between,
                          volume_constraint)
from .errors import InvalidInputError, SchemaError
from .geodesics import flow_controlled, integrate_geodesic
from .io import ConstraintConfig, ExperimentConfig, GroupSpec, config_from_dict, read_shape
from .kernels import KernelSpec, Metric
from .optim import (al_gradient, brute_force_oracle, minimize_augmented_lagrangian,
                    minimize_shooting, shooting_objective_grad)
from .shapes import (LandmarkState, MatchProblem, circle_shape, ellipse_shape, flower_shape,
                     polygon_volume)

GENERATORS = ("circle", "ellipse", "flower")
FD_FLOOR = 1e-8


def _generate(spec: GroupSpec) -> np.ndarray:
    if spec.n is None:
        raise SchemaError("generator needs n", field="n")
    center = np.asarray(spec.center, dtype=float)
    if spec.generator == "circle":
        pts = circle_shape(spec.n, (0.0, 0.0), spec.radius).points
    elif spec.generator == "ellipse":
        pts = ellipse_shape(spec.n, (0.0, 0.0), spec.a, spec.b).points
    elif spec.generator == "flower":
        pts = flower_shape(spec.n, (0.0, 0.0), spec.r0, spec.amplitude, spec.petals).points
    else:
        raise SchemaError(f"unknown generator {spec.generator!r}; use one of {GENERATORS}",
                          field="generator")
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    return pts @ np.array([[c, s], [-s, c]]) + center


def build_state(specs, seed: int = 0, base_dir=".") -> LandmarkState:
    """Assemble a grouped state from group specs; ``copy`` duplicates an earlier group."""
    rng = np.random.default_rng(seed)
    blocks, names = {}, []
    for spec in specs:
        if spec.name in blocks:
            raise SchemaError(f"duplicate group {spec.name!r}", field="name")
        sources = [spec.generator is not None, spec.points is not None, spec.copy is not None,
                   spec.file is not None]
        if sum(sources) != 1:
            raise SchemaError(f"group {spec.name!r} needs exactly one of generator, points, copy, file",
                              field=spec.name)
        if spec.generator is not None:
            pts = _generate(spec)
        elif spec.points is not None:
            pts = np.atleast_2d(np.asarray(spec.points, dtype=float))
        elif spec.copy is not None:
            if spec.copy not in blocks:
                raise SchemaError(f"group {spec.name!r} copies unknown group {spec.copy!r}", field="copy")
            pts = blocks[spec.copy].copy()
        else:
            path = Path(spec.file)
            shape = read_shape(path if path.is_absolute() else Path(base_dir) / path)
            pts = shape.points.copy()
        if spec.noise and spec.copy is None:
            pts = pts + spec.noise * rng.standard_normal(pts.shape)
        blocks[spec.name] = pts
        names.append(spec.name)
    if not names:
        raise SchemaError("no groups given", field="q0")
    groups, start = {}, 0
    for name in names:
        groups[name] = np.arange(start, start + len(blocks[name]))
        start += len(blocks[name])
    return LandmarkState(np.vstack([blocks[k] for k in names]), groups)


def _constraint(cfg: ConstraintConfig, state: LandmarkState):
    kind = cfg.type
    if kind == "volume":
        return volume_constraint(state, cfg.group)
    if kind in ("stitched", "sliding"):
        if cfg.shape is None or cfg.background is None:
            raise SchemaError(f"{kind} constraint needs shape and background", field="shape")
        make = stitched_between if kind == "stitched" else sliding_between
        return make(state, cfg.shape, cfg.background)
    if kind == "fixed":
        if cfg.rows is None:
            raise SchemaError("fixed constraint needs rows", field="rows")
        return FixedRows(cfg.rows)
    raise SchemaError(f"unknown constraint type {kind!r}", field="type")


def build_problem(config: ExperimentConfig, base_dir=".") -> MatchProblem:
    q0 = build_state(config.q0, config.seed, base_dir)
    target = build_state(config.target, config.seed + 1, base_dir)
    assignment = []
    for k in config.kernels:
        try:
            spec = KernelSpec(k.family, k.sigma)
        except InvalidInputError as exc:
            raise SchemaError(str(exc), field="kernels") from None
        assignment.append((spec, k.groups if k.groups is not None else list(q0.groups)))
    try:
        metric = Metric.from_groups(q0, assignment)
    except InvalidInputError as exc:
        raise SchemaError(str(exc), field="kernels") from None
    cs = ConstraintSet([_constraint(c, q0) for c in config.constraints]) if config.constraints else None
    return MatchProblem(metric, q0, target, config.weight, cs, config.name)


# ---------------------------------------------------------------- built-in examples


def _volume_circle():
    return {
        "name": "volume-circle",
        "q0": [{"name": "shape", "generator": "circle", "n": 32, "radius": 1.0}],
        "target": [{"name": "shape", "generator": "circle", "n": 32, "radius": 1.0,
                    "center": [2.0, 0.0]}],
        "kernels": [{"family": "gaussian", "sigma": 1.0}],
        "weight": 100.0,
        "constraints": [{"type": "volume", "group": "shape"}],
        "solver": "shooting",
        "options": {"steps": 50, "max_inner_iters": 300, "grad_tol": 1e-6},
        "output": "out/volume-circle",
        "grid": {"m": 25, "box": [[-2.0, -2.0], [4.0, 2.0]]},
    }


def _multishape(kind):
    up = {"generator": "ellipse", "n": 24, "a": 0.5, "b": 0.3}
    down = {"generator": "flower", "n": 24, "r0": 0.35, "amplitude": 0.2, "petals": 5}
    q0 = [dict(up, name="shape_up", center=[0.0, 0.45]),
          dict(down, name="shape_down", center=[0.0, -0.5]),
          {"name": "background_up", "copy": "shape_up"},
          {"name": "background_down", "copy": "shape_down"}]
    target = [dict(up, name="shape_up", center=[0.0, 0.7], a=0.55, b=0.27, rotation=0.15),
              dict(down, name="shape_down", center=[0.0, -0.75], r0=0.37, rotation=0.2),
              {"name": "background_up", "copy": "shape_up"},
              {"name": "background_down", "copy": "shape_down"}]
    options = {"steps": 50, "max_inner_iters": 200, "grad_tol": 1e-5}
    if kind == "sliding":
        options.update(max_outer_iters=8, max_inner_iters=40, grad_tol=2e-4,
                       al={"mu0": 0.03, "constraint_tol": 2e-4})
    return {
        "name": f"multishape-{kind}",
        "q0": q0,
        "target": target,
        "kernels": [{"family": "cubic", "sigma": 1.0, "groups": ["shape_up"]},
                    {"family": "cubic", "sigma": 1.0, "groups": ["shape_down"]},
                    {"family": "cubic", "sigma": 0.1, "groups": ["background_up", "background_down"]}],
        "weight": 10.0,
        "constraints": [{"type": kind, "shape": "shape_up", "background": "background_up"},
                        {"type": kind, "shape": "shape_down", "background": "background_down"}],
        "solver": "shooting" if kind == "stitched" else "augmented_lagrangian",
        "options": options,
        "output": f"out/multishape-{kind}",
        "grid": {"m": 25, "box": [[-1.2, -1.5], [1.2, 1.5]]},
    }


EXAMPLES = {
    "volume-circle": _volume_circle,
    "multishape-stitched": lambda: _multishape("stitched"),
    "multishape-sliding": lambda: _multishape("sliding"),
}


def example_config(name: str) -> dict:
    """JSON-ready dict for a built-in example."""
    try:
        return EXAMPLES[name]()
    except KeyError:
        raise InvalidInputError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}") from None


def load_example(name: str) -> ExperimentConfig:
    return config_from_dict(example_config(name))


def with_overrides(config: ExperimentConfig, steps=None, seed=None, out=None) -> ExperimentConfig:
    config = copy.deepcopy(config)
    if steps is not None:
        if steps < 1:
            raise InvalidInputError("--steps must be positive")
        config.options.steps = steps
    if seed is not None:
        config.seed = seed
    if out is not None:
        config.output = str(out)
    return config


# ---------------------------------------------------------------- drivers


@dataclass
class RunResult:
    problem: MatchProblem
    trajectory: object
    report: object
    solution: np.ndarray
    diagnostics: dict


def diagnostics(problem: MatchProblem, traj) -> dict:
    """Volume drift per group and compatibility residuals for multishape runs."""
    out = {}
    q = traj.q
    state = problem.q0
    if state.dim == 2:
        for name, idx in state.groups.items():
            if idx.size >= 3 and not name.startswith("background"):
                vols = np.array([polygon_volume(x[idx]) for x in q])
                v0 = vols[0]
                out[f"volume_drift[{name}]"] = float(np.max(np.abs(vols - v0)) / abs(v0)) if v0 else 0.0
                out[f"volume_min_ratio[{name}]"] = float(np.min(vols / v0)) if v0 else 1.0
    for name in state.groups:
        if name.startswith("background_"):
            shape = "shape_" + name[len("background_"):]
            if shape in state.groups:
                a, b = state.group_indices(shape), state.group_indices(name)
                if a.size == b.size:
                    gap = np.max(np.linalg.norm(q[:, a] - q[:, b], axis=2))
                    out[f"pair_mismatch[{shape}]"] = float(gap)
    att0, _ = problem.data_term(state.points)
    out["initial_attachment"] = float(att0)
    out["scale"] = problem.scale
    return out


def run(config: ExperimentConfig, base_dir=".") -> RunResult:
    problem = build_problem(config, base_dir)
    opts = config.options
    if config.solver == "shooting":
        p0 = None if config.p0 is None else np.asarray(config.p0, dtype=float)
        sol, traj, report = minimize_shooting(problem, p0, opts)
    else:
        sol, _, traj, report = minimize_augmented_lagrangian(problem, opts)
    return RunResult(problem, traj, report, sol, diagnostics(problem, traj))


def shoot(config: ExperimentConfig, base_dir="."):
    """One forward geodesic from the configured p0 (zero if absent)."""
    problem = build_problem(config, base_dir)
    p0 = np.zeros_like(problem.q0.points) if config.p0 is None else np.asarray(config.p0, float)
    value, _, traj = shooting_objective_grad(problem, p0, config.options)
    return problem, traj, value


def _probe(problem, config):
    rng = np.random.default_rng(config.seed)
    s = config.probe_scale * problem.scale
    shape = problem.q0.points.shape
    if config.solver == "shooting":
        if config.p0 is not None:
            return np.asarray(config.p0, dtype=float).reshape(shape)
        return s * rng.standard_normal(shape)
    return s * rng.standard_normal((config.options.steps,) + shape)


def check_gradient(config: ExperimentConfig, base_dir=".", max_coords: int = 24, eps=None):
    """Max relative error between the analytic gradient and central differences.

    Compares on at most ``max_coords`` coordinates chosen by the seed.  Returns
    (error, analytic values, finite-difference values); the error is None
    when both gradients vanish to within ``FD_FLOOR * (1 + |J|)``.
    """
    problem = build_problem(config, base_dir)
    x = _probe(problem, config)
    opts = config.options
    if config.solver == "shooting":
        def value(y):
            return shooting_objective_grad(problem, y, opts)[0]
        grad = shooting_objective_grad(problem, x, opts)[1]
    else:
        k = problem.n_constraints
        rng = np.random.default_rng(config.seed + 7)
        lam = rng.standard_normal((opts.steps, k))
        mu = 0.5

        def value(y):
            return al_gradient(problem, y, lam, mu).value
        grad = al_gradient(problem, x, lam, mu).grad
    rng = np.random.default_rng(config.seed + 3)
    flat = np.arange(x.size)
    coords = flat if x.size <= max_coords else np.sort(rng.choice(flat, max_coords, replace=False))
    h = eps if eps is not None else 1e-6 * max(1.0, float(np.max(np.abs(x))))
    analytic, numeric = [], []
    for c in coords:
        e = np.zeros(x.size)
        e[c] = h
        e = e.reshape(x.shape)
        numeric.append((value(x + e) - value(x - e)) / (2.0 * h))
        analytic.append(grad.ravel()[c])
    analytic, numeric = np.array(analytic), np.array(numeric)
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    # below this both gradients are zero up to the differencing error
    if denom <= FD_FLOOR * (1.0 + abs(value(x))):
        return None, analytic, numeric
    return float(np.max(np.abs(analytic - numeric)) / denom), analytic, numeric


def oracle_compare(config: ExperimentConfig, base_dir=".", grid_resolution: int = 11):
    """Solve with shooting, AL and the brute-force oracle on the same small instance."""
    problem = build_problem(config, base_dir)
    opts = copy.deepcopy(config.options)
    opts.steps = min(opts.steps, 5)
    _, _, shoot_report = minimize_shooting(problem, None, opts)
    _, _, _, al_report = minimize_augmented_lagrangian(problem, opts)
    orc = brute_force_oracle(problem, grid_resolution, opts.steps)
    return {"shooting": shoot_report.objective, "augmented_lagrangian": al_report.objective,
            "oracle": orc.objective, "oracle_evaluations": orc.evaluations, "steps": opts.steps}


def replay(problem: MatchProblem, traj):
    """Re-simulate a solver's output from its momentum or controls."""
    if traj.kind == "geodesic":
        return integrate_geodesic(problem.metric, problem.constraints, traj.q[0], traj.p[0], traj.steps)
    return flow_controlled(problem.metric, traj.q[0], traj.u, cs=problem.constraints)
