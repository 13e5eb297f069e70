"""File formats and grid deformation.

Everything is decimal text.  Shapes, configs and reports are JSON; floats go
through ``repr`` so reading back gives the same bits.  Trajectories and grids
are CSV with 17 significant digits; a trajectory file starts with one
``#``-prefixed JSON header line.  Writers sort keys and never record wall-clock
data, so equal inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import BlowUpError, InvalidInputError, SchemaError
from .geodesics import BLOWUP, Trajectory, flow_controlled, geodesic_rhs, integrate_geodesic
from .kernels import Metric, cross_value
from .optim import SolveReport, SolverOptions
from .shapes import LandmarkState

FLOAT = ".17g"


def _fmt(x) -> str:
    return format(float(x), FLOAT)


def json_text(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if dataclasses.is_dataclass(obj):
        return _plain(dataclasses.asdict(obj))
    return obj


def _load_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None


def _line_of(text, key):
    if text is None or key is None:
        return None
    pat = re.compile(r'"' + re.escape(str(key)) + r'"\s*:')
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


# ---------------------------------------------------------------- shapes


def shape_to_dict(state: LandmarkState) -> dict:
    return {"dim": state.dim,
            "groups": [{"name": k, "points": state.points[v]} for k, v in state.groups.items()]}


def shape_from_dict(data, text=None) -> LandmarkState:
    if not isinstance(data, dict):
        raise SchemaError("shape file must hold an object")
    for key in data:
        if key not in ("dim", "groups"):
            raise SchemaError("unknown field", field=key, line=_line_of(text, key))
    for key in ("dim", "groups"):
        if key not in data:
            raise SchemaError("missing field", field=key)
    dim = data["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise SchemaError("dim must be a positive integer", field="dim", line=_line_of(text, "dim"))
    pts, groups, start = [], {}, 0
    for g in data["groups"]:
        extra = set(g) - {"name", "points"}
        if extra:
            key = sorted(extra)[0]
            raise SchemaError("unknown field", field=key, line=_line_of(text, key))
        if "name" not in g or "points" not in g:
            raise SchemaError("group needs name and points", field="name" if "name" not in g else "points")
        arr = np.asarray(g["points"], dtype=float)
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise SchemaError(f"points of group {g['name']!r} must have {dim} coordinates",
                              field="points", line=_line_of(text, "points"))
        pts.append(arr)
        groups[g["name"]] = np.arange(start, start + len(arr))
        start += len(arr)
    if not pts:
        raise SchemaError("a shape needs at least one group", field="groups")
    return LandmarkState(np.vstack(pts), groups)


def write_shape(state: LandmarkState, path) -> None:
    Path(path).write_text(json_text(shape_to_dict(state)))


def read_shape(path) -> LandmarkState:
    data, text = _load_json(path)
    return shape_from_dict(data, text)


# ---------------------------------------------------------------- configs


@dataclass
class GroupSpec:
    """One named group of landmarks: generated, listed, copied or read from a file."""

    name: str = "shape"
    generator: Optional[str] = None
    n: Optional[int] = None
    center: List[float] = field(default_factory=lambda: [0.0, 0.0])
    radius: float = 1.0
    a: float = 1.0
    b: float = 0.5
    r0: float = 1.0
    amplitude: float = 0.2
    petals: int = 5
    rotation: float = 0.0
    noise: float = 0.0
    points: Optional[List[List[float]]] = None
    copy: Optional[str] = None
    file: Optional[str] = None


@dataclass
class KernelConfig:
    family: str
    sigma: float
    groups: Optional[List[str]] = None


@dataclass
class ConstraintConfig:
    type: str
    group: Optional[str] = None
    shape: Optional[str] = None
    background: Optional[str] = None
    rows: Optional[List[List[float]]] = None


@dataclass
class GridConfig:
    m: int = 21
    box: Optional[List[List[float]]] = None


@dataclass
class ExperimentConfig:
    name: str
    q0: List[GroupSpec]
    target: List[GroupSpec]
    kernels: List[KernelConfig]
    weight: float = 1.0
    constraints: List[ConstraintConfig] = field(default_factory=list)
    solver: str = "shooting"
    options: SolverOptions = field(default_factory=SolverOptions)
    output: str = "out"
    seed: int = 0
    p0: Optional[List[List[float]]] = None
    probe_scale: float = 0.5
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise SchemaError(f"solver must be one of {SOLVERS}", field="solver")
        if not self.weight > 0:
            raise SchemaError("weight must be positive", field="weight")


SOLVERS = ("shooting", "augmented_lagrangian")


def _build(cls, data, text, where):
    if not isinstance(data, dict):
        raise SchemaError(f"expected an object for {cls.__name__}", field=where,
                          line=_line_of(text, where))
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise SchemaError("unknown field", field=key, line=_line_of(text, key))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise SchemaError("missing required field", field=f.name, line=_line_of(text, where))
            continue
        kwargs[f.name] = _convert(hints[f.name], data[f.name], text, f.name)
    try:
        return cls(**kwargs)
    except SchemaError:
        raise
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise SchemaError(str(exc), field=where, line=_line_of(text, where)) from None


def _convert(tp, value, text, name):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
        return _convert(tp, value, text, name)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, text, name)
    bad = SchemaError(f"wrong type, expected {getattr(tp, '__name__', tp)}", field=name,
                      line=_line_of(text, name))
    if origin in (list, List):
        if not isinstance(value, list):
            raise bad
        return [_convert(args[0], v, text, name) for v in value]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if tp is str:
        if not isinstance(value, str):
            raise bad
        return value
    return value


def config_from_dict(data, text=None) -> ExperimentConfig:
    return _build(ExperimentConfig, data, text, None)


def config_to_dict(config: ExperimentConfig) -> dict:
    return _plain(config)


def read_config(path) -> ExperimentConfig:
    data, text = _load_json(path)
    return config_from_dict(data, text)


def write_config(config, path) -> None:
    data = config if isinstance(config, dict) else config_to_dict(config)
    Path(path).write_text(json_text(data))


# ---------------------------------------------------------------- trajectories


def trajectory_to_text(traj: Trajectory, groups=None) -> str:
    n, d = traj.q.shape[1:]
    steps = traj.steps
    vec_name = "p" if traj.kind == "geodesic" else "u"
    vec = traj.p if traj.kind == "geodesic" else traj.node_controls()
    header = {
        "kind": traj.kind, "steps": steps, "n": n, "dim": d,
        "groups": {k: list(map(int, v)) for k, v in (groups or {}).items()},
        "columns": ["step", "t", "landmark"] + [f"q{j}" for j in range(d)]
                   + [f"{vec_name}{j}" for j in range(d)] + ["energy", "violation"],
        "multipliers": _plain(traj.lam),
        "meta": {k: _plain(v) for k, v in sorted(traj.meta.items())
                 if isinstance(v, (int, float, str, np.floating, np.integer))},
    }
    if traj.kind == "controlled":
        header["energy_right"] = _plain(traj.meta["energy_right"])
    out = _io.StringIO()
    out.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header["columns"])
    viol = traj.violation if traj.violation is not None else np.zeros(steps + 1)
    for i in range(steps + 1):
        for a in range(n):
            w.writerow([i, _fmt(traj.times[i]), a] + [_fmt(v) for v in traj.q[i, a]]
                       + [_fmt(v) for v in vec[i, a]] + [_fmt(traj.energy[i]), _fmt(viol[i])])
    return out.getvalue()


def write_trajectory(traj: Trajectory, path, groups=None) -> None:
    Path(path).write_text(trajectory_to_text(traj, groups))


def read_trajectory(path) -> Trajectory:
    """Rebuild a trajectory from its file (stage data is not stored)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise SchemaError("missing trajectory header", line=1)
    try:
        header = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bad header: {exc.msg}", line=1) from None
    steps, n, d = header["steps"], header["n"], header["dim"]
    rows = list(csv.reader(lines[2:]))
    if len(rows) != (steps + 1) * n:
        raise SchemaError(f"expected {(steps + 1) * n} rows, found {len(rows)}", line=len(lines))
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError as exc:
        raise SchemaError(f"bad number: {exc}") from None
    arr = arr.reshape(steps + 1, n, -1)
    times = arr[:, 0, 1]
    q = arr[:, :, 3:3 + d].copy()
    vec = arr[:, :, 3 + d:3 + 2 * d].copy()
    energy = arr[:, 0, 3 + 2 * d].copy()
    viol = arr[:, 0, 4 + 2 * d].copy()
    lam = np.asarray(header["multipliers"], dtype=float)
    meta = dict(header["meta"])
    if header["kind"] == "geodesic":
        return Trajectory("geodesic", times, q, energy, lam, p=vec, violation=viol, meta=meta)
    meta["energy_right"] = np.asarray(header["energy_right"], dtype=float)
    return Trajectory("controlled", times, q, energy, lam, u=vec[:-1], violation=viol, meta=meta)


# ---------------------------------------------------------------- reports


def write_report(report, path, extra=None) -> None:
    data = report.as_dict() if isinstance(report, SolveReport) else dict(report)
    if extra:
        data.update(extra)
    Path(path).write_text(json_text(data))


def read_report(path) -> dict:
    return _load_json(path)[0]


# ---------------------------------------------------------------- grids


@dataclass
class GridSample:
    box: np.ndarray
    m: int
    start: np.ndarray
    end: np.ndarray
    region: np.ndarray

    @property
    def count(self) -> int:
        return self.start.shape[0]


def inside_polygon(points, poly) -> np.ndarray:
    """Even-odd rule for each point against a closed polygon."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    x1, y1 = poly[:, 0][None], poly[:, 1][None]
    x2, y2 = np.roll(poly[:, 0], -1)[None], np.roll(poly[:, 1], -1)[None]
    crosses = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return np.sum(crosses & (x < xint), axis=1) % 2 == 1


def _regions(metric: Metric, state: Optional[LandmarkState], nodes):
    """Index of the kernel field that moves each node."""
    if len(metric.fields) == 1:
        return np.zeros(len(nodes), dtype=int)
    if state is None or state.dim != 2:
        raise InvalidInputError("several kernel fields need a 2D grouped state to assign grid regions")
    background = [i for i, f in enumerate(metric.fields)
                  if f.groups and all(g.startswith("background") for g in f.groups)]
    if len(background) != 1:
        raise InvalidInputError("expected exactly one background kernel field")
    region = np.full(len(nodes), background[0])
    for i, f in enumerate(metric.fields):
        if i == background[0]:
            continue
        for g in f.groups:
            region[inside_polygon(nodes, state.group(g))] = i
    return region


def _stage_velocities(metric, cs, traj):
    """Landmark stage states and the momenta/controls carried there, per RK4 stage."""
    if traj.kind == "geodesic":
        if traj.stages is None:
            traj = integrate_geodesic(metric, cs, traj.q[0], traj.p[0], traj.steps)
        stage_q, stage_p = traj.stages
        carry = np.empty_like(stage_q)
        for i in range(traj.steps):
            for s in range(4):
                carry[i, s] = geodesic_rhs(metric, cs, stage_q[i, s], stage_p[i, s]).u
        return stage_q, carry
    if traj.stages is None:
        traj = flow_controlled(metric, traj.q[0], traj.u)
    stage_q = traj.stages[0]
    return stage_q, np.repeat(traj.u[:, None], 4, axis=1)


def deform_grid(traj: Trajectory, metric: Metric, box=None, m: int = 21, constraints=None,
                state: Optional[LandmarkState] = None, nodes=None) -> GridSample:
    """Carry an m x m grid along the velocity field that moved the landmarks.

    Each node moves with the field of the kernel region it starts in, using
    the same RK4 stage states as the landmarks, so a node placed on a landmark
    follows it.  ``nodes`` replaces the regular grid when given.
    """
    q0 = traj.q[0]
    if nodes is None:
        if m < 1:
            raise InvalidInputError("grid resolution must be positive")
        if box is None:
            lo, hi = q0.min(axis=0), q0.max(axis=0)
            pad = 0.25 * np.max(hi - lo) + 1e-12
            box = np.array([lo - pad, hi + pad])
        box = np.asarray(box, dtype=float)
        if box.shape != (2, q0.shape[1]) or q0.shape[1] > 3:
            raise InvalidInputError("grid box must be [lower corner, upper corner]")
        axes = [np.linspace(box[0, j], box[1, j], m) for j in range(q0.shape[1])]
        nodes = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    else:
        nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        box = np.array([nodes.min(axis=0), nodes.max(axis=0)])
    region = _regions(metric, state, nodes)
    stage_q, carry = _stage_velocities(metric, constraints, traj)
    h = traj.dt
    limit = BLOWUP * (1.0 + np.max(np.abs(nodes)) + np.max(np.abs(q0)))
    y = nodes.copy()
    members = [(np.flatnonzero(region == i), f) for i, f in enumerate(metric.fields)]

    def velocity(pts, i, s):
        v = np.zeros_like(pts)
        for sel, f in members:
            if sel.size:
                v[sel] = cross_value(f.spec, pts[sel], stage_q[i, s][f.indices], carry[i, s][f.indices])
        return v

    for i in range(traj.steps):
        k1 = velocity(y, i, 0)
        k2 = velocity(y + 0.5 * h * k1, i, 1)
        k3 = velocity(y + 0.5 * h * k2, i, 2)
        k4 = velocity(y + h * k3, i, 3)
        y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > limit:
            raise BlowUpError(f"grid left the finite range at step {i + 1}", i + 1)
    return GridSample(box, m, nodes, y, region)


def write_grid(grid: GridSample, path) -> None:
    out = _io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    d = grid.start.shape[1]
    w.writerow(["node", "region"] + [f"start{j}" for j in range(d)] + [f"end{j}" for j in range(d)])
    for i in range(grid.count):
        w.writerow([i, int(grid.region[i])] + [_fmt(v) for v in grid.start[i]]
                   + [_fmt(v) for v in grid.end[i]])
    Path(path).write_text(out.getvalue())


def read_grid(path):
    rows = list(csv.reader(Path(path).read_text().splitlines()[1:]))
    arr = np.array([[float(x) for x in r] for r in rows])
    d = (arr.shape[1] - 2) // 2
    return arr[:, 2:2 + d], arr[:, 2 + d:], arr[:, 1].astype(int)
