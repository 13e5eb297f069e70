"""Matching solvers: geodesic shooting, the augmented Lagrangian loop and a brute-force oracle.

All descent runs through :func:`descend`, a monotone Armijo backtracking
method with a Barzilai-Borwein initial step.  The search direction may be a
preconditioned gradient (the AL solver uses the K_q-weighted one); the
Armijo test always uses the exact Euclidean gradient, so every accepted step
decreases the working objective.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg

from .errors import InvalidInputError
from .geodesics import (Trajectory, backward_sweep, controlled_adjoint, flow_controlled,
                        geodesic_rhs, integrate_geodesic, kinetic_energy)
from .shapes import MatchProblem


@dataclass
class ArmijoOptions:
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    initial_step: float = 1.0
    bb_step: bool = True


@dataclass
class ALOptions:
    mu0: float = 1.0
    mu_shrink: float = 0.5
    mu_min: float = 1e-6
    constraint_tol: float = 1e-6


@dataclass
class SolverOptions:
    max_outer_iters: int = 30
    max_inner_iters: int = 300
    grad_tol: float = 1e-6
    steps: int = 50
    precondition_reg: float = 1e-3
    armijo: ArmijoOptions = field(default_factory=ArmijoOptions)
    al: ALOptions = field(default_factory=ALOptions)

    def __post_init__(self):
        a, al = self.armijo, self.al
        positive = [self.max_outer_iters, self.max_inner_iters, self.grad_tol, self.steps,
                    a.c1, a.max_backtracks, a.initial_step, al.mu0, al.mu_min, al.constraint_tol]
        if not all(v > 0 for v in positive) or self.precondition_reg < 0:
            raise InvalidInputError("solver options must be positive")
        if not (0 < a.shrink < 1 and 0 < al.mu_shrink < 1 and a.c1 < 1):
            raise InvalidInputError("shrink factors and c1 must lie in (0, 1)")


@dataclass
class SolveReport:
    solver: str
    objective: float
    kinetic: float
    attachment: float
    max_violation: float
    iterations: int
    grad_norms: list
    objectives: list
    termination: str
    mu_history: list = field(default_factory=list)
    lam_history: list = field(default_factory=list)
    outer_iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def as_dict(self) -> dict:
        return {
            "solver": self.solver,
            "termination": self.termination,
            "objective": self.objective,
            "kinetic": self.kinetic,
            "attachment": self.attachment,
            "max_violation": self.max_violation,
            "iterations": self.iterations,
            "outer_iterations": self.outer_iterations,
            "grad_norms": list(self.grad_norms),
            "objectives": list(self.objectives),
            "mu_history": list(self.mu_history),
            "lam_history": list(self.lam_history),
        }


# ---------------------------------------------------------------- descent


class Point(NamedTuple):
    x: np.ndarray
    value: float
    data: object


class DescentResult(NamedTuple):
    point: Point
    grad: np.ndarray
    direction: np.ndarray
    iterations: int
    grad_norms: list
    objectives: list
    termination: str


def _slope_norm(g, d):
    return float(np.sqrt(max(float(np.sum(g * d)), 0.0)))


def descend(evaluate: Callable, gradient: Callable, x0, opts: SolverOptions, max_iters=None,
            tol_reference=None, measure: Callable = _slope_norm) -> DescentResult:
    """Monotone Armijo descent.

    ``evaluate(x) -> (value, data)`` and ``gradient(point) -> (g, d)`` where g
    is the Euclidean gradient and d the search direction (x moves along -d).
    Stops when measure(g, d) <= grad_tol * (1 + reference), the reference
    being the first iterate's value unless ``tol_reference`` is given; the
    default measure is sqrt(g.d), the dual norm of the preconditioned step.
    """
    arm = opts.armijo
    max_iters = opts.max_inner_iters if max_iters is None else max_iters
    x = np.array(x0, dtype=float)
    point = Point(x, *evaluate(x))
    g, d = gradient(point)
    if float(np.sum(g * d)) <= 0.0:
        d = g
    gn = measure(g, d)
    ref = gn if tol_reference is None else tol_reference
    norms, values = [gn], [point.value]
    prev = None
    for it in range(max_iters + 1):
        if gn <= opts.grad_tol * (1.0 + ref):
            return DescentResult(point, g, d, it, norms, values, "converged")
        if it == max_iters:
            break
        slope = float(np.sum(g * d))
        t = arm.initial_step
        if arm.bb_step and prev is not None:
            # preconditioned BB1: s^T P^-1 s / s^T y with P^-1 d_prev = g_prev
            t_prev, g_prev, d_prev = prev
            s = -t_prev * d_prev
            sy = float(np.sum(s * (g - g_prev)))
            if sy > 0:
                t = t_prev ** 2 * float(np.sum(g_prev * d_prev)) / sy
            else:
                t = 2.0 * t_prev
            t = float(np.clip(t, 1e-12, 1e12))
        accepted = None
        for _ in range(arm.max_backtracks + 1):
            trial = x - t * d
            try:
                val, data = evaluate(trial)
            except (FloatingPointError, ArithmeticError):
                val, data = np.inf, None
            if np.isfinite(val) and val <= point.value - arm.c1 * t * slope and val < point.value:
                accepted = Point(trial, val, data)
                break
            t *= arm.shrink
        if accepted is None:
            return DescentResult(point, g, d, it, norms, values, "stalled")
        prev = (t, g, d)
        point, x = accepted, accepted.x
        g, d = gradient(point)
        if float(np.sum(g * d)) <= 0.0:
            d = g
        gn = measure(g, d)
        norms.append(gn)
        values.append(point.value)
    return DescentResult(point, g, d, max_iters, norms, values, "max_iters")


# ---------------------------------------------------------------- shooting


def _check_momentum(problem, p0):
    p0 = np.asarray(p0, dtype=float)
    if p0.size != problem.q0.points.size:
        raise InvalidInputError("p0 must have the shape of q0")
    p0 = p0.reshape(problem.q0.points.shape)
    if not np.all(np.isfinite(p0)):
        raise InvalidInputError("p0 must be finite")
    return p0


def _shoot(problem: MatchProblem, p0, steps):
    traj = integrate_geodesic(problem.metric, problem.constraints, problem.q0.points, p0, steps)
    g, _ = problem.data_term(traj.q[-1])
    return float(traj.energy[0]) + g, traj


def _shoot_grad(problem: MatchProblem, p0, traj):
    _, dg = problem.data_term(traj.q[-1])
    back = backward_sweep(problem.metric, problem.constraints, traj, dg)
    rhs = geodesic_rhs(problem.metric, problem.constraints, problem.q0.points, p0)
    # grad of 1/2 p^T pi^T K pi p is K pi p = qdot(0)
    return rhs.qdot + back.alpha


def shooting_objective_grad(problem: MatchProblem, p0, opts: Optional[SolverOptions] = None):
    """Reduced objective J(p0) = h(q0, p0) + g(q(1)), its gradient and the geodesic."""
    opts = opts or SolverOptions()
    p0 = _check_momentum(problem, p0)
    value, traj = _shoot(problem, p0, opts.steps)
    return value, _shoot_grad(problem, p0, traj), traj


def _report_from_traj(solver, problem, traj, result, **extra):
    kin = kinetic_energy(traj)
    att, _ = problem.data_term(traj.q[-1])
    viol = float(np.max(traj.violation)) if traj.violation is not None else 0.0
    return SolveReport(solver, kin + att, kin, att, viol, result.iterations, result.grad_norms,
                       result.objectives, result.termination, **extra)


def _kernel_preconditioner(problem, reg):
    """g -> (K_{q0} + reg * mean(diag K) I)^-1 g; the identity when reg <= 0."""
    if reg <= 0:
        return lambda g: g
    k = problem.metric.at(problem.q0.points).matrix()
    k[np.diag_indices_from(k)] += reg * float(np.mean(np.diag(k)))
    factor = scipy.linalg.cho_factor(k, lower=True, check_finite=False)
    return lambda g: scipy.linalg.cho_solve(factor, g, check_finite=False)


def minimize_shooting(problem: MatchProblem, p0_init=None, opts: Optional[SolverOptions] = None):
    """Gradient descent on the initial momentum.  Returns (p0, trajectory, report)."""
    opts = opts or SolverOptions()
    shape = problem.q0.points.shape
    p0 = np.zeros(shape) if p0_init is None else _check_momentum(problem, p0_init)

    def evaluate(x):
        return _shoot(problem, x.reshape(shape), opts.steps)

    precond = _kernel_preconditioner(problem, opts.precondition_reg)

    def gradient(pt):
        g = _shoot_grad(problem, pt.x.reshape(shape), pt.data).ravel()
        return g, precond(g)

    res = descend(evaluate, gradient, p0.ravel(), opts,
                  measure=lambda g, d: float(np.linalg.norm(g)))
    traj = res.point.data
    report = _report_from_traj("shooting", problem, traj, res)
    return res.point.x.reshape(shape), traj, report


# ---------------------------------------------------------------- augmented Lagrangian


class ALEvaluation(NamedTuple):
    value: float
    grad: np.ndarray
    direction: np.ndarray
    traj: Trajectory
    adjoint: np.ndarray


def _al_value(problem, u, lam, mu):
    cs = problem.constraints
    traj = flow_controlled(problem.metric, problem.q0.points, u, cs=cs)
    value = kinetic_energy(traj) + problem.data_term(traj.q[-1])[0]
    if cs:
        c = traj.meta["cvals"]
        value += traj.dt * float(np.sum(-lam * c + c * c / (2.0 * mu)))
    return value, traj


def _al_grad(problem, traj, lam, mu, reg=None):
    metric, cs = problem.metric, problem.constraints
    u = traj.u
    steps, h = traj.steps, traj.dt
    node_q = np.zeros_like(traj.q)
    ugrad = np.zeros_like(u)
    cdir = np.zeros_like(u)
    cvals = traj.meta.get("cvals")
    kstates = traj.stages[1]
    kqs = [st[0] for st in kstates[:-1]] + [kstates[-1]]
    mids = traj.stages[0][:, 1]
    blocks = []
    for i in range(steps):
        for j in (i, i + 1):
            node_q[j] += 0.25 * h * kqs[j].grad_quadratic(u[i], u[i])
            ugrad[i] += 0.5 * h * kqs[j].apply(u[i])
        if cs:
            # penalty sampled at m = q_i + h/2 K_{q_i} u_i; chain through m
            m, km = mids[i], kstates[i][1]
            r = cvals[i] / mu - lam[i]
            w = h * cs.kinetic_grad(m, km, r, u[i])
            node_q[i] += w + 0.5 * h * kqs[i].grad_quadratic(w, u[i])
            g_rows = cs.kinetic(m, km)
            ugrad[i] += 0.5 * h * kqs[i].apply(w) + h * (r @ g_rows).reshape(u[i].shape)
            if reg is None:
                cdir[i] += (r @ cs.matrix(m, metric)).reshape(u[i].shape)
            blocks.append(g_rows)
    _, dg = problem.data_term(traj.q[-1])
    qbar, ubar = controlled_adjoint(metric, traj, dg, node_q)
    p = -qbar
    phat = 0.5 * (p[:-1] + p[1:])
    grad = ubar + ugrad
    if reg is None:
        return grad, u + cdir - phat, p
    return grad, _metric_step(grad, kstates, blocks, mu, h, reg), p


def _metric_step(grad, kstates, blocks, mu, h, reg):
    """Per step, solve (h (K + reg I) + (h / mu) G^T G) d = g at the midpoint state."""
    out = np.empty_like(grad)
    for i in range(grad.shape[0]):
        m = kstates[i][1].matrix()
        m[np.diag_indices_from(m)] += reg * float(np.mean(np.diag(m)))
        if blocks:
            m += blocks[i].T @ blocks[i] / mu
        out[i] = scipy.linalg.solve(h * m, grad[i].ravel(), assume_a="pos",
                                    check_finite=False).reshape(grad[i].shape)
    return out


def al_gradient(problem: MatchProblem, u, lam=None, mu: float = 1.0,
                opts: Optional[SolverOptions] = None) -> ALEvaluation:
    """Augmented Lagrangian value, exact gradient in u and the K-weighted direction.

    ``u`` has shape (N, n, d) and ``lam`` shape (N, k), one multiplier per
    step, paired with the constraint sampled at the step's midpoint stage.
    ``grad`` is the Euclidean gradient of the discrete objective;
    ``direction`` is u + C^T(Gu/mu - lam) - p with p averaged over the step.
    """
    u = np.asarray(u, dtype=float)
    k = problem.n_constraints
    lam = np.zeros((u.shape[0], k)) if lam is None else np.asarray(lam, dtype=float)
    if lam.shape != (u.shape[0], k):
        raise InvalidInputError(f"multipliers must have shape {(u.shape[0], k)}")
    value, traj = _al_value(problem, u, lam, mu)
    grad, direction, p = _al_grad(problem, traj, lam, mu)
    return ALEvaluation(value, grad, direction, traj, p)


def unconstrained_control_gradient(problem: MatchProblem, u) -> ALEvaluation:
    """Value, gradient and u - p direction of J(u) = int 1/2 u^T K u + g, ignoring constraints."""
    u = np.asarray(u, dtype=float)
    metric = problem.metric
    traj = flow_controlled(metric, problem.q0.points, u)
    value = kinetic_energy(traj) + problem.data_term(traj.q[-1])[0]
    h = traj.dt
    node_q = np.zeros_like(traj.q)
    grad = np.zeros_like(u)
    kstates = traj.stages[1]
    for i in range(traj.steps):
        for j in (i, i + 1):
            kq = kstates[j][0] if j < traj.steps else kstates[-1]
            node_q[j] += 0.25 * h * kq.grad_quadratic(u[i], u[i])
            grad[i] += 0.5 * h * kq.apply(u[i])
    qbar, ubar = controlled_adjoint(metric, traj, problem.data_term(traj.q[-1])[1], node_q)
    p = -qbar
    return ALEvaluation(value, grad + ubar, u - 0.5 * (p[:-1] + p[1:]), traj, p)


def _violation(traj):
    c = traj.meta.get("cvals")
    if c is None or c.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(c, axis=1)))


def minimize_augmented_lagrangian(problem: MatchProblem, opts: Optional[SolverOptions] = None,
                                  u_init=None):
    """Outer multiplier/penalty loop around inner Armijo descent on the controls.

    Returns (u, lam, trajectory, report).
    """
    opts = opts or SolverOptions()
    al = opts.al
    n, d = problem.q0.points.shape
    steps = opts.steps
    k = problem.n_constraints
    u = np.zeros((steps, n, d)) if u_init is None else np.array(u_init, dtype=float)
    lam = np.zeros((steps, k))
    mu = al.mu0
    tol = al.constraint_tol * problem.scale
    shape = u.shape
    state = {"lam": lam, "mu": mu}

    def evaluate(x):
        return _al_value(problem, x.reshape(shape), state["lam"], state["mu"])

    def gradient(pt):
        g, dvec, _ = _al_grad(problem, pt.data, state["lam"], state["mu"], opts.precondition_reg)
        return g.ravel(), dvec.ravel()

    first = None
    prev_viol = _violation(flow_controlled(problem.metric, problem.q0.points, u,
                                           cs=problem.constraints)) if k else 0.0
    iterations, norms, values = 0, [], []
    mu_hist, lam_hist = [], []
    termination = "max_iters"
    outer = 0
    traj = None
    for outer in range(1, opts.max_outer_iters + 1):
        res = descend(evaluate, gradient, u.ravel(), opts, tol_reference=first)
        if first is None:
            first = res.grad_norms[0]
        iterations += res.iterations
        norms.extend(res.grad_norms)
        values.extend(res.objectives)
        u = res.point.x.reshape(shape)
        traj = res.point.data
        viol = _violation(traj)
        mu_hist.append(state["mu"])
        lam_hist.append(float(np.max(np.abs(state["lam"]))) if k else 0.0)
        inner_ok = res.termination == "converged"
        if viol <= tol and inner_ok:
            termination = "converged"
            break
        if k:
            state["lam"] = state["lam"] - traj.meta["cvals"] / state["mu"]
            if viol > prev_viol / 10.0:
                state["mu"] = max(al.mu_min, al.mu_shrink * state["mu"])
            prev_viol = viol
        elif res.termination == "stalled":
            termination = "stalled"
            break
    else:
        termination = "max_iters"
    if termination == "max_iters" and res.termination == "stalled" and _violation(traj) <= tol:
        termination = "stalled"
    traj.lam = state["lam"].copy()
    kin = kinetic_energy(traj)
    att = problem.data_term(traj.q[-1])[0]
    report = SolveReport("augmented_lagrangian", kin + att, kin, att, _violation(traj), iterations,
                         norms, values, termination, mu_hist, lam_hist, outer)
    return u, state["lam"], traj, report


# ---------------------------------------------------------------- oracle


class OracleResult(NamedTuple):
    objective: float
    u: np.ndarray
    evaluations: int


def _null_projector(problem, q):
    cs = problem.constraints
    dim = q.size
    if not cs:
        return np.eye(dim)
    g = cs.kinetic(q, problem.metric.at(q))
    return np.eye(dim) - np.linalg.pinv(g) @ g


def brute_force_oracle(problem: MatchProblem, grid_resolution: int = 11, steps: int = 4,
                       radius: Optional[float] = None) -> OracleResult:
    """Derivative-free minimization of the discrete J over piecewise-constant controls.

    Constraints are imposed by projecting each control onto ker G at the left
    end of its step (exact for state-independent rows).  A grid over constant
    controls seeds a compass search on the full control vector.
    """
    n, d = problem.q0.points.shape
    if n * d > 4 or steps > 5:
        raise InvalidInputError("the oracle only handles n*d <= 4 and N <= 5")
    if grid_resolution < 2:
        raise InvalidInputError("grid_resolution must be at least 2")
    q0 = problem.q0.points
    radius = 2.0 * problem.scale if radius is None else radius
    count = 0

    def controls(x):
        w = x.reshape(steps, n, d)
        out = np.empty_like(w)
        q = q0
        for i in range(steps):
            out[i] = (_null_projector(problem, q) @ w[i].ravel()).reshape(n, d)
            q = flow_controlled(problem.metric, q, out[i:i + 1]).q[-1]
        return out

    def objective(x):
        nonlocal count
        count += 1
        try:
            traj = flow_controlled(problem.metric, q0, controls(x))
        except (FloatingPointError, ArithmeticError):
            return np.inf
        return kinetic_energy(traj) + problem.data_term(traj.q[-1])[0]

    axis = np.linspace(-radius, radius, grid_resolution)
    best_x, best = None, np.inf
    for combo in itertools.product(axis, repeat=n * d):
        x = np.tile(np.asarray(combo), steps)
        val = objective(x)
        if val < best:
            best_x, best = x, val
    step = axis[1] - axis[0]
    while step > 1e-9 * max(radius, 1.0):
        improved = False
        for j in range(best_x.size):
            for sgn in (1.0, -1.0):
                trial = best_x.copy()
                trial[j] += sgn * step
                val = objective(trial)
                if val < best:
                    best_x, best, improved = trial, val, True
        if not improved:
            step *= 0.5
    return OracleResult(best, controls(best_x), count)
