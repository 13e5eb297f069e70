"""Hamiltonian geodesic flows, controlled flows and their backward (adjoint) sweeps.

Both flows use fixed-step classical RK4 on a uniform grid of [0, 1].  The
backward sweeps are the exact adjoints of those RK4 steps, driven by the
stage states recorded during the forward pass, so the gradients they produce
are gradients of the discretized objectives.

For the Hamiltonian field f = (grad_p h, -grad_q h) the transposed Jacobian
acting on (z, alpha) equals the derivative of grad h along (-alpha, z), which
is the only second-order quantity the sweep needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .constraints import ConstraintSet, MultiplierSolve, multiplier_system, solve_spd
from .errors import BlowUpError, InvalidInputError
from .kernels import Metric

BLOWUP = 1e8
RK4_B = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)


@dataclass
class Trajectory:
    """Time-discretized path on [0, 1].

    ``kind`` is ``"geodesic"`` (momenta ``p`` at every node) or
    ``"controlled"`` (piecewise-constant controls ``u``, one per step).
    """

    kind: str
    times: np.ndarray
    q: np.ndarray
    energy: np.ndarray
    lam: np.ndarray
    p: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    violation: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)
    stages: Optional[tuple] = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def node_controls(self) -> np.ndarray:
        """Control attached to each node; the last node reuses the last step's control."""
        if self.u is None:
            raise InvalidInputError("trajectory has no controls")
        return np.concatenate([self.u, self.u[-1:]], axis=0)

    def energy_drift(self) -> float:
        e0 = self.energy[0]
        return float(np.max(np.abs(self.energy - e0)) / max(abs(e0), np.finfo(float).tiny))


@dataclass
class BackwardState:
    z: np.ndarray
    alpha: np.ndarray


class GeodesicRHS(NamedTuple):
    qdot: np.ndarray
    pdot: np.ndarray
    u: np.ndarray
    solve: MultiplierSolve


def _empty_solve():
    return MultiplierSolve(np.zeros(0), 0.0, 0.0, 1.0)


def geodesic_rhs(metric: Metric, cs: Optional[ConstraintSet], q, p, reg=None) -> GeodesicRHS:
    """Right-hand side of the (possibly constrained) reduced Hamiltonian flow."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float).reshape(q.shape)
    kq = metric.at(q)
    if not cs:
        return GeodesicRHS(kq.apply(p), -0.5 * kq.grad_quadratic(p, p), p, _empty_solve())
    c, kct, a, b = multiplier_system(cs, kq, q, p)
    sol = solve_spd(a, b, reg)
    u = p - (c.T @ sol.lam).reshape(q.shape)
    ku = kq.apply(p) - (kct @ sol.lam).reshape(q.shape)
    pdot = -0.5 * kq.grad_quadratic(u, u) + cs.dct_transpose(q, sol.lam, ku, metric)
    return GeodesicRHS(ku, pdot, u, sol)


def reduced_hamiltonian(metric: Metric, cs: Optional[ConstraintSet], q, p) -> float:
    """1/2 (pi_q p)^T K_q (pi_q p); pi is the identity without constraints."""
    rhs = geodesic_rhs(metric, cs, q, p)
    return 0.5 * float(np.sum(rhs.u * rhs.qdot))


def _check(y, limit, step):
    if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > limit:
        raise BlowUpError(f"state left the finite range at step {step}", step)


def integrate_geodesic(metric: Metric, cs: Optional[ConstraintSet], q0, p0, steps: int = 100,
                       reg=None) -> Trajectory:
    """RK4 integration of the geodesic from (q0, p0) over [0, 1]."""
    if steps < 1:
        raise InvalidInputError("need at least one time step")
    q0 = np.array(q0, dtype=float)
    p0 = np.array(p0, dtype=float).reshape(q0.shape)
    h = 1.0 / steps
    limit = BLOWUP * (1.0 + np.max(np.abs(q0)))
    n, d = q0.shape
    k = cs.rows(q0) if cs else 0
    qs = np.empty((steps + 1, n, d))
    ps = np.empty_like(qs)
    lam = np.empty((steps + 1, k))
    energy = np.empty(steps + 1)
    violation = np.empty(steps + 1)
    stage_q = np.empty((steps, 4, n, d))
    stage_p = np.empty_like(stage_q)
    max_reg, max_cond = 0.0, 1.0
    q, p = q0, p0
    qs[0], ps[0] = q, p

    def record(i, r):
        lam[i] = r.solve.lam
        energy[i] = 0.5 * float(np.sum(r.u * r.qdot))
        violation[i] = _violation(cs, metric, q, r.qdot)

    for i in range(steps):
        stage_q[i, 0], stage_p[i, 0] = q, p
        r1 = geodesic_rhs(metric, cs, q, p, reg)
        record(i, r1)
        max_reg, max_cond = max(max_reg, r1.solve.reg), max(max_cond, r1.solve.condition)
        stage_q[i, 1], stage_p[i, 1] = q + 0.5 * h * r1.qdot, p + 0.5 * h * r1.pdot
        r2 = geodesic_rhs(metric, cs, stage_q[i, 1], stage_p[i, 1], reg)
        stage_q[i, 2], stage_p[i, 2] = q + 0.5 * h * r2.qdot, p + 0.5 * h * r2.pdot
        r3 = geodesic_rhs(metric, cs, stage_q[i, 2], stage_p[i, 2], reg)
        stage_q[i, 3], stage_p[i, 3] = q + h * r3.qdot, p + h * r3.pdot
        r4 = geodesic_rhs(metric, cs, stage_q[i, 3], stage_p[i, 3], reg)
        for r in (r2, r3, r4):
            max_reg, max_cond = max(max_reg, r.solve.reg), max(max_cond, r.solve.condition)
        q = q + h / 6.0 * (r1.qdot + 2.0 * r2.qdot + 2.0 * r3.qdot + r4.qdot)
        p = p + h / 6.0 * (r1.pdot + 2.0 * r2.pdot + 2.0 * r3.pdot + r4.pdot)
        _check(q, limit, i + 1)
        _check(p, np.inf, i + 1)
        qs[i + 1], ps[i + 1] = q, p
    rlast = geodesic_rhs(metric, cs, q, p, reg)
    record(steps, rlast)
    traj = Trajectory("geodesic", np.linspace(0.0, 1.0, steps + 1), qs, energy, lam, p=ps,
                      violation=violation,
                      meta={"integrator": "rk4", "steps": steps, "max_reg": max_reg,
                            "max_condition": max_cond})
    traj.meta["energy_drift"] = traj.energy_drift()
    traj.stages = (stage_q, stage_p)
    return traj


def _violation(cs, metric, q, qdot):
    if not cs:
        return 0.0
    return float(np.linalg.norm(cs.matrix(q, metric) @ qdot.ravel()))


def flow_controlled(metric: Metric, q0, u, steps: Optional[int] = None,
                    cs: Optional[ConstraintSet] = None) -> Trajectory:
    """RK4 integration of dq/dt = K_q u with u held constant on each step.

    ``u`` has shape (N, n, d).  Each control is sampled at both ends of its
    step: ``energy[i]`` is 1/2 u_i^T K_{q_i} u_i (the last node reuses
    u_{N-1}) and ``meta["energy_right"][i]`` is 1/2 u_i^T K_{q_{i+1}} u_i.  The
    constraint is sampled once per step, at the midpoint stage state
    q_i + h/2 K_{q_i} u_i; those values G u_i are kept in ``meta["cvals"]``
    with shape (N, k).
    """
    q0 = np.array(q0, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[None]
    if steps is not None and u.shape[0] != steps:
        raise InvalidInputError(f"expected {steps} controls, got {u.shape[0]}")
    steps = u.shape[0]
    if steps < 1 or u.shape[1:] != q0.shape:
        raise InvalidInputError("controls must have shape (N, n, d)")
    h = 1.0 / steps
    limit = BLOWUP * (1.0 + np.max(np.abs(q0)))
    n, d = q0.shape
    k = cs.rows(q0) if cs else 0
    qs = np.empty((steps + 1, n, d))
    stage_q = np.empty((steps, 4, n, d))
    energy = np.empty(steps + 1)
    energy_right = np.empty(steps)
    cvals = np.zeros((steps, k))
    q = q0
    qs[0] = q
    kq = metric.at(q)
    states = []
    for i in range(steps):
        ui = u[i]
        stage_q[i, 0] = q
        k1 = kq.apply(ui)
        energy[i] = 0.5 * float(np.sum(ui * k1))
        stage_q[i, 1] = q + 0.5 * h * k1
        kmid = metric.at(stage_q[i, 1])
        if k:
            cvals[i] = cs.kinetic_value(stage_q[i, 1], kmid, ui)
        k2 = kmid.apply(ui)
        stage_q[i, 2] = q + 0.5 * h * k2
        k3state = metric.at(stage_q[i, 2])
        k3 = k3state.apply(ui)
        stage_q[i, 3] = q + h * k3
        k4state = metric.at(stage_q[i, 3])
        k4 = k4state.apply(ui)
        states.append((kq, kmid, k3state, k4state))
        q = q + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(q, limit, i + 1)
        qs[i + 1] = q
        kq = metric.at(q)
        energy_right[i] = 0.5 * float(np.sum(ui * kq.apply(ui)))
    energy[steps] = energy_right[-1]
    norms = np.linalg.norm(cvals, axis=1)
    violation = np.append(norms, norms[-1])
    traj = Trajectory("controlled", np.linspace(0.0, 1.0, steps + 1), qs, energy,
                      np.zeros((steps, k)), u=u.copy(), violation=violation,
                      meta={"integrator": "rk4", "steps": steps, "energy_right": energy_right,
                            "cvals": cvals})
    # kernel states are kept for the adjoint: per step the four stages, then the last node
    traj.stages = (stage_q, states + [kq])
    return traj


def kinetic_energy(traj: Trajectory) -> float:
    """Kinetic part of the objective.

    Geodesics conserve it, so it is the t = 0 value; controlled flows use the
    per-step trapezoid rule over the stored node energies.
    """
    if traj.kind == "geodesic":
        return float(traj.energy[0])
    right = traj.meta["energy_right"]
    return float(0.5 * traj.dt * np.sum(traj.energy[:-1] + right))


def _hamiltonian_vjp(metric, cs, q, p, wq, wp, reg=None):
    # derivative of grad h = (-pdot, qdot) along (dq, dp) = (-wp, wq)
    dq, dp = -wp, wq
    if not cs:
        kq = metric.at(q)
        zq = 0.5 * kq.hess_quadratic_action(p, dq) + kq.grad_quadratic(p, dp)
        zp = kq.dir_deriv(p, dq) + kq.apply(dp)
        return zq, zp
    if cs.constant:
        return _constant_rows_vjp(metric, cs, q, p, dq, dp, reg)
    zq = np.zeros_like(q)
    zp = np.zeros_like(q)
    sp = np.max(np.abs(dp))
    if sp > 0:
        # grad h is quadratic in p, so this central difference is exact
        s = max(np.max(np.abs(p)), 1.0) / sp
        a = geodesic_rhs(metric, cs, q, p + s * dp, reg)
        b = geodesic_rhs(metric, cs, q, p - s * dp, reg)
        zq += (b.pdot - a.pdot) / (2.0 * s)
        zp += (a.qdot - b.qdot) / (2.0 * s)
    sq = np.max(np.abs(dq))
    if sq > 0:
        t = metric.fd_step(q) / sq
        a = geodesic_rhs(metric, cs, q + t * dq, p, reg)
        b = geodesic_rhs(metric, cs, q - t * dq, p, reg)
        zq += (b.pdot - a.pdot) / (2.0 * t)
        zp += (a.qdot - b.qdot) / (2.0 * t)
    return zq, zp


def _constant_rows_vjp(metric, cs, q, p, dq, dp, reg):
    # with C independent of q, u = p - C^T A^-1 C K p has
    # du = dp - C^T A^-1 C (K dp + dK u), A = C K C^T
    kq = metric.at(q)
    c, _, a, b = multiplier_system(cs, kq, q, p)
    u = p - (c.T @ solve_spd(a, b, reg).lam).reshape(q.shape)
    rhs = c @ (kq.apply(dp) + kq.dir_deriv(u, dq)).ravel()
    du = dp - (c.T @ solve_spd(a, rhs, reg).lam).reshape(q.shape)
    zq = 0.5 * kq.hess_quadratic_action(u, dq) + kq.grad_quadratic(u, du)
    zp = kq.dir_deriv(u, dq) + kq.apply(du)
    return zq, zp


def _rk4_adjoint(ybar, stage_vjp, h):
    """One reverse RK4 step; ``stage_vjp(s, w)`` returns df(Y_s)^T w."""
    kb4 = [h * RK4_B[3] * c for c in ybar]
    y4 = stage_vjp(3, kb4)
    kb3 = [h * RK4_B[2] * c + h * s for c, s in zip(ybar, y4)]
    y3 = stage_vjp(2, kb3)
    kb2 = [h * RK4_B[1] * c + 0.5 * h * s for c, s in zip(ybar, y3)]
    y2 = stage_vjp(1, kb2)
    kb1 = [h * RK4_B[0] * c + 0.5 * h * s for c, s in zip(ybar, y2)]
    y1 = stage_vjp(0, kb1)
    new = [c + a + b + e + f for c, a, b, e, f in zip(ybar, y1, y2, y3, y4)]
    return new, (kb1, kb2, kb3, kb4)


def backward_sweep(metric: Metric, cs: Optional[ConstraintSet], traj: Trajectory, zT,
                   reg=None) -> BackwardState:
    """Adjoint of the geodesic flow: returns (z, alpha) at t = 0 for terminal data (zT, 0).

    alpha is the gradient of <zT, q(1)> with respect to p0, z the one with
    respect to q0.
    """
    if traj.kind != "geodesic" or traj.stages is None:
        raise InvalidInputError("backward_sweep needs a geodesic trajectory with stage data")
    stage_q, stage_p = traj.stages
    zT = np.asarray(zT, dtype=float).reshape(traj.q[0].shape)
    ybar = [zT.copy(), np.zeros_like(zT)]
    if not np.any(zT):
        return BackwardState(*ybar)
    h = traj.dt
    for i in range(traj.steps - 1, -1, -1):
        def vjp(s, w, i=i):
            return list(_hamiltonian_vjp(metric, cs, stage_q[i, s], stage_p[i, s], w[0], w[1], reg))
        ybar, _ = _rk4_adjoint(ybar, vjp, h)
    return BackwardState(ybar[0], ybar[1])


def controlled_adjoint(metric: Metric, traj: Trajectory, terminal, node_grad=None):
    """Adjoint of :func:`flow_controlled`.

    ``terminal`` is the gradient of the objective in q(1); ``node_grad[i]``
    (optional) is the explicit gradient in q_i of running terms attached to
    node i.  Returns ``(qbar, ubar)`` with qbar at every node (shape
    (N+1, n, d)) and ubar the gradient with respect to each step control.
    """
    if traj.kind != "controlled" or traj.stages is None:
        raise InvalidInputError("controlled_adjoint needs a controlled trajectory with stage data")
    stage_q, kstates = traj.stages
    steps = traj.steps
    h = traj.dt
    qbar = np.zeros_like(traj.q)
    ubar = np.zeros_like(traj.u)
    cur = np.asarray(terminal, dtype=float).reshape(traj.q[0].shape).copy()
    if node_grad is not None:
        cur = cur + node_grad[steps]
    qbar[steps] = cur
    for i in range(steps - 1, -1, -1):
        ui = traj.u[i]
        states = kstates[i]

        def vjp(s, w):
            return [states[s].grad_quadratic(w[0], ui)]

        (cur,), kbars = _rk4_adjoint([cur], vjp, h)
        ubar[i] = sum(states[s].apply(kbars[s][0]) for s in range(4))
        if node_grad is not None:
            cur = cur + node_grad[i]
        qbar[i] = cur
    return qbar, ubar
