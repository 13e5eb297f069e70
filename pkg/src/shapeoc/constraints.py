"""Kinetic constraints C_q K_q u = 0, multipliers and the momentum projection.

A constraint provider produces a k_b x nd matrix C_q acting on flattened
(n, d) arrays (row-major, landmark-major).  Besides C_q itself, providers give

* ``kinetic``: the rows G_q = C_q K_q acting on controls,
* ``dct_action``: alpha -> d/dq (C_q^T lam) . alpha,
* ``dct_transpose``: w -> grad_q (lam^T C_q w), the transposed action,
* ``kinetic_grad``: w -> grad_q (lam^T G_q w).

Defaults derive everything from ``matrix`` (finite differences where a
derivative of C_q is needed); providers override what they can do
analytically.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import (DegenerateGeometryError, InvalidInputError, SingularConstraintError,
                     UnsupportedDimensionError)
from .kernels import KernelState, Metric, cross_grad, cross_value
from .shapes import LandmarkState, volume_gradient, volume_hessian_action

COND_LIMIT = 1e12
REG_LEVELS = (0.0, 1e-12, 1e-10, 1e-8)


def _fd_step(q):
    return 1e-4 * (1.0 + float(np.max(np.abs(q))))


class Constraint:
    """Base provider.  Subclasses implement ``count`` and ``matrix``."""

    name = "constraint"
    constant = False  # True when C_q does not depend on q

    def count(self, q) -> int:
        raise NotImplementedError

    def matrix(self, q, metric: Metric) -> np.ndarray:
        raise NotImplementedError

    def support(self, q) -> np.ndarray:
        """Landmarks whose positions C_q depends on."""
        return np.arange(q.shape[0])

    def kinetic(self, q, kq: KernelState) -> np.ndarray:
        c = self.matrix(q, kq.metric)
        return kq.apply_columns(c.T).T

    def kinetic_value(self, q, kq: KernelState, u) -> np.ndarray:
        return self.matrix(q, kq.metric) @ kq.apply(u).ravel()

    def dct_action(self, q, lam, alpha, metric: Metric) -> np.ndarray:
        alpha = np.asarray(alpha, float).reshape(q.shape)
        scale = np.max(np.abs(alpha))
        if scale == 0.0 or not np.any(lam):
            return np.zeros_like(q)
        h = _fd_step(q) / scale
        plus = self.matrix(q + h * alpha, metric).T @ lam
        minus = self.matrix(q - h * alpha, metric).T @ lam
        return ((plus - minus) / (2.0 * h)).reshape(q.shape)

    def dct_transpose(self, q, lam, w, metric: Metric) -> np.ndarray:
        out = np.zeros_like(q)
        if not np.any(lam):
            return out
        lw = np.outer(lam, np.asarray(w, float).ravel())
        h = _fd_step(q)
        for i in self.support(q):
            for c in range(q.shape[1]):
                qp, qm = q.copy(), q.copy()
                qp[i, c] += h
                qm[i, c] -= h
                diff = self.matrix(qp, metric) - self.matrix(qm, metric)
                out[i, c] = np.sum(diff * lw) / (2.0 * h)
        return out

    def kinetic_grad(self, q, kq: KernelState, lam, w) -> np.ndarray:
        c = self.matrix(q, kq.metric)
        ctl = (c.T @ lam).reshape(q.shape)
        return self.dct_transpose(q, lam, kq.apply(w), kq.metric) + kq.grad_quadratic(ctl, w)


class FixedRows(Constraint):
    """Constant rows C, e.g. freezing one velocity component."""

    constant = True

    def __init__(self, rows, name="fixed"):
        self.rows = np.atleast_2d(np.asarray(rows, dtype=float))
        self.name = name

    def count(self, q):
        return self.rows.shape[0]

    def matrix(self, q, metric=None):
        if self.rows.shape[1] != q.size:
            raise InvalidInputError(f"{self.name}: rows have {self.rows.shape[1]} columns, state has {q.size}")
        return self.rows

    def support(self, q):
        return np.arange(0)

    def dct_action(self, q, lam, alpha, metric=None):
        return np.zeros_like(q)

    def dct_transpose(self, q, lam, w, metric=None):
        return np.zeros_like(q)


class VolumeConstraint(Constraint):
    """d/dt Vol(polygon of ``group``) = 0, as the single row dVol_q."""

    def __init__(self, indices, name="volume"):
        self.indices = np.asarray(indices, dtype=int)
        self.name = name

    def count(self, q):
        return 1

    def _state(self, q):
        if q.shape[1] != 2:
            raise UnsupportedDimensionError("volume constraint needs d = 2")
        return LandmarkState(q, {"poly": self.indices, **self._rest(q)})

    def _rest(self, q):
        rest = np.setdiff1d(np.arange(q.shape[0]), self.indices)
        return {"rest": rest} if rest.size else {}

    def matrix(self, q, metric=None):
        return volume_gradient(self._state(q), "poly").reshape(1, -1)

    def support(self, q):
        return self.indices

    def dct_action(self, q, lam, alpha, metric=None):
        return float(lam[0]) * volume_hessian_action(self._state(q), alpha, "poly")

    def dct_transpose(self, q, lam, w, metric=None):
        # the shoelace Hessian is symmetric
        return self.dct_action(q, lam, w)


class StitchedConstraint(Constraint):
    """Equal velocities at paired landmarks: d rows per pair (a, b)."""

    constant = True

    def __init__(self, pairs, name="stitched"):
        self.pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        if np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise InvalidInputError("stitched pairs must join distinct landmarks")
        self.name = name

    def count(self, q):
        return q.shape[1] * len(self.pairs)

    def matrix(self, q, metric=None):
        n, d = q.shape
        if self.pairs.size and (self.pairs.min() < 0 or self.pairs.max() >= n):
            raise InvalidInputError("stitched pair index out of range")
        c = np.zeros((d * len(self.pairs), n * d))
        for r, (a, b) in enumerate(self.pairs):
            for k in range(d):
                c[d * r + k, d * a + k] = 1.0
                c[d * r + k, d * b + k] = -1.0
        return c

    def support(self, q):
        return np.arange(0)

    def dct_action(self, q, lam, alpha, metric=None):
        return np.zeros_like(q)

    def dct_transpose(self, q, lam, w, metric=None):
        return np.zeros_like(q)


class SlidingConstraint(Constraint):
    """Normal velocity agreement between a background polyline and a shape field.

    For each background segment l = [z-, z+] one row
    nu_l . (v_shape(l) - v_background(l)) with the endpoint-averaged
    velocities v(l) = (v(z-) + v(z+)) / 2 and nu_l the unit normal of
    z+ - z-.  ``v_shape`` is the shape's own kernel field evaluated at the
    background vertices.
    """

    def __init__(self, segments, shape_indices, name="sliding"):
        self.segments = np.asarray(segments, dtype=int).reshape(-1, 2)
        self.shape_indices = np.asarray(shape_indices, dtype=int)
        self.name = name

    def count(self, q):
        return len(self.segments)

    def support(self, q):
        return np.union1d(self.shape_indices, self.segments.ravel())

    def _geometry(self, q):
        if q.shape[1] != 2:
            raise UnsupportedDimensionError("sliding constraint needs d = 2")
        za, zb = q[self.segments[:, 0]], q[self.segments[:, 1]]
        e = zb - za
        length = np.sqrt(np.sum(e * e, axis=1))
        diam = float(np.max(np.ptp(q, axis=0))) or 1.0
        if np.any(length < 1e-12 * diam):
            raise DegenerateGeometryError(f"{self.name}: degenerate segment")
        nu = np.c_[e[:, 1], -e[:, 0]] / length[:, None]
        return za, zb, e, length, nu

    def _shape_spec(self, metric):
        return metric.field_of(int(self.shape_indices[0])).spec

    def _background_part(self, q, nu):
        c = np.zeros((len(self.segments), q.size))
        for r, (a, b) in enumerate(self.segments):
            c[r, 2 * a:2 * a + 2] -= 0.5 * nu[r]
            c[r, 2 * b:2 * b + 2] -= 0.5 * nu[r]
        return c

    def _spread(self, q, coef, nu):
        # coef: (k, m) scalar weights on shape landmarks -> (k, nd) rows
        c = np.zeros((len(self.segments), q.shape[0], 2))
        c[:, self.shape_indices, :] = coef[:, :, None] * nu[:, None, :]
        return c.reshape(len(self.segments), -1)

    def matrix(self, q, metric):
        za, zb, _, _, nu = self._geometry(q)
        spec = self._shape_spec(metric)
        xs = q[self.shape_indices]
        ks = spec.value(np.sqrt(np.sum((xs[:, None] - xs[None]) ** 2, axis=-1)))
        y = np.vstack([za, zb])
        ky = spec.value(np.sqrt(np.sum((y[:, None] - xs[None]) ** 2, axis=-1)))
        # interpolation weights W(y) = k(y, X) K^{-1}, exact since shape velocities are K u
        try:
            w = scipy.linalg.solve(ks, ky.T, assume_a="pos").T
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            w = np.linalg.lstsq(ks, ky.T, rcond=None)[0].T
        k = len(self.segments)
        coef = 0.5 * (w[:k] + w[k:])
        return self._spread(q, coef, nu) + self._background_part(q, nu)

    def kinetic(self, q, kq):
        za, zb, _, _, nu = self._geometry(q)
        spec = self._shape_spec(kq.metric)
        xs = q[self.shape_indices]
        k = len(self.segments)
        y = np.vstack([za, zb])
        ky = spec.value(np.sqrt(np.sum((y[:, None] - xs[None]) ** 2, axis=-1)))
        shape_part = self._spread(q, 0.5 * (ky[:k] + ky[k:]), nu)
        bg = self._background_part(q, nu)
        return shape_part + kq.apply_columns(bg.T).T

    def _mean_velocities(self, q, kq, u):
        za, zb, e, length, nu = self._geometry(q)
        spec = self._shape_spec(kq.metric)
        us = u[self.shape_indices]
        xs = q[self.shape_indices]
        k = len(self.segments)
        vs = cross_value(spec, np.vstack([za, zb]), xs, us)
        ku = kq.apply(u)
        m = 0.5 * (vs[:k] + vs[k:]) - 0.5 * (ku[self.segments[:, 0]] + ku[self.segments[:, 1]])
        return m, e, length, nu

    def kinetic_value(self, q, kq, u):
        u = np.asarray(u, float).reshape(q.shape)
        m, _, _, nu = self._mean_velocities(q, kq, u)
        return np.sum(nu * m, axis=1)

    def kinetic_grad(self, q, kq, lam, w):
        w = np.asarray(w, float).reshape(q.shape)
        lam = np.asarray(lam, float)
        m, e, length, nu = self._mean_velocities(q, kq, w)
        a, b = self.segments[:, 0], self.segments[:, 1]
        out = np.zeros_like(q)
        # through the normals
        ehat = e / length[:, None]
        rtm = np.c_[-m[:, 1], m[:, 0]]
        ge = lam[:, None] * (rtm - np.sum(nu * m, axis=1)[:, None] * ehat) / length[:, None]
        np.add.at(out, b, ge)
        np.add.at(out, a, -ge)
        # through the shape field evaluated at the segment endpoints
        spec = self._shape_spec(kq.metric)
        half = 0.5 * lam[:, None] * nu
        gy, gx = cross_grad(spec, np.vstack([q[a], q[b]]), np.vstack([half, half]),
                            q[self.shape_indices], w[self.shape_indices])
        k = len(self.segments)
        np.add.at(out, a, gy[:k])
        np.add.at(out, b, gy[k:])
        out[self.shape_indices] += gx
        # through the background field
        cvec = np.zeros_like(q)
        np.add.at(cvec, a, half)
        np.add.at(cvec, b, half)
        out -= kq.grad_quadratic(cvec, w)
        return out


class ConstraintSet:
    """Ordered stack of providers; the empty set means no constraint."""

    def __init__(self, providers: Iterable[Constraint] = ()):
        self.providers = tuple(providers)

    def __len__(self):
        return len(self.providers)

    def __bool__(self):
        return bool(self.providers)

    @property
    def constant(self) -> bool:
        return all(p.constant for p in self.providers)

    def names(self):
        return [p.name for p in self.providers]

    def rows(self, q, metric=None) -> int:
        q = _pts(q)
        return sum(p.count(q) for p in self.providers)

    def _split(self, q, lam):
        out, start = [], 0
        for p in self.providers:
            k = p.count(q)
            out.append(np.asarray(lam[start:start + k], dtype=float))
            start += k
        return out

    def matrix(self, q, metric=None) -> np.ndarray:
        q = _pts(q)
        if not self.providers:
            return np.zeros((0, q.size))
        return np.vstack([p.matrix(q, metric) for p in self.providers])

    def kinetic(self, q, kq) -> np.ndarray:
        q = _pts(q)
        if not self.providers:
            return np.zeros((0, q.size))
        return np.vstack([p.kinetic(q, kq) for p in self.providers])

    def kinetic_value(self, q, kq, u) -> np.ndarray:
        q = _pts(q)
        if not self.providers:
            return np.zeros(0)
        return np.concatenate([p.kinetic_value(q, kq, u) for p in self.providers])

    def dct_action(self, q, lam, alpha, metric=None) -> np.ndarray:
        q = _pts(q)
        out = np.zeros_like(q)
        for p, l in zip(self.providers, self._split(q, lam)):
            out += p.dct_action(q, l, alpha, metric)
        return out

    def dct_transpose(self, q, lam, w, metric=None) -> np.ndarray:
        q = _pts(q)
        out = np.zeros_like(q)
        for p, l in zip(self.providers, self._split(q, lam)):
            out += p.dct_transpose(q, l, w, metric)
        return out

    def kinetic_grad(self, q, kq, lam, w) -> np.ndarray:
        q = _pts(q)
        out = np.zeros_like(q)
        for p, l in zip(self.providers, self._split(q, lam)):
            out += p.kinetic_grad(q, kq, l, w)
        return out


def _pts(q):
    return q.points if isinstance(q, LandmarkState) else np.asarray(q, dtype=float)


def constraint_matrix(cs: ConstraintSet, q, metric=None) -> np.ndarray:
    return cs.matrix(q, metric)


def dct_lambda_action(cs: ConstraintSet, q, lam, alpha, metric=None) -> np.ndarray:
    return cs.dct_action(q, lam, alpha, metric)


def volume_constraint(state: LandmarkState, group=None) -> VolumeConstraint:
    if state.dim != 2:
        raise UnsupportedDimensionError("volume constraint needs d = 2")
    return VolumeConstraint(state.group_indices(group), name=f"volume[{group or 'all'}]")


def stitched_constraint(pairs) -> StitchedConstraint:
    return StitchedConstraint(pairs)


def stitched_between(state: LandmarkState, shape: str, background: str) -> StitchedConstraint:
    """Pair the i-th landmark of ``shape`` with the i-th landmark of ``background``."""
    a, b = state.group_indices(shape), state.group_indices(background)
    if a.size != b.size:
        raise InvalidInputError("stitched groups must have equal sizes")
    return StitchedConstraint(np.c_[a, b], name=f"stitched[{shape}~{background}]")


def sliding_constraint(segments, shape_indices) -> SlidingConstraint:
    return SlidingConstraint(segments, shape_indices)


def sliding_between(state: LandmarkState, shape: str, background: str) -> SlidingConstraint:
    """One row per edge of the closed background polygon, against the shape's field."""
    b = state.group_indices(background)
    segments = np.c_[b, np.roll(b, -1)]
    return SlidingConstraint(segments, state.group_indices(shape), name=f"sliding[{shape}~{background}]")


@dataclass
class MultiplierSolve:
    lam: np.ndarray
    residual: float
    reg: float
    condition: float


def solve_spd(a: np.ndarray, b: np.ndarray, reg=None) -> MultiplierSolve:
    """Solve (A + eps I) x = b with the escalating regularization policy."""
    k = a.shape[0]
    if k == 0:
        return MultiplierSolve(np.zeros(0), 0.0, 0.0, 1.0)
    a = 0.5 * (a + a.T)
    scale = np.trace(a) / k
    levels = [reg] if reg is not None else [lvl * scale for lvl in REG_LEVELS]
    cond = np.inf
    for i, eps in enumerate(levels):
        m = a + eps * np.eye(k) if eps else a
        try:
            factor = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            continue
        diag = np.abs(np.diag(factor[0]))
        cond = (diag.max() / diag.min()) ** 2 if diag.min() > 0 else np.inf
        if not np.isfinite(cond):
            continue
        if cond > COND_LIMIT and i < len(levels) - 1:
            continue
        lam = scipy.linalg.cho_solve(factor, b, check_finite=False)
        residual = float(np.linalg.norm(m @ lam - b))
        return MultiplierSolve(lam, residual, float(eps), float(cond))
    raise SingularConstraintError("multiplier system is singular after regularization", cond)


def multiplier_system(cs: ConstraintSet, kq: KernelState, q, p):
    """(C, K C^T, C K C^T, C K p) at state q for momentum p."""
    c = cs.matrix(q, kq.metric)
    kct = kq.apply_columns(c.T)
    return c, kct, c @ kct, c @ kq.apply(p).ravel()


def solve_lambda(cs: ConstraintSet, metric: Metric, q, p, reg=None) -> MultiplierSolve:
    q = _pts(q)
    if not cs:
        return MultiplierSolve(np.zeros(0), 0.0, 0.0, 1.0)
    _, _, a, b = multiplier_system(cs, metric.at(q), q, p)
    return solve_spd(a, b, reg)


def project_momentum(cs: ConstraintSet, metric: Metric, q, p, reg=None) -> np.ndarray:
    """pi_q p = p - C_q^T lam_{q,p}, the K_q-orthogonal projection onto the feasible set."""
    q = _pts(q)
    p = np.asarray(p, dtype=float).reshape(q.shape)
    if not cs:
        return p.copy()
    sol = solve_lambda(cs, metric, q, p, reg)
    return p - (cs.matrix(q, metric).T @ sol.lam).reshape(q.shape)
