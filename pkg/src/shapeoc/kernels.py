"""Radial matrix kernels and the reduced operator K_q on landmark states.

Every kernel here has the form K(x, y) = gamma(|x - y| / sigma) * Id, so the
reduced operator on n landmarks in R^d is an n x n scalar matrix tensored with
Id_d.  All functions work on the scalar matrix and act on (n, d) arrays.

Multishape problems use several independent kernel fields, each acting on its
own subset of landmarks; :class:`Metric` holds that block-diagonal structure
and :meth:`Metric.at` evaluates everything needed at one state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

FAMILIES = ("gaussian", "cubic")


@dataclass(frozen=True)
class KernelSpec:
    """Radial kernel gamma(|x-y|/sigma) Id.

    ``gaussian``: gamma(t) = exp(-t^2)
    ``cubic``:    gamma(t) = (1 + t + 2t^2/5 + t^3/15) exp(-t)
    """

    family: str
    sigma: float

    def __post_init__(self):
        family = str(self.family).lower()
        if family not in FAMILIES:
            raise InvalidInputError(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "family", family)
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InvalidInputError(f"kernel sigma must be positive, got {self.sigma!r}")
        object.__setattr__(self, "sigma", float(self.sigma))

    def profile(self, t):
        t = np.asarray(t, dtype=float)
        if self.family == "gaussian":
            return np.exp(-t * t)
        return (1.0 + t + 0.4 * t * t + t ** 3 / 15.0) * np.exp(-t)

    def profile_slope(self, t):
        """gamma'(t)."""
        t = np.asarray(t, dtype=float)
        return t * self._slope_over_t(t)

    def _slope_over_t(self, t):
        # gamma'(t) / t, smooth at t = 0 for both families
        if self.family == "gaussian":
            return -2.0 * np.exp(-t * t)
        return -(0.2 + 0.2 * t + t * t / 15.0) * np.exp(-t)

    def value(self, r):
        """kappa(r) = gamma(r / sigma)."""
        return self.profile(np.asarray(r, dtype=float) / self.sigma)

    def psi(self, r):
        """kappa'(r) / r, so that grad_x kappa(|x-y|) = psi * (x - y)."""
        return self._slope_over_t(np.asarray(r, dtype=float) / self.sigma) / self.sigma ** 2


def _as_points(x, name="points"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidInputError(f"{name} must be a non-empty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def eval_kernel(spec: KernelSpec, x, y) -> np.ndarray:
    """The d x d block K(x, y)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise InvalidInputError("points must have equal dimension")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite kernel argument")
    r = np.sqrt(np.sum((x - y) ** 2))
    return float(spec.value(r)) * np.eye(x.size)


def _distances(x):
    diff = x[:, None, :] - x[None, :, :]
    return diff, np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def scalar_kq(spec: KernelSpec, points) -> np.ndarray:
    """n x n scalar kernel matrix kappa(|x_i - x_j|)."""
    x = _as_points(points)
    return spec.value(_distances(x)[1])


def assemble_kq(spec: KernelSpec, points) -> np.ndarray:
    """Dense nd x nd matrix whose (i, j) block is K(x_i, x_j)."""
    x = _as_points(points)
    return np.kron(scalar_kq(spec, x), np.eye(x.shape[1]))


def _grad_quadratic(x, psi, a, b):
    m = psi * (a @ b.T + b @ a.T)
    return x * m.sum(axis=1)[:, None] - m @ x


def _dir_deriv(x, psi, p, alpha):
    g = x @ alpha.T
    dg = np.diag(g)
    d = dg[:, None] - g - g.T + dg[None, :]
    return (psi * d) @ p


def grad_quadratic(spec: KernelSpec, points, a, b) -> np.ndarray:
    """Gradient in q of a^T K_q b, shape (n, d)."""
    x = _as_points(points)
    _, r = _distances(x)
    return _grad_quadratic(x, spec.psi(r), np.asarray(a, float).reshape(x.shape),
                           np.asarray(b, float).reshape(x.shape))


def dir_deriv_kq(spec: KernelSpec, points, p, alpha) -> np.ndarray:
    """Directional derivative d/dq (K_q p) . alpha, shape (n, d)."""
    x = _as_points(points)
    _, r = _distances(x)
    return _dir_deriv(x, spec.psi(r), np.asarray(p, float).reshape(x.shape),
                      np.asarray(alpha, float).reshape(x.shape))


def fd_step(sigma: float, points) -> float:
    return 1e-4 * sigma * (1.0 + float(np.max(np.abs(points))))


def hess_quadratic_action(spec: KernelSpec, points, p, alpha, step=None) -> np.ndarray:
    """d/dq (grad_q p^T K_q p) . alpha by central differences of the gradient."""
    x = _as_points(points)
    p = np.asarray(p, float).reshape(x.shape)
    alpha = np.asarray(alpha, float).reshape(x.shape)
    scale = np.max(np.abs(alpha))
    if scale == 0.0:
        return np.zeros_like(x)
    h = (fd_step(spec.sigma, x) if step is None else step) / scale
    plus = grad_quadratic(spec, x + h * alpha, p, p)
    minus = grad_quadratic(spec, x - h * alpha, p, p)
    return (plus - minus) / (2.0 * h)


@dataclass(frozen=True)
class Field:
    """One kernel acting on the landmarks listed in ``indices``."""

    spec: KernelSpec
    indices: np.ndarray
    groups: tuple = ()


class Metric:
    """Block-diagonal reduced operator: one kernel field per landmark subset.

    A single-shape problem has one field covering every landmark.  The fields
    must partition the landmark indices.
    """

    def __init__(self, fields: Sequence[Field], n: int):
        seen = np.zeros(n, dtype=int)
        clean = []
        for f in fields:
            idx = np.asarray(f.indices, dtype=int)
            if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
                raise InvalidInputError("kernel field indices out of range")
            seen[idx] += 1
            clean.append(Field(f.spec, idx, tuple(f.groups)))
        if not np.all(seen == 1):
            raise InvalidInputError("kernel fields must partition the landmarks")
        self.fields = tuple(clean)
        self.n = n

    @classmethod
    def single(cls, spec: KernelSpec, n: int) -> "Metric":
        return cls([Field(spec, np.arange(n))], n)

    @classmethod
    def from_groups(cls, state, assignment) -> "Metric":
        """``assignment`` is a list of (KernelSpec, [group names])."""
        fields = []
        for spec, names in assignment:
            idx = np.concatenate([state.group_indices(g) for g in names])
            fields.append(Field(spec, np.sort(idx), tuple(names)))
        return cls(fields, state.n)

    @property
    def min_sigma(self) -> float:
        return min(f.spec.sigma for f in self.fields)

    def field_of(self, index: int) -> Field:
        for f in self.fields:
            if np.any(f.indices == index):
                return f
        raise InvalidInputError(f"landmark {index} is not covered by any kernel field")

    def at(self, q) -> "KernelState":
        return KernelState(self, np.asarray(q, dtype=float))

    def fd_step(self, q) -> float:
        return fd_step(self.min_sigma, q)


class KernelState:
    """Kernel quantities of a :class:`Metric` evaluated at one state q."""

    def __init__(self, metric: Metric, q: np.ndarray):
        if q.ndim != 2 or q.shape[0] != metric.n:
            raise InvalidInputError(f"state has shape {q.shape}, metric expects {metric.n} landmarks")
        self.metric = metric
        self.q = q
        self.blocks = []
        for f in metric.fields:
            x = q[f.indices]
            _, r = _distances(x)
            self.blocks.append((f.indices, x, f.spec.value(r), f.spec.psi(r)))

    def apply(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(self.q.shape)
        out = np.empty_like(u)
        for idx, _, k, _ in self.blocks:
            out[idx] = k @ u[idx]
        return out

    def apply_columns(self, cols) -> np.ndarray:
        """K_q applied to each column of an (nd, k) matrix."""
        n, d = self.q.shape
        c = np.asarray(cols, dtype=float).reshape(n, d, -1)
        out = np.empty_like(c)
        for idx, _, k, _ in self.blocks:
            out[idx] = np.einsum("ij,jdk->idk", k, c[idx])
        return out.reshape(n * d, -1)

    def quad(self, a, b) -> float:
        return float(np.sum(np.asarray(a).reshape(self.q.shape) * self.apply(b)))

    def grad_quadratic(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(self.q.shape)
        b = np.asarray(b, dtype=float).reshape(self.q.shape)
        out = np.empty_like(a)
        for idx, x, _, psi in self.blocks:
            out[idx] = _grad_quadratic(x, psi, a[idx], b[idx])
        return out

    def dir_deriv(self, p, alpha) -> np.ndarray:
        p = np.asarray(p, dtype=float).reshape(self.q.shape)
        alpha = np.asarray(alpha, dtype=float).reshape(self.q.shape)
        out = np.empty_like(p)
        for idx, x, _, psi in self.blocks:
            out[idx] = _dir_deriv(x, psi, p[idx], alpha[idx])
        return out

    def hess_quadratic_action(self, p, alpha, step=None) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float).reshape(self.q.shape)
        scale = np.max(np.abs(alpha))
        if scale == 0.0:
            return np.zeros_like(alpha)
        h = (self.metric.fd_step(self.q) if step is None else step) / scale
        plus = self.metric.at(self.q + h * alpha).grad_quadratic(p, p)
        minus = self.metric.at(self.q - h * alpha).grad_quadratic(p, p)
        return (plus - minus) / (2.0 * h)

    def matrix(self) -> np.ndarray:
        n, d = self.q.shape
        full = np.zeros((n, n))
        for idx, _, k, _ in self.blocks:
            full[np.ix_(idx, idx)] = k
        return np.kron(full, np.eye(d))


def cross_value(spec: KernelSpec, y, x, w) -> np.ndarray:
    """Field sum_i kappa(|y - x_i|) w_i evaluated at points y, shape (m, d)."""
    diff = y[:, None, :] - x[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return spec.value(r) @ w


def cross_grad(spec: KernelSpec, y, c, x, w):
    """Gradients of sum_{a,i} kappa(|y_a - x_i|) (c_a . w_i) in y and in x."""
    diff = y[:, None, :] - x[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    m = spec.psi(r) * (c @ w.T)
    gy = np.einsum("ai,aik->ak", m, diff)
    gx = -np.einsum("ai,aik->ik", m, diff)
    return gy, gx
