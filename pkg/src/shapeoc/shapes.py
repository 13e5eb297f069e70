"""Landmark states, polygon volume, data attachment and shape generators."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import InvalidInputError, UnsupportedDimensionError
from .kernels import Metric


class LandmarkState:
    """An ordered set of n points in R^d, optionally split into named groups.

    Groups must partition the indices.  A state built without groups has a
    single implicit group called ``"shape"``.
    """

    def __init__(self, points, groups: Optional[Mapping[str, object]] = None):
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidInputError("a landmark state needs an (n, d) array with n >= 1")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("landmark coordinates must be finite")
        n = pts.shape[0]
        if not groups:
            groups = {"shape": np.arange(n)}
        clean = {}
        cover = np.zeros(n, dtype=int)
        for name, idx in groups.items():
            idx = np.asarray(idx, dtype=int).ravel()
            if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
                raise InvalidInputError(f"group {name!r} has indices outside 0..{n - 1}")
            cover[idx] += 1
            clean[str(name)] = idx
        if not np.all(cover == 1):
            raise InvalidInputError("groups must partition the landmark indices")
        pts.setflags(write=False)
        self.points = pts
        self.groups = clean

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def group_indices(self, name) -> np.ndarray:
        if name is None:
            return np.arange(self.n)
        try:
            return self.groups[name]
        except KeyError:
            raise InvalidInputError(f"no group named {name!r}") from None

    def group(self, name) -> np.ndarray:
        return self.points[self.group_indices(name)]

    def with_points(self, points) -> "LandmarkState":
        return LandmarkState(points, self.groups)

    def same_layout(self, other: "LandmarkState") -> bool:
        if self.points.shape != other.points.shape or self.groups.keys() != other.groups.keys():
            return False
        return all(np.array_equal(self.groups[k], other.groups[k]) for k in self.groups)

    def __repr__(self):
        return f"LandmarkState(n={self.n}, dim={self.dim}, groups={list(self.groups)})"


def _points(q) -> np.ndarray:
    return q.points if isinstance(q, LandmarkState) else np.asarray(q, dtype=float)


def _polygon(q, group):
    pts = _points(q)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise UnsupportedDimensionError("polygon volume is only defined for d = 2")
    idx = q.group_indices(group) if isinstance(q, LandmarkState) else np.arange(pts.shape[0])
    if idx.size < 3:
        raise InvalidInputError("a polygon needs at least 3 points")
    return pts, idx


def polygon_volume(q, group=None) -> float:
    """Signed shoelace area of the closed polygon through the group's points."""
    pts, idx = _polygon(q, group)
    x, y = pts[idx, 0], pts[idx, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def volume_gradient(q, group=None) -> np.ndarray:
    """Gradient of :func:`polygon_volume` with respect to every coordinate, shape (n, 2)."""
    pts, idx = _polygon(q, group)
    sub = pts[idx]
    nxt, prv = np.roll(sub, -1, axis=0), np.roll(sub, 1, axis=0)
    out = np.zeros_like(pts)
    out[idx, 0] = 0.5 * (nxt[:, 1] - prv[:, 1])
    out[idx, 1] = 0.5 * (prv[:, 0] - nxt[:, 0])
    return out


def volume_hessian_action(q, alpha, group=None) -> np.ndarray:
    # the shoelace form is quadratic, so its Hessian is the gradient map itself
    pts, idx = _polygon(q, group)
    a = np.asarray(alpha, dtype=float).reshape(pts.shape)
    out = np.zeros_like(pts)
    out[idx] = volume_gradient(a[idx])
    return out


def attachment(q, target, c: float = 1.0) -> float:
    """(c / n) * sum_i |x_i - target_i|^2."""
    x, t = _points(q), _points(target)
    if x.shape != t.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {t.shape}")
    return float(c) / x.shape[0] * float(np.sum((x - t) ** 2))


def attachment_gradient(q, target, c: float = 1.0) -> np.ndarray:
    x, t = _points(q), _points(target)
    if x.shape != t.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {t.shape}")
    return 2.0 * float(c) / x.shape[0] * (x - t)


def default_copies(state: LandmarkState) -> dict:
    """Pair ``background_<k>`` groups with ``shape_<k>`` groups by suffix."""
    copies = {}
    for name in state.groups:
        m = re.fullmatch(r"background_(\w+)", name)
        if m and f"shape_{m.group(1)}" in state.groups:
            copies[name] = f"shape_{m.group(1)}"
    return copies


def multishape_attachment(q: LandmarkState, targets: Mapping[str, object], c: float = 1.0,
                          copies: Optional[Mapping[str, str]] = None):
    """Sum over shapes j of the attachment of shape j and of its background copy to target j.

    Returns ``(value, gradient)`` with the gradient of shape (n, d).
    """
    if copies is None:
        copies = default_copies(q)
    value = 0.0
    grad = np.zeros_like(q.points)
    by_shape = {}
    for bg, sh in copies.items():
        by_shape.setdefault(sh, []).append(bg)
    for shape, tgt in targets.items():
        tgt = np.asarray(tgt, dtype=float)
        for name in [shape] + by_shape.get(shape, []):
            idx = q.group_indices(name)
            value += attachment(q.points[idx], tgt, c)
            grad[idx] += attachment_gradient(q.points[idx], tgt, c)
    return value, grad


def _angles(n):
    if n < 3:
        raise InvalidInputError("shape generators need n >= 3")
    return 2.0 * np.pi * np.arange(n) / n


def circle_shape(n, center=(0.0, 0.0), radius=1.0) -> LandmarkState:
    th = _angles(n)
    return LandmarkState(np.asarray(center, float) + radius * np.c_[np.cos(th), np.sin(th)])


def ellipse_shape(n, center=(0.0, 0.0), a=1.0, b=0.5) -> LandmarkState:
    th = _angles(n)
    return LandmarkState(np.asarray(center, float) + np.c_[a * np.cos(th), b * np.sin(th)])


def flower_shape(n, center=(0.0, 0.0), r0=1.0, amplitude=0.2, petals=5) -> LandmarkState:
    th = _angles(n)
    r = r0 * (1.0 + amplitude * np.cos(petals * th))
    return LandmarkState(np.asarray(center, float) + r[:, None] * np.c_[np.cos(th), np.sin(th)])


@dataclass
class MatchProblem:
    """Everything needed to evaluate the matching functional.

    The data term is the sum over groups of the per-group attachment, which
    reduces to the plain attachment for a single group and to
    :func:`multishape_attachment` when each background copy's target equals
    its shape's target.
    """

    metric: Metric
    q0: LandmarkState
    target: LandmarkState
    weight: float = 1.0
    constraints: Optional[object] = None
    name: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.q0.same_layout(self.target):
            raise InvalidInputError("q0 and target must share n, d and group structure")
        if self.metric.n != self.q0.n:
            raise InvalidInputError("kernel fields do not match the number of landmarks")
        if not self.weight > 0:
            raise InvalidInputError("attachment weight must be positive")

    @property
    def n_constraints(self) -> int:
        return 0 if self.constraints is None else self.constraints.rows(self.q0.points, self.metric)

    def data_term(self, q):
        q = _points(q)
        value, grad = 0.0, np.zeros_like(q)
        for idx in self.q0.groups.values():
            t = self.target.points[idx]
            value += attachment(q[idx], t, self.weight)
            grad[idx] = attachment_gradient(q[idx], t, self.weight)
        return value, grad

    @property
    def scale(self) -> float:
        """A length scale for tolerances: the diameter of q0 and target together."""
        pts = np.vstack([self.q0.points, self.target.points])
        return float(np.max(np.ptp(pts, axis=0))) or 1.0
