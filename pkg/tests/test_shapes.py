import numpy as np
import pytest
from hypothesis import given, strategies as st

from shapeoc.errors import InvalidInputError, UnsupportedDimensionError
from shapeoc.kernels import KernelSpec, Metric
from shapeoc.shapes import (LandmarkState, MatchProblem, attachment, attachment_gradient, circle_shape,
                            ellipse_shape, flower_shape, multishape_attachment, polygon_volume,
                            volume_gradient, volume_hessian_action)

from conftest import central_diff, rel_err

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_state_validation():
    with pytest.raises(InvalidInputError):
        LandmarkState(np.zeros((0, 2)))
    with pytest.raises(InvalidInputError):
        LandmarkState([[0.0, np.nan]])
    with pytest.raises(InvalidInputError):
        LandmarkState(np.zeros((3, 2)), {"a": [0, 1], "b": [1, 2]})
    with pytest.raises(InvalidInputError):
        LandmarkState(np.zeros((3, 2)), {"a": [0, 1]})
    s = LandmarkState(np.zeros((3, 2)), {"a": [0, 2], "b": [1]})
    assert s.group("a").shape == (2, 2)


# ---------------------------------------------------------------- volume


def test_unit_square_area():
    assert polygon_volume(SQUARE) == 1.0


def test_triangle_area():
    assert polygon_volume([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]) == 0.5


def test_reversed_orientation_negates():
    assert polygon_volume(SQUARE[::-1]) == -1.0


def test_volume_needs_planar_polygon():
    with pytest.raises(UnsupportedDimensionError):
        polygon_volume(np.zeros((4, 3)))
    with pytest.raises(InvalidInputError):
        polygon_volume(np.zeros((2, 2)))


def test_volume_of_named_group():
    pts = np.vstack([SQUARE, 2.0 * SQUARE])
    s = LandmarkState(pts, {"small": np.arange(4), "big": np.arange(4, 8)})
    assert polygon_volume(s, "small") == 1.0
    assert polygon_volume(s, "big") == 4.0
    g = volume_gradient(s, "big")
    assert np.all(g[:4] == 0.0)


def test_square_gradient_matches_differences():
    fd = central_diff(polygon_volume, SQUARE, 1e-6)
    np.testing.assert_allclose(volume_gradient(SQUARE), fd, atol=1e-10)


def test_gradient_cyclic_formula(rng):
    q = rng.normal(size=(7, 2))
    g = volume_gradient(q)
    for i in range(7):
        nxt, prv = q[(i + 1) % 7], q[(i - 1) % 7]
        np.testing.assert_allclose(g[i], 0.5 * np.array([nxt[1] - prv[1], prv[0] - nxt[0]]), rtol=1e-15)


def test_gradient_unchanged_by_translation():
    np.testing.assert_array_equal(volume_gradient(SQUARE + 3.0), volume_gradient(SQUARE))


def test_hessian_action_matches_differences(rng):
    q, a = rng.normal(size=(2, 6, 2))
    h = 1e-6
    fd = (volume_gradient(q + h * a) - volume_gradient(q - h * a)) / (2 * h)
    np.testing.assert_allclose(volume_hessian_action(q, a), fd, atol=1e-8)


@given(n=st.integers(3, 12), k=st.integers(0, 11), shift=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
       s=st.floats(0.1, 10.0), seed=st.integers(0, 2 ** 32 - 1))
def test_volume_invariances(n, k, shift, s, seed):
    q = np.random.default_rng(seed).normal(size=(n, 2))
    v = polygon_volume(q)
    tol = 1e-12 * (1.0 + np.sum(np.abs(q)) ** 2)
    assert abs(polygon_volume(np.roll(q, k, axis=0)) - v) <= tol
    assert abs(polygon_volume(q + np.array(shift)) - v) <= 1e-11 * (1.0 + np.sum(np.abs(q) + 5) ** 2)
    assert abs(polygon_volume(s * q) - s * s * v) <= 1e-12 * s * s * (1.0 + np.sum(np.abs(q)) ** 2)


@given(n=st.integers(3, 10), seed=st.integers(0, 2 ** 32 - 1))
def test_volume_gradient_property(n, seed):
    q = np.random.default_rng(seed).normal(size=(n, 2))
    assert rel_err(volume_gradient(q), central_diff(polygon_volume, q, 1e-6)) < 1e-6


# ---------------------------------------------------------------- attachment


def test_attachment_zero_at_target(rng):
    q = rng.normal(size=(5, 2))
    assert attachment(q, q, 3.0) == 0.0
    np.testing.assert_array_equal(attachment_gradient(q, q, 3.0), 0.0)


def test_attachment_one_dimensional():
    assert attachment([[0.0]], [[2.0]], 1.0) == 4.0
    np.testing.assert_array_equal(attachment_gradient([[0.0]], [[2.0]], 1.0), [[-4.0]])


def test_attachment_translation_invariant(rng):
    q, t = rng.normal(size=(2, 6, 2))
    c = np.array([0.5, -2.0])
    assert abs(attachment(q + c, t + c, 2.0) - attachment(q, t, 2.0)) < 1e-12


def test_attachment_gradient_differences(rng):
    q, t = rng.normal(size=(2, 6, 2))
    fd = central_diff(lambda x: attachment(x, t, 2.5), q, 1e-5)
    np.testing.assert_allclose(attachment_gradient(q, t, 2.5), fd, atol=1e-8)


def test_attachment_shape_mismatch():
    with pytest.raises(InvalidInputError):
        attachment(np.zeros((3, 2)), np.zeros((4, 2)))


def _two_shape_state(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    pts = np.vstack([a, b, a, b])
    groups = {"shape_1": np.arange(3), "shape_2": np.arange(3, 7), "background_1": np.arange(7, 10),
              "background_2": np.arange(10, 14)}
    return LandmarkState(pts, groups), a, b


def test_multishape_zero_at_targets(rng):
    s, a, b = _two_shape_state(rng)
    value, grad = multishape_attachment(s, {"shape_1": a, "shape_2": b}, 2.0)
    assert value == 0.0
    assert np.all(grad == 0.0)


def test_multishape_background_only(rng):
    s, a, b = _two_shape_state(rng)
    pts = s.points.copy()
    pts[7:10] += 0.3
    moved = s.with_points(pts)
    value, _ = multishape_attachment(moved, {"shape_1": a, "shape_2": b}, 2.0)
    assert value == attachment(pts[7:10], a, 2.0)


def test_multishape_additive_and_differentiable(rng):
    s, a, b = _two_shape_state(rng)
    s = s.with_points(s.points + rng.normal(size=s.points.shape))
    targets = {"shape_1": a, "shape_2": b}
    value, grad = multishape_attachment(s, targets, 1.5)
    parts = sum(attachment(s.group(g), targets["shape_" + g[-1]], 1.5) for g in s.groups)
    assert value == pytest.approx(parts, rel=1e-15)

    def f(x):
        return multishape_attachment(s.with_points(x), targets, 1.5)[0]
    np.testing.assert_allclose(grad, central_diff(f, s.points, 1e-5), atol=1e-7)


def test_multishape_missing_group(rng):
    s, a, _ = _two_shape_state(rng)
    with pytest.raises(InvalidInputError):
        multishape_attachment(s, {"shape_9": a})


# ---------------------------------------------------------------- generators


def test_circle_four_points():
    pts = circle_shape(4, (0.0, 0.0), 1.0).points
    np.testing.assert_allclose(pts, [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-15)


def test_circle_area_converges():
    r = 1.7
    assert abs(polygon_volume(circle_shape(256, (0.3, 0.1), r)) - np.pi * r * r) < 1e-3 * np.pi * r * r


def test_flower_zero_amplitude_is_circle():
    np.testing.assert_array_equal(flower_shape(12, (1.0, 2.0), 0.5, 0.0, 5).points,
                                  circle_shape(12, (1.0, 2.0), 0.5).points)


@pytest.mark.parametrize("make", [lambda n: circle_shape(n), lambda n: ellipse_shape(n),
                                  lambda n: flower_shape(n)])
def test_generators_counter_clockwise(make):
    assert polygon_volume(make(16)) > 0.0
    with pytest.raises(InvalidInputError):
        make(2)


def test_ellipse_area():
    assert polygon_volume(ellipse_shape(512, a=2.0, b=0.5)) == pytest.approx(np.pi, rel=1e-4)


# ---------------------------------------------------------------- problem


def test_problem_layout_checked():
    q0 = circle_shape(5)
    metric = Metric.single(KernelSpec("gaussian", 1.0), 5)
    with pytest.raises(InvalidInputError):
        MatchProblem(metric, q0, circle_shape(6))
    with pytest.raises(InvalidInputError):
        MatchProblem(metric, q0, q0, weight=0.0)
    p = MatchProblem(metric, q0, q0, weight=2.0)
    assert p.data_term(q0.points)[0] == 0.0
