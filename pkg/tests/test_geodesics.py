import numpy as np
import pytest
from hypothesis import given, strategies as st

from shapeoc.constraints import ConstraintSet, FixedRows, stitched_between, volume_constraint
from shapeoc.errors import BlowUpError, InvalidInputError
from shapeoc.geodesics import (backward_sweep, controlled_adjoint, flow_controlled, geodesic_rhs,
                               integrate_geodesic, kinetic_energy, reduced_hamiltonian)
from shapeoc.kernels import Field, KernelSpec, Metric
from shapeoc.shapes import LandmarkState, circle_shape

from conftest import central_diff, rel_err, spread_points


def gaussian(n, sigma=1.0):
    return Metric.single(KernelSpec("gaussian", sigma), n)


def volume_set(q):
    return ConstraintSet([volume_constraint(LandmarkState(q))])


# ---------------------------------------------------------------- reduced Hamiltonian


def test_hamiltonian_zero_momentum(rng):
    q = rng.normal(size=(4, 2))
    assert reduced_hamiltonian(gaussian(4), None, q, np.zeros_like(q)) == 0.0
    assert reduced_hamiltonian(gaussian(4), volume_set(q), q, np.zeros_like(q)) == 0.0


def test_hamiltonian_single_landmark():
    assert reduced_hamiltonian(gaussian(1), None, [[0.3, 0.1]], [[1.0, 0.0]]) == 0.5


def test_constrained_hamiltonian_below_free(rng):
    for _ in range(20):
        q = circle_shape(6).points + 0.1 * rng.normal(size=(6, 2))
        p = rng.normal(size=q.shape)
        assert reduced_hamiltonian(gaussian(6), volume_set(q), q, p) <= reduced_hamiltonian(gaussian(6), None, q, p)


# ---------------------------------------------------------------- rhs


def test_single_landmark_rhs():
    r = geodesic_rhs(gaussian(1), None, [[1.0, 2.0]], [[0.5, -0.25]])
    np.testing.assert_array_equal(r.qdot, [[0.5, -0.25]])
    np.testing.assert_array_equal(r.pdot, 0.0)


def test_symmetric_pair_exchange_momentum():
    metric = gaussian(2)
    q = np.array([[-0.5, 0.0], [0.5, 0.0]])
    p = np.array([[1.0, 0.0], [-1.0, 0.0]])
    r = geodesic_rhs(metric, None, q, p)
    np.testing.assert_allclose(r.pdot[0], -r.pdot[1], atol=1e-15)
    assert r.pdot[0, 1] == 0.0
    fd = central_diff(lambda x: reduced_hamiltonian(metric, None, x, p), q, 1e-6)
    np.testing.assert_allclose(r.pdot, -fd, atol=1e-9)


def test_empty_set_rhs_identical(rng):
    q, p = rng.normal(size=(2, 5, 2))
    a = geodesic_rhs(gaussian(5), None, q, p)
    b = geodesic_rhs(gaussian(5), ConstraintSet(), q, p)
    np.testing.assert_array_equal(a.qdot, b.qdot)
    np.testing.assert_array_equal(a.pdot, b.pdot)


@pytest.mark.parametrize("constrained", [False, True])
def test_rhs_is_hamiltonian_gradient(constrained, rng):
    q = circle_shape(5).points + 0.1 * rng.normal(size=(5, 2))
    p = rng.normal(size=q.shape)
    metric = gaussian(5, 0.8)
    cs = volume_set(q) if constrained else None
    r = geodesic_rhs(metric, cs, q, p)
    dq = central_diff(lambda x: reduced_hamiltonian(metric, cs, x, p), q, 1e-6)
    dp = central_diff(lambda x: reduced_hamiltonian(metric, cs, q, x), p, 1e-6)
    assert rel_err(r.pdot, -dq) < 1e-7
    assert rel_err(r.qdot, dp) < 1e-7


# ---------------------------------------------------------------- integrate_geodesic


def test_zero_momentum_constant(rng):
    q = rng.normal(size=(4, 2))
    traj = integrate_geodesic(gaussian(4), None, q, np.zeros_like(q), 10)
    np.testing.assert_array_equal(traj.q, np.broadcast_to(q, traj.q.shape))
    np.testing.assert_array_equal(traj.q[0], q)


def test_single_landmark_straight_line():
    traj = integrate_geodesic(gaussian(1), None, [[0.2, -0.3]], [[1.0, 0.0]], 10)
    np.testing.assert_allclose(traj.q[-1], [[1.2, -0.3]], rtol=0, atol=1e-15)


def test_ten_landmarks_energy_order():
    rng = np.random.default_rng(1)
    q0 = spread_points(rng, 10, min_gap=0.3)
    p0 = 0.5 * rng.normal(size=q0.shape)
    metric = gaussian(10)
    d100 = integrate_geodesic(metric, None, q0, p0, 100).energy_drift()
    d200 = integrate_geodesic(metric, None, q0, p0, 200).energy_drift()
    assert d100 < 1e-8
    assert 3.5 < np.log2(d100 / d200) < 4.5


def test_stage_count_validated():
    with pytest.raises(InvalidInputError):
        integrate_geodesic(gaussian(1), None, [[0.0, 0.0]], [[1.0, 0.0]], 0)


def test_blow_up_reported():
    with pytest.raises(BlowUpError) as info:
        integrate_geodesic(gaussian(1), None, [[0.0, 0.0]], [[1e9, 0.0]], 10)
    assert info.value.step == 2


def test_linear_momentum_conserved(rng):
    q0 = spread_points(rng, 8)
    p0 = rng.normal(size=q0.shape)
    traj = integrate_geodesic(gaussian(8, 0.7), None, q0, p0, 100)
    total = traj.p.sum(axis=1)
    assert np.max(np.abs(total - total[0])) <= 1e-8 * np.linalg.norm(total[0])


@pytest.mark.parametrize("constrained", [False, True])
def test_time_reversal(constrained, rng):
    q0 = circle_shape(6).points + 0.05 * rng.normal(size=(6, 2))
    p0 = 0.5 * rng.normal(size=q0.shape)
    metric = gaussian(6, 0.8)
    cs = volume_set(q0) if constrained else None
    fwd = integrate_geodesic(metric, cs, q0, p0, 200)
    back = integrate_geodesic(metric, cs, fwd.q[-1], -fwd.p[-1], 200)
    assert np.max(np.abs(back.q[-1] - q0)) <= 1e-6 * np.max(np.abs(q0))


def test_constrained_flow_feasible(rng):
    q0 = circle_shape(8).points
    p0 = rng.normal(size=q0.shape)
    cs = volume_set(q0)
    traj = integrate_geodesic(gaussian(8), cs, q0, p0, 50)
    for q, p in zip(traj.q, traj.p):
        r = geodesic_rhs(gaussian(8), cs, q, p)
        ckp = cs.matrix(q) @ gaussian(8).at(q).apply(p).ravel()
        assert np.linalg.norm(cs.matrix(q) @ r.qdot.ravel()) <= 1e-8 * (1 + np.linalg.norm(ckp))
    assert np.max(traj.violation) < 1e-8
    assert traj.lam.shape == (51, 1)


def test_stitched_flow_energy_conserved(rng):
    n = 5
    shape = circle_shape(n, radius=0.5).points
    state = LandmarkState(np.vstack([shape, shape]), {"shape_1": np.arange(n), "background_1": np.arange(n, 2 * n)})
    metric = Metric([Field(KernelSpec("cubic", 1.0), np.arange(n)), Field(KernelSpec("cubic", 0.3), np.arange(n, 2 * n))], 2 * n)
    cs = ConstraintSet([stitched_between(state, "shape_1", "background_1")])
    traj = integrate_geodesic(metric, cs, state.points, 0.3 * rng.normal(size=(2 * n, 2)), 100)
    assert traj.energy_drift() < 1e-6


# ---------------------------------------------------------------- flow_controlled


def test_zero_control_constant(rng):
    q = rng.normal(size=(3, 2))
    traj = flow_controlled(gaussian(3), q, np.zeros((5, 3, 2)))
    np.testing.assert_array_equal(traj.q[-1], q)
    assert kinetic_energy(traj) == 0.0


def test_single_landmark_constant_control():
    u = np.tile([[0.4, -0.2]], (8, 1, 1))
    traj = flow_controlled(gaussian(1), [[0.0, 0.0]], u)
    np.testing.assert_allclose(traj.q[:, 0], np.outer(traj.times, [0.4, -0.2]), atol=1e-15)
    assert kinetic_energy(traj) == pytest.approx(0.5 * 0.2, rel=1e-14)


def test_kinetic_energy_trapezoid_recomputation(rng):
    metric = gaussian(4, 0.7)
    u = rng.normal(size=(6, 4, 2))
    traj = flow_controlled(metric, rng.normal(size=(4, 2)), u)
    h = 1.0 / 6
    total = 0.0
    for i in range(6):
        left = 0.5 * metric.at(traj.q[i]).quad(u[i], u[i])
        right = 0.5 * metric.at(traj.q[i + 1]).quad(u[i], u[i])
        total += 0.5 * h * (left + right)
    assert kinetic_energy(traj) == pytest.approx(total, rel=1e-14)


def test_control_shape_validated():
    with pytest.raises(InvalidInputError):
        flow_controlled(gaussian(2), np.zeros((2, 2)), np.zeros((3, 2, 2)), steps=4)
    with pytest.raises(InvalidInputError):
        flow_controlled(gaussian(2), np.zeros((2, 2)), np.zeros((3, 3, 2)))


def test_controlled_constraint_samples(rng):
    metric = gaussian(1)
    cs = ConstraintSet([FixedRows([[1.0, 0.0]])])
    u = rng.normal(size=(4, 1, 2))
    traj = flow_controlled(metric, [[0.0, 0.0]], u, cs=cs)
    np.testing.assert_allclose(traj.meta["cvals"][:, 0], u[:, 0, 0], rtol=1e-15)


# ---------------------------------------------------------------- backward sweeps


def test_zero_terminal_zero_adjoint(rng):
    q0, p0 = rng.normal(size=(2, 4, 2))
    traj = integrate_geodesic(gaussian(4), None, q0, p0, 10)
    back = backward_sweep(gaussian(4), None, traj, np.zeros_like(q0))
    assert np.all(back.z == 0.0) and np.all(back.alpha == 0.0)


def test_single_landmark_adjoint_is_terminal():
    traj = integrate_geodesic(gaussian(1), None, [[0.0, 0.0]], [[0.7, 0.1]], 10)
    back = backward_sweep(gaussian(1), None, traj, [[0.3, -2.0]])
    np.testing.assert_allclose(back.alpha, [[0.3, -2.0]], atol=1e-15)
    np.testing.assert_allclose(back.z, [[0.3, -2.0]], atol=1e-15)


@given(a=st.floats(-100, 100), seed=st.integers(0, 2 ** 32 - 1))
def test_sweep_linear_in_terminal(a, seed):
    rng = np.random.default_rng(seed)
    q0, p0, zt = rng.normal(size=(3, 3, 2))
    traj = integrate_geodesic(gaussian(3), None, q0, p0, 8)
    one = backward_sweep(gaussian(3), None, traj, zt)
    scaled = backward_sweep(gaussian(3), None, traj, a * zt)
    np.testing.assert_allclose(scaled.alpha, a * one.alpha, rtol=1e-12, atol=1e-12 * abs(a))
    np.testing.assert_allclose(scaled.z, a * one.z, rtol=1e-12, atol=1e-12 * abs(a))


@pytest.mark.parametrize("constrained", [False, True])
def test_sweep_differentiates_final_state(constrained, rng):
    q0 = circle_shape(5).points + 0.1 * rng.normal(size=(5, 2))
    p0 = 0.5 * rng.normal(size=q0.shape)
    w = rng.normal(size=q0.shape)
    metric = gaussian(5, 0.8)
    cs = volume_set(q0) if constrained else None
    traj = integrate_geodesic(metric, cs, q0, p0, 12)
    back = backward_sweep(metric, cs, traj, w)
    f_p = lambda x: np.sum(w * integrate_geodesic(metric, cs, q0, x, 12).q[-1])
    f_q = lambda x: np.sum(w * integrate_geodesic(metric, cs, x, p0, 12).q[-1])
    tol = 1e-3 if constrained else 1e-6
    assert rel_err(back.alpha, central_diff(f_p, p0, 1e-6)) < tol
    if not constrained:
        assert rel_err(back.z, central_diff(f_q, q0, 1e-6)) < tol


def test_controlled_adjoint_matches_differences(rng):
    metric = gaussian(3, 0.8)
    q0 = rng.normal(size=(3, 2))
    u = rng.normal(size=(4, 3, 2))
    w = rng.normal(size=(3, 2))
    traj = flow_controlled(metric, q0, u)
    qbar, ubar = controlled_adjoint(metric, traj, w)
    f = lambda x: np.sum(w * flow_controlled(metric, q0, x).q[-1])
    assert rel_err(ubar, central_diff(f, u, 1e-6)) < 1e-7
    g = lambda x: np.sum(w * flow_controlled(metric, x, u).q[-1])
    assert rel_err(qbar[0], central_diff(g, q0, 1e-6)) < 1e-7
