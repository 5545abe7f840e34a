import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SPHERE
from magtrack.errors import ConfigError, ContractError
from magtrack.field_models import AnalyticSource
from magtrack.opt_tracker import (
    PENALTY,
    InteractiveSpace,
    OptConfig,
    dipole_objective,
    lbfgs_minimize,
    numerical_gradient,
    perturb_pose,
    solve_pose,
    track_trajectory,
    with_numeric_grad,
)
from magtrack.synth import Pose, SensorArray, random_unit_vectors, synthesize_array, synthesize_batch
from magtrack.traj_sim import angle_between

ARR = SensorArray.grid()
M = SPHERE.moment
SRC = AnalyticSource(SPHERE)


def random_pose(rng):
    return Pose(rng.uniform([-0.1, -0.1, 0.02], [0.1, 0.1, 0.15]), random_unit_vectors(rng, 1)[0])


def test_config_validation():
    with pytest.raises(ConfigError):
        OptConfig(max_iter=0)
    with pytest.raises(ConfigError):
        OptConfig(c1=1.5)
    with pytest.raises(ConfigError):
        InteractiveSpace((0, 0, 0), (0.1, 0.1, 0))


def test_objective_zero_at_truth(rng):
    pose = random_pose(rng)
    b = synthesize_array(pose, ARR, SRC)
    assert dipole_objective(pose.as_vector(), b, ARR.positions, M) < 1e-30


def test_objective_linear_scaling(rng):
    pose = random_pose(rng)
    b = synthesize_array(pose, ARR, SRC)
    assert dipole_objective(pose.as_vector(), 2 * b, ARR.positions, 2 * M) < 1e-30


def test_objective_lower_at_truth_than_offset(rng):
    for _ in range(100):
        pose = random_pose(rng)
        b = synthesize_array(pose, ARR, SRC)
        off = pose.as_vector()
        off[:3] += 0.05 * random_unit_vectors(rng, 1)[0]
        assert dipole_objective(pose.as_vector(), b, ARR.positions, M) < dipole_objective(off, b, ARR.positions, M)


def test_objective_clamped_at_sensor():
    x = np.r_[ARR.positions[3], 0, 0, 1]
    f, g = dipole_objective(x, np.zeros(48), ARR.positions, M, with_grad=True)
    assert f == PENALTY and np.all(g == 0)
    assert dipole_objective(np.r_[0, 0, 0.05, 0, 0, 0], np.zeros(48), ARR.positions, M) == PENALTY


def test_objective_length_contract():
    with pytest.raises(ContractError):
        dipole_objective(np.r_[0, 0, 0.05, 0, 0, 1], np.zeros(45), ARR.positions, M)


def test_analytic_gradient_matches_fd(rng):
    worst = 0.0
    for _ in range(100):
        pose = random_pose(rng)
        b = synthesize_array(random_pose(rng), ARR, SRC)
        x = pose.as_vector() * np.r_[1, 1, 1, 1.7, 1.7, 1.7]
        f = lambda v: dipole_objective(v, b, ARR.positions, M)  # noqa: E731
        _, g = dipole_objective(x, b, ARR.positions, M, with_grad=True)
        gn = numerical_gradient(f, x, h=1e-7)
        worst = max(worst, np.linalg.norm(g - gn) / np.linalg.norm(g))
    assert worst < 1e-6


def test_lbfgs_quadratic(rng):
    a = rng.standard_normal(6)
    fg = lambda x: (float(np.sum((x - a) ** 2)), 2 * (x - a))  # noqa: E731
    for _ in range(5):
        res = lbfgs_minimize(fg, rng.standard_normal(6) * 3)
        assert np.max(np.abs(res.x - a)) < 1e-8
        assert res.iterations <= 3


def test_lbfgs_rosenbrock():
    def fg(x):
        f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
        g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
        return f, g

    res = lbfgs_minimize(fg, [-1.2, 1.0], OptConfig(max_iter=200))
    assert np.max(np.abs(res.x - 1)) < 1e-4
    assert res.iterations <= 200


def test_lbfgs_numeric_gradient_fallback():
    f = lambda x: float((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)  # noqa: E731
    res = lbfgs_minimize(with_numeric_grad(f), [-1.2, 1.0], OptConfig(max_iter=200))
    assert np.max(np.abs(res.x - 1)) < 1e-4


def test_lbfgs_stationary_start():
    res = lbfgs_minimize(lambda x: (float(np.sum(x**2)), 2 * x), np.zeros(6))
    assert np.array_equal(res.x, np.zeros(6)) and res.iterations == 0 and res.converged


def test_lbfgs_monotone(rng):
    pose = random_pose(rng)
    b = synthesize_array(pose, ARR, SRC)
    init = perturb_pose(pose, 0.08, 30, rng)
    vals = []
    fg = lambda x: dipole_objective(x, b, ARR.positions, M, with_grad=True)  # noqa: E731
    lbfgs_minimize(fg, init.as_vector(), OptConfig(max_iter=50), callback=lambda it, x, f: vals.append(f))
    assert all(b2 <= a for a, b2 in zip(vals, vals[1:]))


def test_lbfgs_line_search_failure_flag():
    # the gradient points uphill, so no trial step can satisfy the Armijo test
    res = lbfgs_minimize(lambda x: (float(np.sum(x**2)), -2 * x), np.ones(2))
    assert res.line_search_failed and not res.converged
    assert np.array_equal(res.x, np.ones(2))


def test_perturb_identity(rng):
    pose = random_pose(rng)
    assert perturb_pose(pose, 0.0, 0.0, rng) == pose


@given(st.floats(0, 0.2), st.floats(0, 180), st.integers(0, 2**32 - 1))
def test_perturb_exact_distances(dp, dth, seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    q = perturb_pose(pose, dp, dth, rng)
    assert abs(np.linalg.norm(q.p - pose.p) - dp) < 1e-12
    assert abs(np.degrees(angle_between(q.o, pose.o)) - dth) < 1e-9


def test_perturb_half_turn(rng):
    pose = random_pose(rng)
    np.testing.assert_allclose(perturb_pose(pose, 0.0, 180.0, rng).o, -pose.o, atol=1e-15)


def test_perturb_range_checked(rng):
    with pytest.raises(ConfigError):
        perturb_pose(random_pose(rng), -1.0, 10, rng)
    with pytest.raises(ConfigError):
        perturb_pose(random_pose(rng), 0.0, 200, rng)


def test_track_from_truth_is_accurate(rng):
    p = np.linspace([-0.05, -0.02, 0.04], [0.05, 0.03, 0.1], 40)
    o = np.linspace([0.0, 0.3, 1.0], [0.4, -0.2, 0.9], 40)
    o /= np.linalg.norm(o, axis=1, keepdims=True)
    b = synthesize_batch(p, o, ARR, SRC)
    res = track_trajectory(b, Pose(p[0], o[0]), InteractiveSpace(), ARR, M)
    assert np.max(np.linalg.norm(res.p - p, axis=1)) < 1e-4
    assert res.accepted.all()


def test_track_rejects_step_outside_space():
    space = InteractiveSpace()
    inside = Pose([0.0, 0.0, 0.08], [0, 0, 1])
    outside = Pose([0.0, 0.0, 0.2], [0, 0, 1])
    b = synthesize_batch(np.array([inside.p, outside.p]), np.array([inside.o, inside.o]), ARR, SRC)
    res = track_trajectory(b, inside, space, ARR, M)
    assert res.accepted.tolist() == [True, False]
    assert np.array_equal(res.p[1], res.p[0]) and np.array_equal(res.o[1], res.o[0])
    assert all(space.contains(p) for p in res.p)


def test_track_requires_readings():
    with pytest.raises(ContractError):
        track_trajectory(np.zeros((0, 48)), Pose([0, 0, 0.05], [0, 0, 1]), InteractiveSpace(), ARR, M)


def test_solve_pose_recovers_truth(rng):
    pose = random_pose(rng)
    b = synthesize_array(pose, ARR, SRC)
    res = solve_pose(b, ARR.positions, M, perturb_pose(pose, 0.02, 5, rng), OptConfig(max_iter=100))
    assert np.linalg.norm(res.x[:3] - pose.p) < 1e-6
