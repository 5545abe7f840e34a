import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import ROD, SPHERE
from magtrack.errors import ConfigError, ContractError
from magtrack.field_models import AnalyticSource
from magtrack.synth import SensorArray, synthesize_batch
from magtrack.traj_sim import (
    TARGET_STEP_DEG,
    TARGET_STEP_MM,
    NoiseConfig,
    TrajConfig,
    Trajectory,
    allocate_steps,
    angle_between,
    apply_sensor_noise,
    clear_volume,
    generate_trajectory,
    interpolate_pose,
    reading_offsets,
    simulate_async_readings,
    slerp,
    step_statistics,
    summarize_errors,
    tune_trajectory,
)

LOW, HIGH = (-0.1, -0.1, 0.0), (0.1, 0.1, 0.15)
ZERO_NOISE = NoiseConfig(0.0, 0.0, (0.0, 0.0, 0.0))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrajConfig(lam=-1)
    with pytest.raises(ConfigError):
        TrajConfig(n_total=1)
    with pytest.raises(ConfigError):
        TrajConfig(granularity=0)
    assert TrajConfig(n_total=100, granularity=80).n_sample == 2
    with pytest.raises(ConfigError):
        NoiseConfig(sigma_xy=-1)


def test_trajectory_contract():
    with pytest.raises(ContractError):
        Trajectory([0, 0, 1], np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)))


def test_length_and_unit_orientations(rng):
    cfg = TrajConfig(n_total=3000)
    traj = generate_trajectory(cfg, LOW, HIGH, rng)
    assert len(traj) == 3000
    assert np.max(np.abs(np.linalg.norm(traj.o, axis=1) - 1)) < 1e-9
    assert np.all(traj.p >= LOW) and np.all(traj.p <= HIGH)
    np.testing.assert_allclose(np.diff(traj.t), 1 / 40)


def test_default_step_statistics():
    traj = generate_trajectory(TrajConfig(), LOW, HIGH, np.random.default_rng(0))
    mm, deg = step_statistics(traj)
    assert abs(mm / TARGET_STEP_MM - 1) <= 0.2
    assert abs(deg / TARGET_STEP_DEG - 1) <= 0.2


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=30), st.integers(0, 400))
def test_allocation_properties(dist, extra):
    dist = np.asarray(dist)
    total = len(dist) + extra
    steps = allocate_steps(dist, total)
    assert steps.sum() == total and steps.min() >= 1
    for i in range(len(dist)):
        for j in range(len(dist)):
            if dist[i] < dist[j]:
                assert steps[i] <= steps[j]


def test_allocation_needs_enough_steps():
    with pytest.raises(ConfigError):
        allocate_steps([1.0, 2.0, 3.0], 2)


def test_slerp_endpoints_and_constant_speed(rng):
    a = np.array([1.0, 0, 0])
    b = np.array([0, 1.0, 0])
    s = np.linspace(0, 1, 11)
    out = slerp(np.broadcast_to(a, (11, 3)), np.broadcast_to(b, (11, 3)), s)
    np.testing.assert_allclose(out[0], a, atol=1e-15)
    np.testing.assert_allclose(out[-1], b, atol=1e-15)
    np.testing.assert_allclose(angle_between(out[:-1], out[1:]), np.pi / 20, rtol=1e-12)


def test_slerp_antipodal():
    out = slerp(np.array([[0, 0, 1.0]]), np.array([[0, 0, -1.0]]), np.array([0.5]))
    assert abs(out[0] @ [0, 0, 1]) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1)


def test_noise_identity_when_off(rng):
    b = rng.standard_normal((10, 48))
    assert np.array_equal(apply_sensor_noise(b, ZERO_NOISE, rng), b)


def test_noise_std_z_axis(rng):
    cfg = NoiseConfig(drift_std=(0.0, 0.0, 0.0))
    out = apply_sensor_noise(np.zeros((100_000, 3)), cfg, rng)
    assert abs(out[:, 2].std() / 9.66e-7 - 1) < 0.02
    assert abs(out[:, 0].std() / 6.0e-7 - 1) < 0.02


def test_noise_distribution_ks(rng):
    cfg = NoiseConfig(drift_std=(0.0, 0.0, 0.0))
    out = apply_sensor_noise(np.zeros((100_000, 3)), cfg, rng)
    for k, sigma in enumerate((6.0e-7, 6.0e-7, 9.66e-7)):
        assert stats.kstest(out[:, k], "norm", args=(0, sigma)).pvalue > 0.01


def test_constant_drift_offset(rng):
    d = (1e-6, -2e-6, 3e-7)
    cfg = NoiseConfig(0.0, 0.0, (0.0, 0.0, 0.0), drift_offset=d)
    b = rng.standard_normal((50, 6))
    np.testing.assert_allclose((apply_sensor_noise(b, cfg, rng) - b).mean(axis=0), np.tile(d, 2), rtol=1e-9)


def test_drift_piecewise_constant(rng):
    cfg = NoiseConfig(0.0, 0.0, drift_period=100)
    out = apply_sensor_noise(np.zeros((300, 3)), cfg, rng)
    for blk in range(3):
        seg = out[blk * 100 : (blk + 1) * 100]
        assert np.all(seg == seg[0])
    assert not np.array_equal(out[0], out[100])


def test_offsets():
    off = reading_offsets(16, 0.028)
    assert off[0] == 0.0 and off[15] == 0.028
    assert reading_offsets(1, 0.028).tolist() == [0.0]


def test_async_zero_delay_is_synchronous(rng):
    traj = generate_trajectory(TrajConfig(n_total=200), *clear_volume(LOW, HIGH, SPHERE), rng)
    arr = SensorArray.grid()
    src = AnalyticSource(SPHERE)
    a = simulate_async_readings(traj, arr, src, 0.0)
    assert np.array_equal(a, synthesize_batch(traj.p, traj.o, arr, src))


def test_async_first_sensor_unaffected(rng):
    traj = generate_trajectory(TrajConfig(n_total=200), *clear_volume(LOW, HIGH, SPHERE), rng)
    arr = SensorArray.grid()
    src = AnalyticSource(SPHERE)
    a = simulate_async_readings(traj, arr, src, 0.028)
    b = synthesize_batch(traj.p, traj.o, arr, src)
    assert np.array_equal(a[:, :3], b[:, :3])
    assert not np.array_equal(a[:, -3:], b[:, -3:])


def test_async_smear_at_recorded_speed():
    speed = 0.10048
    t = np.arange(100) / 40
    p = np.c_[speed * t, np.zeros(100), np.full(100, 0.06)]
    traj = Trajectory(t, p, np.tile([0, 0, 1.0], (100, 1)))
    shifted, _ = interpolate_pose(traj, traj.t[:50] + reading_offsets(16, 0.028)[15])
    smear = np.linalg.norm(shifted - traj.p[:50], axis=1) * 1e3
    np.testing.assert_allclose(smear, speed * 28, rtol=1e-9)
    assert smear.mean() == pytest.approx(2.8, abs=0.02)


def test_interpolation_clamps_at_end():
    t = np.arange(5) / 40
    traj = Trajectory(t, np.c_[t, t, t], np.tile([0, 0, 1.0], (5, 1)))
    p, _ = interpolate_pose(traj, [10.0])
    assert np.array_equal(p[0], traj.p[-1])


def test_clear_volume_keeps_body_off_the_plane():
    low, _ = clear_volume(LOW, HIGH, ROD)
    assert low[2] > np.hypot(5e-3, 10e-3)
    with pytest.raises(ConfigError):
        clear_volume(LOW, (0.1, 0.1, 0.005), ROD)


def test_summary_zero_and_quantiles():
    p = np.zeros((3, 3))
    o = np.tile([0, 0, 1.0], (3, 1))
    _, _, s = summarize_errors(p, o, p, o)
    assert all(v == 0 for d in s.values() for v in d.values())
    q = np.array([[0.001, 0, 0], [0.002, 0, 0], [0.003, 0, 0]])
    e_p, _, s = summarize_errors(p, o, q, o)
    assert s["e_p_mm"]["median"] == pytest.approx(2.0)
    assert s["e_p_mm"]["q3"] == pytest.approx(2.5)


def test_summary_antiparallel():
    _, e_th, _ = summarize_errors(np.zeros(3), [0, 0, 1], np.zeros(3), [0, 0, -1])
    assert e_th[0] == pytest.approx(180.0)


def test_summary_length_mismatch():
    with pytest.raises(ContractError):
        summarize_errors(np.zeros((3, 3)), np.ones((3, 3)), np.zeros((2, 3)), np.ones((2, 3)))


def test_tuning_picks_nearest_granularity():
    best, rows = tune_trajectory(LOW, HIGH, n_total=3000, seeds=range(2), granularities=[20, 55.5, 120])
    assert best["granularity"] == 55.5
    assert len(rows) == 3
    assert best["lam"] == pytest.approx(0.1003, abs=5e-5)
