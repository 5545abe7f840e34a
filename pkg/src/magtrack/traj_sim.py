"""Random trajectories, sensor noise, sequential sensor polling and error statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .field_models import bounding_radius, clearance_floor
from .synth import random_unit_vectors, synthesize_batch

# Per-step statistics of recorded hand motion at 40 Hz.
TARGET_STEP_MM = 2.512
TARGET_STEP_DEG = 1.435


@dataclass(frozen=True)
class TrajConfig:
    """Sample-interpolate trajectory settings.

    ``granularity`` is the mean number of steps per waypoint segment
    (``n_total / n_sample``); ``lam`` weighs orientation change (rad) against
    position change (m) when distributing steps over segments.  The defaults
    come from ``magtrack tune-traj`` on the default sampling box.
    """

    n_total: int = 10_000
    granularity: float = 55.5
    lam: float = 0.1003
    frequency: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.n_total < 2 or self.granularity <= 0 or self.frequency <= 0:
            raise ConfigError(f"invalid trajectory config {self}")
        if self.lam < 0:
            raise ConfigError(f"orientation weight must be >= 0, got {self.lam}")
        if self.n_sample < 2:
            raise ConfigError(f"granularity {self.granularity} leaves fewer than two waypoints")

    @property
    def n_sample(self):
        return max(2, int(round(self.n_total / self.granularity)))


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian sensor noise plus a piecewise-constant background drift (T)."""

    sigma_xy: float = 6.0e-7
    sigma_z: float = 9.66e-7
    drift_std: tuple = (1.51e-6, 1.99e-6, 1.01e-6)
    drift_period: int = 1000
    drift_offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.sigma_xy < 0 or self.sigma_z < 0 or min(self.drift_std) < 0 or self.drift_period < 1:
            raise ConfigError(f"noise parameters must be non-negative, got {self}")


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.o = np.asarray(self.o, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.p) == len(self.o)):
            raise ContractError("trajectory arrays differ in length")
        if np.any(np.diff(self.t) <= 0):
            raise ContractError("trajectory timestamps must increase strictly")

    def __len__(self):
        return len(self.t)


def angle_between(a, b):
    """Angle (rad) between vectors along the last axis; robust near 0 and pi."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def slerp(o0, o1, s):
    """Great-circle interpolation between unit vectors, ``s`` in [0, 1]."""
    o0 = np.asarray(o0, dtype=float)
    o1 = np.asarray(o1, dtype=float)
    s = np.asarray(s, dtype=float)[..., None]
    omega = angle_between(o0, o1)[..., None]
    sin_omega = np.sin(omega)
    small = sin_omega < 1e-9
    with np.errstate(invalid="ignore", divide="ignore"):
        w0 = np.where(small, 1.0 - s, np.sin((1.0 - s) * omega) / sin_omega)
        w1 = np.where(small, s, np.sin(s * omega) / sin_omega)
    out = w0 * o0 + w1 * o1
    if np.any(small & (np.cos(omega) < 0)):
        # antipodal endpoints: rotate through an arbitrary perpendicular
        bad = (small & (np.cos(omega) < 0))[..., 0]
        ref = np.where(np.abs(o0[..., :1]) < 0.9, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        perp = np.cross(o0, ref)
        perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
        ang = np.pi * s
        alt = np.cos(ang) * o0 + np.sin(ang) * perp
        out = np.where(bad[..., None], alt, out)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def allocate_steps(virtual, total):
    """Split ``total`` steps over segments in proportion to ``virtual`` distance.

    Each segment gets at least one step; the remainder is shared by largest
    remainder, which keeps the allocation monotone in the distance.
    """
    virtual = np.asarray(virtual, dtype=float)
    k = len(virtual)
    if total < k:
        raise ConfigError(f"{total} steps cannot cover {k} segments")
    spare = total - k
    weights = virtual / virtual.sum() if virtual.sum() > 0 else np.full(k, 1.0 / k)
    share = weights * spare
    base = np.floor(share).astype(int)
    left = spare - base.sum()
    # stable sort on (-fraction, -distance) so ties favour longer segments
    order = np.lexsort((-virtual, -(share - base)))
    base[order[:left]] += 1
    return base + 1


def clear_volume(low, high, spec, plane_z=0.0):
    """Raise the box floor so no orientation brings the body near the sensor plane.

    Unlike i.i.d. sampling, an interpolated path cannot simply be redrawn
    point by point.
    """
    low = np.array(low, dtype=float)
    low[2] = max(low[2], plane_z + bounding_radius(spec) + clearance_floor(spec))
    if low[2] >= high[2]:
        raise ConfigError(f"magnet too large for a {high[2] - plane_z:.3g} m tall volume")
    return low, np.asarray(high, dtype=float)


def generate_trajectory(cfg: TrajConfig, low, high, rng) -> Trajectory:
    """Random waypoints joined by linear/great-circle interpolation."""
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    n_wp = cfg.n_sample
    wp_p = rng.uniform(low, high, size=(n_wp, 3))
    wp_o = random_unit_vectors(rng, n_wp)
    dp = np.linalg.norm(np.diff(wp_p, axis=0), axis=1)
    dth = angle_between(wp_o[:-1], wp_o[1:])
    steps = allocate_steps(dp + cfg.lam * dth, cfg.n_total - 1)

    ps = [wp_p[:1]]
    os_ = [wp_o[:1]]
    for i, n in enumerate(steps):
        s = np.arange(1, n + 1) / n
        ps.append(wp_p[i] + s[:, None] * (wp_p[i + 1] - wp_p[i]))
        os_.append(slerp(np.broadcast_to(wp_o[i], (n, 3)), np.broadcast_to(wp_o[i + 1], (n, 3)), s))
    p = np.vstack(ps)
    o = np.vstack(os_)
    t = np.arange(cfg.n_total) / cfg.frequency
    return Trajectory(t, p, o)


def step_statistics(traj: Trajectory):
    """Mean per-step displacement (mm) and rotation (deg)."""
    disp = np.linalg.norm(np.diff(traj.p, axis=0), axis=1)
    rot = angle_between(traj.o[:-1], traj.o[1:])
    return float(disp.mean() * 1e3), float(np.degrees(rot).mean())


def tune_trajectory(low, high, n_total=10_000, seeds=range(5), granularities=None, lam=None):
    """Pick the granularity whose 40 Hz step statistics best match recorded motion.

    The mean step sizes are set by the granularity alone; ``lam`` only shapes
    how speed is spread along the path and defaults to the recorded ratio of
    positional to angular speed.
    """
    if lam is None:
        lam = (TARGET_STEP_MM * 1e-3) / np.radians(TARGET_STEP_DEG)
    if granularities is None:
        granularities = np.arange(20.0, 100.5, 0.5)
    rows = []
    for g in granularities:
        cfg = TrajConfig(n_total=n_total, granularity=float(g), lam=float(lam))
        stats = [step_statistics(generate_trajectory(cfg, low, high, np.random.default_rng(s))) for s in seeds]
        mm, deg = np.mean(stats, axis=0)
        err = max(abs(mm / TARGET_STEP_MM - 1), abs(deg / TARGET_STEP_DEG - 1))
        rows.append({"granularity": float(g), "lam": float(lam), "step_mm": mm, "step_deg": deg, "max_rel_err": err})
    best = min(rows, key=lambda r: r["max_rel_err"])
    return best, rows


def apply_sensor_noise(readings, cfg: NoiseConfig, rng, start_step=0):
    """Add Gaussian noise and background drift to reading rows ``(T, 3n)``.

    The drift of each sensor axis is redrawn every ``cfg.drift_period`` steps.
    """
    readings = np.asarray(readings, dtype=float)
    single = readings.ndim == 1
    b = np.atleast_2d(readings)
    steps, width = b.shape
    sigma = np.tile([cfg.sigma_xy, cfg.sigma_xy, cfg.sigma_z], width // 3)
    out = b + rng.standard_normal(b.shape) * sigma
    drift_std = np.tile(cfg.drift_std, width // 3)
    if np.any(drift_std > 0):
        step_idx = start_step + np.arange(steps)
        block = step_idx // cfg.drift_period
        blocks, inverse = np.unique(block, return_inverse=True)
        offsets = rng.standard_normal((len(blocks), width)) * drift_std
        out += offsets[inverse]
    out += np.tile(cfg.drift_offset, width // 3)
    return out[0] if single else out


def interpolate_pose(traj: Trajectory, times):
    """Pose at arbitrary times; clamps to the end points outside the record."""
    times = np.clip(np.asarray(times, dtype=float), traj.t[0], traj.t[-1])
    idx = np.clip(np.searchsorted(traj.t, times, side="right") - 1, 0, len(traj) - 2)
    span = traj.t[idx + 1] - traj.t[idx]
    s = (times - traj.t[idx]) / span
    p = traj.p[idx] + s[:, None] * (traj.p[idx + 1] - traj.p[idx])
    o = slerp(traj.o[idx], traj.o[idx + 1], s)
    return p, o


def reading_offsets(n_sensors, t_reading):
    """Mean delay of each sensor after the first within one polling sweep."""
    if n_sensors == 1:
        return np.zeros(1)
    return np.arange(n_sensors) / (n_sensors - 1) * t_reading


def simulate_async_readings(traj: Trajectory, array, source, t_reading, rng=None):
    """Readings when sensors are polled one after another.

    Sensor ``k`` of step ``tau`` sees the pose at ``t_tau + k/(n-1) t_reading``.
    """
    positions = np.asarray(getattr(array, "positions", array), dtype=float).reshape(-1, 3)
    n = len(positions)
    offsets = reading_offsets(n, t_reading)
    out = np.empty((len(traj), 3 * n))
    for k, off in enumerate(offsets):
        if off == 0:
            p, o = traj.p, traj.o
        else:
            p, o = interpolate_pose(traj, traj.t + off)
        out[:, 3 * k : 3 * k + 3] = synthesize_batch(p, o, positions[k : k + 1], source, rng)
    return out


def summarize_errors(p_true, o_true, p_pred, o_pred):
    """Position (mm) and orientation (deg) error arrays plus summary statistics.

    Quartiles use linear interpolation between order statistics.
    """
    p_true = np.atleast_2d(p_true)
    p_pred = np.atleast_2d(p_pred)
    o_true = np.atleast_2d(o_true)
    o_pred = np.atleast_2d(o_pred)
    if not (len(p_true) == len(p_pred) == len(o_true) == len(o_pred)):
        raise ContractError("truth and prediction sequences differ in length")
    e_p = np.linalg.norm(p_true - p_pred, axis=1) * 1e3
    e_theta = np.degrees(angle_between(o_true, o_pred))
    stats = {}
    for name, e in (("e_p_mm", e_p), ("e_theta_deg", e_theta)):
        stats[name] = {
            "mean": float(np.mean(e)),
            "median": float(np.median(e)),
            "q3": float(np.percentile(e, 75, method="linear")),
            "max": float(np.max(e)),
        }
    return e_p, e_theta, stats
