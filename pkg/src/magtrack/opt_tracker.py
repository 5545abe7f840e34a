"""Iterative dipole-model tracker: objective, L-BFGS, perturbations, tracking loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .field_models import KM
from .synth import Pose, random_unit_vectors

#: Distance below which the dipole objective switches to a flat penalty (m).
OBJECTIVE_FLOOR = 1e-4
PENALTY = 1e6


@dataclass(frozen=True)
class OptConfig:
    max_iter: int = 50
    memory: int = 10
    c1: float = 1e-4
    shrink: float = 0.5
    max_ls: int = 25
    grad_tol: float = 1e-12
    # length of the very first trial step, before any curvature is known
    initial_step: float = 1e-2

    def __post_init__(self):
        if not (self.max_iter > 0 and self.memory > 0 and self.max_ls > 0):
            raise ConfigError("max_iter, memory and max_ls must be positive")
        if not (0 < self.c1 < 1 and 0 < self.shrink < 1 and self.grad_tol > 0 and self.initial_step > 0):
            raise ConfigError(f"invalid line-search constants in {self}")


@dataclass(frozen=True)
class InteractiveSpace:
    """Axis-aligned box in which tracked positions are accepted."""

    low: tuple = (-0.1, -0.1, 0.0)
    high: tuple = (0.1, 0.1, 0.15)

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.low, self.high)):
            raise ConfigError(f"interactive space must have positive extent, got {self.low} .. {self.high}")

    def contains(self, p):
        p = np.asarray(p)
        return bool(np.all(p >= self.low) and np.all(p <= self.high))


def dipole_objective(x, readings, sensors, moment, with_grad=False):
    """Sum of squared residuals between dipole predictions and readings.

    ``x = [p, o]`` with ``o`` an unconstrained 3-vector normalized inside.
    Returns ``f`` or ``(f, grad)``.  Poses within ``OBJECTIVE_FLOOR`` of a
    sensor evaluate to a large constant instead of overflowing.
    """
    x = np.asarray(x, dtype=float)
    sensors = np.asarray(sensors, dtype=float).reshape(-1, 3)
    readings = np.asarray(readings, dtype=float).reshape(-1, 3)
    if len(readings) != len(sensors):
        raise ContractError(f"{len(readings)} readings for {len(sensors)} sensors")
    p, o = x[:3], x[3:6]
    o_norm = np.linalg.norm(o)
    r = sensors - p
    r2 = np.sum(r * r, axis=1)
    if o_norm < 1e-12 or np.any(r2 < OBJECTIVE_FLOOR**2) or not np.all(np.isfinite(x)):
        f = PENALTY
        return (f, np.zeros(6)) if with_grad else f

    o_hat = o / o_norm
    m = moment * o_hat
    inv_r2 = 1.0 / r2
    inv_r3 = inv_r2 * np.sqrt(inv_r2)
    mr = r @ m
    b = KM * inv_r3[:, None] * (3.0 * (mr * inv_r2)[:, None] * r - m)
    res = b - readings
    f = float(np.sum(res * res))
    if not with_grad:
        return f

    # dB/dr for each sensor, contracted with the residual
    inv_r5 = inv_r3 * inv_r2
    res_r = np.sum(res * r, axis=1)
    res_m = res @ m
    # J_r^T res with J_r = k [3(r m^T + (m.r) I + m r^T)/r^5 - 15 (m.r) r r^T / r^7]
    jr_t_res = KM * (
        3.0 * inv_r5[:, None] * (m[None, :] * res_r[:, None] + mr[:, None] * res + r * res_m[:, None])
        - 15.0 * (mr * res_r * inv_r5 * inv_r2)[:, None] * r
    )
    grad_p = -2.0 * np.sum(jr_t_res, axis=0)
    # dB/dm = k [3 r r^T / r^5 - I / r^3]
    jm_t_res = KM * (3.0 * (inv_r5 * res_r)[:, None] * r - inv_r3[:, None] * res)
    g_m = 2.0 * moment * np.sum(jm_t_res, axis=0)
    grad_o = (g_m - o_hat * (o_hat @ g_m)) / o_norm
    return f, np.concatenate([grad_p, grad_o])


def numerical_gradient(fun, x, h=1e-7):
    """Central-difference gradient; fallback when no analytic gradient exists."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    n_evals: int = 0


def lbfgs_minimize(fun_grad, x0, cfg: OptConfig = OptConfig(), callback=None) -> LbfgsResult:
    """Limited-memory BFGS with a backtracking Armijo line search.

    ``fun_grad(x)`` returns ``(f, g)``; pass ``with_numeric_grad(f)`` for a
    value-only objective.  Iteration stops at ``cfg.max_iter`` or when the
    gradient norm falls below ``cfg.grad_tol``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    n_evals = 1
    s_hist, y_hist = [], []
    if np.linalg.norm(g) <= cfg.grad_tol:
        return LbfgsResult(x, f, 0, True, n_evals=n_evals)

    for it in range(1, cfg.max_iter + 1):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q *= cfg.initial_step / np.linalg.norm(g)
        for a, rho, s, y in reversed(alphas):
            q += s * (a - rho * (y @ q))
        d = -q
        slope = g @ d
        if slope >= 0:
            # lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g * (cfg.initial_step / np.linalg.norm(g))
            slope = g @ d

        t = 1.0
        accepted = False
        for _ in range(cfg.max_ls):
            x_new = x + t * d
            f_new, g_new = fun_grad(x_new)
            n_evals += 1
            if np.isfinite(f_new) and f_new <= f + cfg.c1 * t * slope:
                accepted = True
                break
            t *= cfg.shrink
        if not accepted:
            return LbfgsResult(x, f, it - 1, False, line_search_failed=True, n_evals=n_evals)

        s_vec = x_new - x
        y_vec = g_new - g
        x, f, g = x_new, f_new, g_new
        if y_vec @ s_vec > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        if callback is not None:
            callback(it, x, f)
        if np.linalg.norm(g) <= cfg.grad_tol:
            return LbfgsResult(x, f, it, True, n_evals=n_evals)
    return LbfgsResult(x, f, cfg.max_iter, False, n_evals=n_evals)


def with_numeric_grad(fun, h=1e-7):
    return lambda x: (fun(x), numerical_gradient(fun, x, h))


def solve_pose(readings, sensors, moment, init: Pose, cfg: OptConfig = OptConfig()):
    """Fit ``[p, o]`` to one set of readings starting from ``init``."""
    fg = lambda x: dipole_objective(x, readings, sensors, moment, with_grad=True)  # noqa: E731
    res = lbfgs_minimize(fg, init.as_vector(), cfg)
    return res


def perturb_pose(pose: Pose, dp: float, dtheta_deg: float, rng) -> Pose:
    """Shift the position by exactly ``dp`` and tilt the orientation by exactly ``dtheta_deg``.

    Both directions are uniformly random; the tilt axis is perpendicular to ``o``.
    """
    if dp < 0 or not 0 <= dtheta_deg <= 180:
        raise ConfigError(f"perturbation out of range: dp={dp}, dtheta={dtheta_deg}")
    direction = random_unit_vectors(rng, 1)[0]
    p = pose.p + dp * direction
    axis = random_unit_vectors(rng, 1)[0]
    axis -= (axis @ pose.o) * pose.o
    while np.linalg.norm(axis) < 1e-6:
        axis = random_unit_vectors(rng, 1)[0]
        axis -= (axis @ pose.o) * pose.o
    axis /= np.linalg.norm(axis)
    theta = np.radians(dtheta_deg)
    o = pose.o * np.cos(theta) + np.cross(axis, pose.o) * np.sin(theta)
    return Pose(p, o / np.linalg.norm(o))


@dataclass
class TrackResult:
    p: np.ndarray
    o: np.ndarray
    iterations: np.ndarray
    accepted: np.ndarray
    history: list = field(default_factory=list)


def track_trajectory(readings_seq, init: Pose, space: InteractiveSpace, sensors, moment, cfg: OptConfig = OptConfig()):
    """Sequential tracking: each step starts from the previous accepted estimate.

    An optimized estimate whose position leaves ``space`` is discarded and the
    previous estimate is carried forward.
    """
    readings_seq = np.asarray(readings_seq, dtype=float)
    if readings_seq.ndim != 2 or len(readings_seq) == 0:
        raise ContractError("tracking needs a nonempty (T, 3n) reading sequence")
    sensors = np.asarray(getattr(sensors, "positions", sensors), dtype=float)
    current = init.as_vector()
    ps, os, iters, accepted = [], [], [], []
    for b in readings_seq:
        fg = lambda x, b=b: dipole_objective(x, b, sensors, moment, with_grad=True)  # noqa: E731
        res = lbfgs_minimize(fg, current, cfg)
        ok = space.contains(res.x[:3]) and np.linalg.norm(res.x[3:]) > 0
        if ok:
            current = res.x
        ps.append(current[:3].copy())
        os.append(current[3:] / np.linalg.norm(current[3:]))
        iters.append(res.iterations)
        accepted.append(ok)
    return TrackResult(np.array(ps), np.array(os), np.array(iters), np.array(accepted))
