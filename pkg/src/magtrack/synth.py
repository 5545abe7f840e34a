"""Synthetic sensor readings from a 2D field source.

A magnet pose is a position and a unit magnetization direction ``w``.  For
every sensor the displacement from the magnet to the sensor is split into an
axial part ``dw`` (along ``w``) and a radial part ``du >= 0``; the meridional
field source is queried at ``(du, dw)`` and the result is rotated back into
the device frame through the orthonormal magnet basis ``(u, v, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .field_models import is_exterior

#: ``||w x d|| < PARALLEL_TOL * ||d||`` triggers the perpendicular fallback.
PARALLEL_TOL = 1e-9

SENSOR_PITCH = 0.052


@dataclass(frozen=True, eq=False)
class Pose:
    """5-DoF magnet pose: position ``p`` (m) and unit orientation ``o``."""

    p: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        o = np.asarray(self.o, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError(f"pose position must be finite, got {p}")
        if abs(np.linalg.norm(o) - 1.0) > 1e-9:
            raise ValueError(f"pose orientation must be unit norm, got |o|={np.linalg.norm(o)}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "o", o)

    @classmethod
    def from_vector(cls, x, normalize=True):
        """Build a pose from a 6-vector ``[p, o]``."""
        x = np.asarray(x, dtype=float)
        o = x[3:6]
        if normalize:
            o = o / np.linalg.norm(o)
        return cls(x[:3], o)

    def as_vector(self):
        return np.concatenate([self.p, self.o])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.p, other.p) and np.array_equal(self.o, other.o)

    def __repr__(self):
        return f"Pose(p={self.p.tolist()}, o={self.o.tolist()})"


class SensorArray:
    """Ordered set of sensor positions in the device frame."""

    def __init__(self, positions, indices=None):
        positions = np.array(positions, dtype=float).reshape(-1, 3)
        if len(positions) < 1:
            raise ConfigError("sensor array needs at least one sensor")
        if len(np.unique(positions, axis=0)) != len(positions):
            raise ConfigError("sensor positions must be distinct")
        self.positions = positions
        self.positions.setflags(write=False)
        self.indices = None if indices is None else tuple(int(i) for i in indices)

    @property
    def n(self):
        return len(self.positions)

    def __len__(self):
        return self.n

    @classmethod
    def grid(cls, rows=4, cols=4, pitch=SENSOR_PITCH, z=0.0):
        """Planar grid centred on the origin, row-major order."""
        xs = (np.arange(cols) - (cols - 1) / 2) * pitch
        ys = (np.arange(rows) - (rows - 1) / 2) * pitch
        pos = [(x, y, z) for y in ys for x in xs]
        return cls(pos, indices=range(rows * cols))

    def subset(self, count_or_indices):
        """Select sensors by explicit indices or by a standard count (4/8/12/16)."""
        if np.isscalar(count_or_indices):
            count = int(count_or_indices)
            if self.n != 16 or count not in SENSOR_SUBSETS:
                raise ConfigError(f"no standard {count}-sensor subset of a {self.n}-sensor array")
            idx = SENSOR_SUBSETS[count]
        else:
            idx = [int(i) for i in count_or_indices]
        if any(i < 0 or i >= self.n for i in idx):
            raise ConfigError(f"sensor indices {idx} out of range for {self.n} sensors")
        base = self.indices if self.indices is not None else tuple(range(self.n))
        return SensorArray(self.positions[idx], indices=[base[i] for i in idx])

    def __repr__(self):
        return f"SensorArray(n={self.n})"


# Nested subsets of the row-major 4x4 grid: inner 2x2, the two middle rows,
# everything but the corners, all sixteen.
SENSOR_SUBSETS = {
    4: [5, 6, 9, 10],
    8: [4, 5, 6, 7, 8, 9, 10, 11],
    12: [1, 2, 4, 5, 6, 7, 8, 9, 10, 11, 13, 14],
    16: list(range(16)),
}


def random_unit_vectors(rng, size):
    """Uniform samples on the unit sphere, shape ``(size, 3)``."""
    v = rng.standard_normal((size, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    while np.any(norm < 1e-12):
        bad = norm[:, 0] < 1e-12
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        norm = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norm


def axial_coordinates(p_mag, o, p_sensor):
    """Radial and axial coordinates ``(du, dw)`` of sensors in the magnet frame."""
    d = np.asarray(p_sensor, dtype=float) - np.asarray(p_mag, dtype=float)
    o = np.asarray(o, dtype=float)
    w = o / np.linalg.norm(o, axis=-1, keepdims=True)
    dw = np.sum(d * w, axis=-1)
    du = np.sqrt(np.maximum(np.sum(d * d, axis=-1) - dw * dw, 0.0))
    return du, dw


def magnet_frame(p_mag, o, p_sensor, rng=None):
    """Coordinate transformation of sensor positions into the magnet frame.

    Arrays broadcast over leading axes.  Returns ``(du, dw, M)`` where ``M``
    has the unit vectors ``u, v, w`` as rows, so a magnet-frame field
    ``(B_u, 0, B_w)`` maps to the device frame as ``B @ M``.

    When ``w`` is (anti-)parallel to the displacement an auxiliary direction is
    drawn from ``rng``; the resulting field does not depend on that draw.
    """
    d = np.asarray(p_sensor, dtype=float) - np.asarray(p_mag, dtype=float)
    o = np.asarray(o, dtype=float)
    d, o = np.broadcast_arrays(d, o)
    shape = d.shape[:-1]
    d = d.reshape(-1, 3)
    w = o.reshape(-1, 3)
    w = w / np.linalg.norm(w, axis=1, keepdims=True)

    v = np.cross(w, d)
    v_norm = np.linalg.norm(v, axis=1)
    d_norm = np.linalg.norm(d, axis=1)
    parallel = v_norm < PARALLEL_TOL * d_norm
    if np.any(parallel):
        if rng is None:
            rng = np.random.default_rng(0)
        idx = np.flatnonzero(parallel)
        while idx.size:
            q = random_unit_vectors(rng, idx.size)
            v[idx] = np.cross(q, w[idx])
            v_norm[idx] = np.linalg.norm(v[idx], axis=1)
            idx = idx[v_norm[idx] <= PARALLEL_TOL]
    u = np.cross(v, w)

    dw = np.sum(d * w, axis=1)
    du = np.sqrt(np.maximum(d_norm * d_norm - dw * dw, 0.0))
    frame = np.stack(
        [u / np.linalg.norm(u, axis=1, keepdims=True), v / v_norm[:, None], w], axis=1
    )
    return du.reshape(shape), dw.reshape(shape), frame.reshape(shape + (3, 3))


def synthesize_batch(p_mag, o, array: SensorArray, source, rng=None):
    """Readings for many poses at once.

    ``p_mag`` and ``o`` have shape ``(N, 3)``; the result has shape ``(N, 3n)``
    ordered ``(B1x, B1y, B1z, ..., Bnx, Bny, Bnz)`` per row.
    """
    p_mag = np.asarray(p_mag, dtype=float).reshape(-1, 3)
    o = np.asarray(o, dtype=float).reshape(-1, 3)
    if len(p_mag) != len(o):
        raise ContractError(f"{len(p_mag)} positions but {len(o)} orientations")
    sensors = array.positions if isinstance(array, SensorArray) else np.asarray(array).reshape(-1, 3)
    du, dw, frame = magnet_frame(p_mag[:, None, :], o[:, None, :], sensors[None, :, :], rng)
    bu, bw = source(du, dw)
    b = bu[..., None] * frame[..., 0, :] + bw[..., None] * frame[..., 2, :]
    return b.reshape(len(p_mag), -1)


def synthesize_reading(pose: Pose, sensor, source, rng=None):
    """Field vector (T) at one sensor position for one magnet pose."""
    out = synthesize_batch(pose.p, pose.o, np.asarray(sensor, dtype=float).reshape(1, 3), source, rng)
    return out[0]


def synthesize_array(pose: Pose, array: SensorArray, source, rng=None):
    """Concatenated readings of the whole array, length ``3n``."""
    return synthesize_batch(pose.p, pose.o, array, source, rng)[0]


def poses_clear_of_sensors(p_mag, o, array: SensorArray, spec) -> np.ndarray:
    """True for poses whose magnet body keeps every sensor outside its exclusion zone."""
    du, dw = axial_coordinates(
        np.asarray(p_mag)[:, None, :], np.asarray(o)[:, None, :], array.positions[None, :, :]
    )
    return np.all(is_exterior(spec, du, dw), axis=1)
