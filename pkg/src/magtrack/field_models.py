"""Magnetic field models for axisymmetric permanent magnets.

Everything here works in the magnet's meridional half-plane: ``du`` is the
radial distance from the magnetization axis and ``dw`` the signed axial
coordinate, both in metres, with the magnet centred at the origin.  Field
components come back as ``(B_u, B_w)`` in Tesla.

Three sources are provided:

* the point dipole (exact for uniformly magnetized spheres),
* the ideal axially magnetized cylinder, evaluated from the equivalent
  solenoid with complete elliptic integrals (Carlson symmetric forms),
* :class:`FieldMap2D`, a precomputed grid that plays the role of a 2D
  finite-element solution and is sampled by bilinear interpolation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import integrate
from scipy.special import elliprf, elliprj

from .errors import ConfigError, DomainError, FormatError

MU0 = 4e-7 * np.pi
#: mu0 / (4 pi), exact in the pre-2019 SI definition used throughout.
KM = 1e-7

#: Minimum distance to a point dipole (m).
SINGULARITY_FLOOR = 1e-6
#: Minimum clearance from the surface of a finite magnet body (m).
SURFACE_FLOOR = 0.5e-3

#: Magnetization of N42-grade NdFeB (remanence ~1.32 T).
DEFAULT_MAGNETIZATION = 1.05e6


@dataclass(frozen=True)
class Sphere:
    """Uniformly magnetized sphere, described by its dipole moment.

    ``radius`` is optional; when given it defines the body that sensors may
    not enter and the characteristic size used for far-field checks.
    """

    moment: float
    radius: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.moment) or self.moment < 0:
            raise ConfigError(f"sphere moment must be finite and >= 0, got {self.moment}")
        if not np.isfinite(self.radius) or self.radius < 0:
            raise ConfigError(f"sphere radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class Cylinder:
    """Ideal cylinder magnetized uniformly along its axis."""

    radius: float
    height: float
    magnetization: float = DEFAULT_MAGNETIZATION

    def __post_init__(self):
        if not (self.radius > 0 and self.height > 0):
            raise ConfigError(
                f"cylinder dimensions must be positive, got r={self.radius}, h={self.height}"
            )
        if not np.isfinite(self.magnetization) or self.magnetization < 0:
            raise ConfigError(f"magnetization must be >= 0, got {self.magnetization}")


MagnetSpec = Union[Sphere, Cylinder]


def equivalent_dipole_moment(spec: MagnetSpec) -> float:
    """Moment (A m^2) of the point dipole with the same far field."""
    if isinstance(spec, Sphere):
        return float(spec.moment)
    if isinstance(spec, Cylinder):
        return float(spec.magnetization * np.pi * spec.radius**2 * spec.height)
    raise TypeError(f"unknown magnet spec {spec!r}")


def magnet_size(spec: MagnetSpec) -> float:
    """Largest linear dimension of the magnet body (0 for a bare dipole)."""
    if isinstance(spec, Sphere):
        return 2.0 * spec.radius
    return max(2.0 * spec.radius, spec.height)


def bounding_radius(spec: MagnetSpec) -> float:
    """Radius of the smallest sphere about the magnet centre enclosing the body."""
    if isinstance(spec, Sphere):
        return float(spec.radius)
    return float(np.hypot(spec.radius, 0.5 * spec.height))


def body_clearance(spec: MagnetSpec, du, dw):
    """Distance from ``(du, dw)`` to the magnet body; 0 inside it.

    For a sphere without a radius this is the distance to the dipole origin.
    """
    du = np.abs(np.asarray(du, dtype=float))
    dw = np.asarray(dw, dtype=float)
    if isinstance(spec, Sphere):
        return np.maximum(np.hypot(du, dw) - spec.radius, 0.0)
    gap_u = np.maximum(du - spec.radius, 0.0)
    gap_w = np.maximum(np.abs(dw) - 0.5 * spec.height, 0.0)
    return np.hypot(gap_u, gap_w)


def clearance_floor(spec: MagnetSpec) -> float:
    """Clearance below which field queries are rejected."""
    return SINGULARITY_FLOOR if isinstance(spec, Sphere) else SURFACE_FLOOR


def is_exterior(spec: MagnetSpec, du, dw):
    """Boolean mask of points far enough outside the body to be evaluated."""
    return body_clearance(spec, du, dw) >= clearance_floor(spec)


def _require_exterior(spec, du, dw):
    ok = is_exterior(spec, du, dw)
    if not np.all(ok):
        bad = np.flatnonzero(~np.atleast_1d(ok))
        raise DomainError(f"{bad.size} field queries inside or too close to the magnet body")


# --------------------------------------------------------------------------
# point dipole
# --------------------------------------------------------------------------


def dipole_field(moment, r):
    """Flux density of a point dipole ``moment`` (A m^2) at offset ``r`` (m).

    Both arguments broadcast over leading axes; the last axis has length 3.
    """
    m = np.asarray(moment, dtype=float)
    r = np.asarray(r, dtype=float)
    r2 = np.sum(r * r, axis=-1, keepdims=True)
    if np.any(r2 < SINGULARITY_FLOOR**2):
        raise DomainError("dipole field evaluated within 1 um of the source")
    inv_r2 = 1.0 / r2
    inv_r3 = inv_r2 * np.sqrt(inv_r2)
    mr = np.sum(m * r, axis=-1, keepdims=True)
    return KM * inv_r3 * (3.0 * mr * inv_r2 * r - m)


def dipole_field_2d(moment: float, du, dw):
    """Meridional-plane dipole field for a moment along +w."""
    du = np.asarray(du, dtype=float)
    dw = np.asarray(dw, dtype=float)
    r2 = du * du + dw * dw
    if np.any(r2 < SINGULARITY_FLOOR**2):
        raise DomainError("dipole field evaluated within 1 um of the source")
    inv_r5 = r2**-2.5
    bu = KM * moment * 3.0 * du * dw * inv_r5
    bw = KM * moment * (3.0 * dw * dw - r2) * inv_r5
    return bu, bw


# --------------------------------------------------------------------------
# axially magnetized cylinder
# --------------------------------------------------------------------------


def cel(kc, p, a, b):
    """Bulirsch's generalized complete elliptic integral via Carlson forms.

    ``cel(kc, p, a, b) = a R_F(0, kc^2, 1) + (b - p a) R_J(0, kc^2, 1, p) / 3``
    for ``p > 0``.
    """
    kc2 = np.asarray(kc, dtype=float) ** 2
    p = np.asarray(p, dtype=float)
    coef = (b - p * a) / 3.0
    # at p == 0 the R_J term carries a zero coefficient but R_J itself diverges
    with np.errstate(invalid="ignore", divide="ignore"):
        rj = np.where(coef == 0.0, 0.0, coef * elliprj(0.0, kc2, 1.0, p))
    return a * elliprf(0.0, kc2, 1.0) + rj


def cylinder_field_2d(spec: Cylinder, du, dw):
    """Exterior field of an axially magnetized cylinder.

    The magnet is replaced by a solenoid sheet carrying surface current
    ``K = magnetization`` and the two end contributions are summed in closed
    form.  Raises :class:`DomainError` for points within ``SURFACE_FLOOR`` of
    the body.
    """
    du = np.abs(np.asarray(du, dtype=float))
    dw = np.asarray(dw, dtype=float)
    du, dw = np.broadcast_arrays(du, dw)
    _require_exterior(spec, du, dw)

    a = spec.radius
    half = 0.5 * spec.height
    b0 = MU0 * spec.magnetization / np.pi
    gamma = (a - du) / (a + du)
    g2 = gamma * gamma

    bu = np.zeros(du.shape)
    bw = np.zeros(du.shape)
    for sign, z in ((1.0, dw + half), (-1.0, dw - half)):
        denom = np.sqrt(z * z + (du + a) ** 2)
        alpha = a / denom
        beta = z / denom
        kc = np.sqrt((z * z + (a - du) ** 2)) / denom
        bu += sign * alpha * cel(kc, 1.0, 1.0, -1.0)
        bw += sign * beta * cel(kc, g2, 1.0, gamma)
    bu *= b0
    bw *= b0 * a / (a + du)
    # cel(1, 1, 1, -1) vanishes analytically on the axis; pin it to exact zero
    bu = np.where(du == 0.0, 0.0, bu)
    return bu, bw


def cylinder_axial_field(spec: Cylinder, dw):
    """On-axis B_w of the cylinder; valid for ``|dw| >= height / 2``."""
    dw = np.asarray(dw, dtype=float)
    half = 0.5 * spec.height
    a = spec.radius
    zp = dw + half
    zm = dw - half
    return 0.5 * MU0 * spec.magnetization * (zp / np.hypot(zp, a) - zm / np.hypot(zm, a))


def cylinder_field_quad(spec: Cylinder, du: float, dw: float, rtol: float = 1e-10):
    """Brute-force Biot-Savart integration over the surface current sheet.

    Slow; used as an independent check of :func:`cylinder_field_2d`.
    """
    if not is_exterior(spec, du, dw):
        raise DomainError("quadrature oracle evaluated inside the magnet body")
    a = spec.radius
    half = 0.5 * spec.height

    def integrand(phi, zs, comp):
        # current element a*dphi along phi-hat at (a cos phi, a sin phi, zs)
        rx = du - a * np.cos(phi)
        ry = -a * np.sin(phi)
        rz = dw - zs
        d3 = (rx * rx + ry * ry + rz * rz) ** 1.5
        if comp == 0:
            return a * np.cos(phi) * rz / d3
        return a * (-np.sin(phi) * ry - np.cos(phi) * rx) / d3

    out = []
    for comp in (0, 2):
        val, _ = integrate.dblquad(
            lambda phi, zs: integrand(phi, zs, comp),
            -half,
            half,
            0.0,
            2.0 * np.pi,
            epsabs=0.0,
            epsrel=rtol,
        )
        out.append(KM * spec.magnetization * val)
    return out[0], out[1]


def field_2d(spec: MagnetSpec, du, dw):
    """Analytic meridional field for any supported magnet."""
    if isinstance(spec, Sphere):
        _require_exterior(spec, du, dw)
        return dipole_field_2d(spec.moment, du, dw)
    return cylinder_field_2d(spec, du, dw)


class AnalyticSource:
    """Field source that evaluates the closed-form model directly."""

    kind = "analytic"

    def __init__(self, spec: MagnetSpec):
        self.spec = spec

    def __call__(self, du, dw):
        return field_2d(self.spec, du, dw)

    def __repr__(self):
        return f"AnalyticSource({self.spec!r})"


class DipoleSource(AnalyticSource):
    """Equivalent point-dipole model of ``spec``, regardless of its shape.

    The body of ``spec`` is still used for the exclusion test, so samples drawn
    with this source cover exactly the same poses as the exact model.
    """

    kind = "dipole"

    def __call__(self, du, dw):
        _require_exterior(self.spec, du, dw)
        return dipole_field_2d(equivalent_dipole_moment(self.spec), du, dw)


# --------------------------------------------------------------------------
# gridded field map
# --------------------------------------------------------------------------

_FMAP_MAGIC = b"FMAP"
_FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sII3dddII")


def _pack_spec(spec):
    if isinstance(spec, Sphere):
        return 0, (spec.moment, spec.radius, 0.0)
    return 1, (spec.radius, spec.height, spec.magnetization)


def _unpack_spec(kind, params):
    if kind == 0:
        return Sphere(moment=params[0], radius=params[1])
    if kind == 1:
        return Cylinder(radius=params[0], height=params[1], magnetization=params[2])
    raise ValueError(f"unknown magnet kind {kind}")


class FieldMap2D:
    """Precomputed ``(B_u, B_w)`` on a regular grid over one half-plane.

    Nodes span ``du in [0, du_max]`` and ``dw in [-dw_max, dw_max]``.  Nodes
    closer to the body than the clearance floor hold NaN.  Instances are
    treated as immutable.
    """

    kind = "fieldmap"

    def __init__(self, spec: MagnetSpec, du_max: float, dw_max: float, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[2] != 2 or min(values.shape[:2]) < 2:
            raise ValueError(f"field map values must have shape (n_u, n_w, 2), got {values.shape}")
        self.spec = spec
        self.du_max = float(du_max)
        self.dw_max = float(dw_max)
        self.values = values
        self.values.setflags(write=False)
        self.n_u, self.n_w = values.shape[:2]
        self.h_u = self.du_max / (self.n_u - 1)
        self.h_w = 2.0 * self.dw_max / (self.n_w - 1)
        self.mask = np.isfinite(values[..., 0])
        self._moment = equivalent_dipole_moment(spec)

    @property
    def du_nodes(self):
        return np.linspace(0.0, self.du_max, self.n_u)

    @property
    def dw_nodes(self):
        return np.linspace(-self.dw_max, self.dw_max, self.n_w)

    def __call__(self, du, dw):
        return self.sample(du, dw)

    def sample(self, du, dw):
        """Bilinear interpolation of the map.

        Beyond the grid the equivalent dipole is used; cells touching a masked
        node are evaluated analytically instead.
        """
        du = np.abs(np.asarray(du, dtype=float))
        dw = np.asarray(dw, dtype=float)
        du, dw = np.broadcast_arrays(du, dw)
        _require_exterior(self.spec, du, dw)
        bu = np.empty(du.shape)
        bw = np.empty(du.shape)

        inside = (du <= self.du_max) & (np.abs(dw) <= self.dw_max)
        far = ~inside
        if np.any(far):
            bu[far], bw[far] = dipole_field_2d(self._moment, du[far], dw[far])

        if np.any(inside):
            x = du[inside] / self.h_u
            y = (dw[inside] + self.dw_max) / self.h_w
            # node coordinates divided by the pitch are only integers up to roundoff
            x = np.where(np.abs(x - np.rint(x)) < 1e-9, np.rint(x), x)
            y = np.where(np.abs(y - np.rint(y)) < 1e-9, np.rint(y), y)
            i = np.clip(np.floor(x).astype(np.intp), 0, self.n_u - 2)
            j = np.clip(np.floor(y).astype(np.intp), 0, self.n_w - 2)
            t = (x - i)[:, None]
            s = (y - j)[:, None]
            v = self.values
            out = (1.0 - t) * ((1.0 - s) * v[i, j] + s * v[i, j + 1]) + t * (
                (1.0 - s) * v[i + 1, j] + s * v[i + 1, j + 1]
            )
            # exact node hits keep the stored value bit-for-bit
            out = np.where((t == 0) & (s == 0), v[i, j], out)
            holes = ~np.all(np.isfinite(out), axis=1)
            if np.any(holes):
                du_in = du[inside][holes]
                dw_in = dw[inside][holes]
                hu, hw = field_2d(self.spec, du_in, dw_in)
                out[holes, 0] = hu
                out[holes, 1] = hw
            bu[inside] = out[:, 0]
            bw[inside] = out[:, 1]
        return bu, bw

    def save(self, path):
        kind, params = _pack_spec(self.spec)
        header = _FMAP_HEADER.pack(
            _FMAP_MAGIC, _FMAP_VERSION, kind, *params, self.du_max, self.dw_max, self.n_u, self.n_w
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if len(data) < _FMAP_HEADER.size:
            raise FormatError("field map header truncated", offset=len(data), path=path)
        magic, version, kind, p0, p1, p2, du_max, dw_max, n_u, n_w = _FMAP_HEADER.unpack_from(data)
        if magic != _FMAP_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
        if version != _FMAP_VERSION:
            raise FormatError(f"unsupported field map version {version}", offset=4, path=path)
        try:
            spec = _unpack_spec(kind, (p0, p1, p2))
        except (ValueError, ConfigError) as exc:
            raise FormatError(f"invalid magnet spec: {exc}", offset=12, path=path) from exc
        expected = _FMAP_HEADER.size + n_u * n_w * 2 * 8
        if len(data) != expected:
            raise FormatError(
                f"field map payload has {len(data) - _FMAP_HEADER.size} bytes, "
                f"expected {expected - _FMAP_HEADER.size}",
                offset=min(len(data), expected),
                path=path,
            )
        values = np.frombuffer(data, dtype="<f8", offset=_FMAP_HEADER.size).reshape(n_u, n_w, 2)
        return cls(spec, du_max, dw_max, values.astype(float))

    def __eq__(self, other):
        if not isinstance(other, FieldMap2D):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.du_max == other.du_max
            and self.dw_max == other.dw_max
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def __repr__(self):
        return (
            f"FieldMap2D({self.spec!r}, du_max={self.du_max}, dw_max={self.dw_max}, "
            f"n_u={self.n_u}, n_w={self.n_w})"
        )


def build_field_map(
    spec: MagnetSpec, du_max: float = 0.45, dw_max: float = 0.45, pitch: float = 1e-3
) -> FieldMap2D:
    """Tabulate the analytic field of ``spec`` on a regular half-plane grid."""
    if not (pitch > 0 and du_max > 0 and dw_max > 0):
        raise ConfigError(f"grid pitch and extents must be positive (pitch={pitch})")
    n_u = int(round(du_max / pitch)) + 1
    n_w = int(round(2 * dw_max / pitch)) + 1
    if n_u < 2 or n_w < 2:
        raise ConfigError("field map grid needs at least two nodes per axis")
    du, dw = np.meshgrid(
        np.linspace(0.0, du_max, n_u), np.linspace(-dw_max, dw_max, n_w), indexing="ij"
    )
    values = np.full((n_u, n_w, 2), np.nan)
    ok = is_exterior(spec, du, dw)
    bu, bw = field_2d(spec, du[ok], dw[ok])
    values[ok, 0] = bu
    values[ok, 1] = bw
    return FieldMap2D(spec, du_max, dw_max, values)


def make_source(spec: MagnetSpec, kind: str = "analytic", **grid):
    """Construct a field source by name: ``analytic``, ``dipole`` or ``fieldmap``."""
    if kind == "analytic":
        return AnalyticSource(spec)
    if kind == "dipole":
        return DipoleSource(spec)
    if kind == "fieldmap":
        return build_field_map(spec, **grid)
    raise ConfigError(f"unknown field source {kind!r}")
