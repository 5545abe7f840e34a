"""Pose sampling, feature engineering and dataset persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .field_models import Cylinder, MagnetSpec, Sphere
from .synth import Pose, SensorArray, poses_clear_of_sensors, random_unit_vectors, synthesize_batch

#: Samples per independent random stream; fixes output regardless of worker count.
CHUNK_SIZE = 4096


@dataclass(frozen=True)
class SamplerConfig:
    """Axis-aligned sampling box (m) sitting on the sensor plane."""

    low: tuple = (-0.1, -0.1, 0.0)
    high: tuple = (0.1, 0.1, 0.15)
    seed: int = 0

    def __post_init__(self):
        low = tuple(float(v) for v in self.low)
        high = tuple(float(v) for v in self.high)
        if len(low) != 3 or len(high) != 3 or not all(h > l for l, h in zip(low, high)):
            raise ConfigError(f"sampling box must have positive extent, got {low} .. {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def contains(self, p):
        p = np.asarray(p)
        return np.all((p >= self.low) & (p <= self.high), axis=-1)


def feature_engineer(b):
    """Signed cube root, compressing the 1/r^3 field decay to roughly 1/r."""
    return np.cbrt(b)


def sample_poses(count, cfg: SamplerConfig, rng, array: SensorArray = None, spec: MagnetSpec = None):
    """Draw ``count`` poses: uniform positions in the box, uniform orientations.

    If ``array`` and ``spec`` are given, poses that put any sensor inside the
    magnet's exclusion zone are redrawn.  Returns ``(p, o)`` with shape
    ``(count, 3)`` each.
    """
    low = np.asarray(cfg.low)
    high = np.asarray(cfg.high)
    p = rng.uniform(low, high, size=(count, 3))
    o = random_unit_vectors(rng, count)
    if array is None or spec is None:
        return p, o
    bad = np.flatnonzero(~poses_clear_of_sensors(p, o, array, spec))
    while bad.size:
        p[bad] = rng.uniform(low, high, size=(bad.size, 3))
        o[bad] = random_unit_vectors(rng, bad.size)
        bad = bad[~poses_clear_of_sensors(p[bad], o[bad], array, spec)]
    return p, o


def sample_pose(cfg: SamplerConfig, rng, array=None, spec=None) -> Pose:
    p, o = sample_poses(1, cfg, rng, array, spec)
    return Pose(p[0], o[0])


def chunk_rng(seed, stream, chunk):
    """Independent generator for one chunk of one stream (epoch, split, ...)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(chunk))))


@dataclass
class Dataset:
    """Labelled samples: engineered features, raw readings (T) and ``[p, o]`` labels."""

    raw: np.ndarray
    labels: np.ndarray
    array: SensorArray
    spec: MagnetSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.raw.ndim != 2 or self.raw.shape[1] != 3 * self.array.n:
            raise ContractError(f"raw readings shape {self.raw.shape} does not match {self.array.n} sensors")
        if self.labels.shape != (len(self.raw), 6):
            raise ContractError(f"labels shape {self.labels.shape} does not match {len(self.raw)} samples")
        self.features = feature_engineer(self.raw)

    def __len__(self):
        return len(self.raw)

    @property
    def positions(self):
        return self.labels[:, :3]

    @property
    def orientations(self):
        return self.labels[:, 3:]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.raw, other.raw)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.array.positions, other.array.positions)
            and self.spec == other.spec
        )


class DataGenerator:
    """Reproducible i.i.d. sample stream for one magnet, array and field source.

    ``draw(count, stream)`` always returns the same samples for the same
    ``(seed, stream)`` pair; different streams are statistically independent.
    """

    def __init__(self, spec: MagnetSpec, array: SensorArray, source, cfg: SamplerConfig):
        self.spec = spec
        self.array = array
        self.source = source
        self.cfg = cfg

    def draw_raw(self, count, stream=0):
        if count < 1:
            raise ConfigError(f"sample count must be >= 1, got {count}")
        raws, labels = [], []
        for chunk, start in enumerate(range(0, count, CHUNK_SIZE)):
            n = min(CHUNK_SIZE, count - start)
            rng = chunk_rng(self.cfg.seed, stream, chunk)
            p, o = sample_poses(n, self.cfg, rng, self.array, self.spec)
            raws.append(synthesize_batch(p, o, self.array, self.source, rng))
            labels.append(np.hstack([p, o]))
        return np.vstack(raws), np.vstack(labels)

    def draw(self, count, stream=0) -> Dataset:
        raw, labels = self.draw_raw(count, stream)
        meta = {
            "seed": int(self.cfg.seed),
            "stream": int(stream),
            "source": getattr(self.source, "kind", type(self.source).__name__),
            "count": int(count),
        }
        return Dataset(raw, labels, self.array, self.spec, meta)


def generate_dataset(count, spec, array, source, cfg: SamplerConfig, stream=0) -> Dataset:
    """Assemble ``count`` i.i.d. samples; seed comes from ``cfg``."""
    return DataGenerator(spec, array, source, cfg).draw(count, stream)


# --------------------------------------------------------------------------
# binary format
# --------------------------------------------------------------------------

_MAGIC = b"MDAT"
_VERSION = 1
_HEADER = struct.Struct("<4sIQII3d")


def _spec_fields(spec):
    if isinstance(spec, Sphere):
        return 0, (spec.moment, spec.radius, 0.0)
    return 1, (spec.radius, spec.height, spec.magnetization)


def write_dataset(ds: Dataset, path):
    """Write a dataset as header + float64 rows, plus a JSON metadata sidecar."""
    path = Path(path)
    kind, params = _spec_fields(ds.spec)
    n = ds.array.n
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, len(ds), n, kind, *params))
        fh.write(np.ascontiguousarray(ds.array.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(np.hstack([ds.raw, ds.labels]), dtype="<f8").tobytes())
    sidecar = dict(ds.meta)
    sidecar["sensor_indices"] = list(ds.array.indices) if ds.array.indices is not None else None
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_dataset(path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("dataset header truncated", offset=len(data), path=path)
    magic, version, count, n, kind, p0, p1, p2 = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != _VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4, path=path)
    if n < 1 or kind not in (0, 1):
        raise FormatError(f"invalid header (n={n}, kind={kind})", offset=16, path=path)
    offset = _HEADER.size
    pos_bytes = n * 3 * 8
    row_bytes = (3 * n + 6) * 8
    expected = offset + pos_bytes + count * row_bytes
    if len(data) != expected:
        raise FormatError(
            f"dataset body holds {len(data) - offset} bytes, expected {expected - offset}",
            offset=min(len(data), expected),
            path=path,
        )
    positions = np.frombuffer(data, "<f8", n * 3, offset).reshape(n, 3)
    body = np.frombuffer(data, "<f8", count * (3 * n + 6), offset + pos_bytes).reshape(count, 3 * n + 6)
    spec = Sphere(p0, p1) if kind == 0 else Cylinder(p0, p1, p2)
    meta = {}
    indices = None
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        indices = meta.pop("sensor_indices", None)
    array = SensorArray(positions.copy(), indices=indices)
    return Dataset(body[:, : 3 * n].copy(), body[:, 3 * n :].copy(), array, spec, meta)


def export_csv(ds: Dataset, path):
    """One row per sample: label then raw readings."""
    n = ds.array.n
    cols = ["px", "py", "pz", "ox", "oy", "oz"]
    cols += [f"B{i + 1}{ax}" for i in range(n) for ax in "xyz"]
    np.savetxt(path, np.hstack([ds.labels, ds.raw]), delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
