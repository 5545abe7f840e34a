"""Experiment configuration: JSON file, dotted-key overrides, validation."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .dataset import SamplerConfig
from .errors import ConfigError
from .field_models import Cylinder, Sphere, make_source
from .mlp import TrainConfig
from .opt_tracker import InteractiveSpace, OptConfig
from .synth import SENSOR_SUBSETS, SensorArray
from .traj_sim import NoiseConfig, TrajConfig

OUTPUT_ENV = "MAGTRACK_OUTPUT_DIR"

# Radius of an N42 sphere carrying 1.6875 A m^2.
DEFAULT_SPHERE_RADIUS = 7.3e-3

DEFAULTS = {
    "magnet": {"shape": "sphere", "moment": 1.6875, "radius": DEFAULT_SPHERE_RADIUS},
    "sensors": 16,
    "source": "dipole",
    "grid": {"du_max": 0.45, "dw_max": 0.45, "pitch": 1e-3},
    "volume": {"low": [-0.1, -0.1, 0.0], "high": [0.1, 0.1, 0.15]},
    "train": {k: v for k, v in TrainConfig.desk_scale().to_dict().items() if k != "seed"},
    "optimizer": {"max_iter": 50, "memory": 10, "c1": 1e-4, "shrink": 0.5, "max_ls": 25, "grad_tol": 1e-12},
    "noise": None,
    "trajectory": {"n_total": 2000, "granularity": 55.5, "lam": 0.1003, "frequency": 40.0},
    "eval": {
        "samples": 1000,
        "cases": 100,
        "init_dp_mm": [80.0],
        "init_dtheta_deg": [10.0, 30.0, 90.0, 180.0],
        "iterations": [10, 20, 50],
        "methods": ["mlp"],
        "t_reading": 0.0,
    },
    "bench": {"repeats": 1000, "iterations": [10, 20, 50]},
    "jobs": 1,
    "seed": 0,
    "output_dir": "runs/default",
}

SOURCE_KINDS = {"dipole": "dipole", "fem-surrogate": "fieldmap", "analytic": "analytic"}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def merge_config(base, override):
    """Deep merge; a magnet section naming a shape replaces the old one whole."""
    magnet = override.get("magnet")
    if isinstance(magnet, dict) and "shape" in magnet and magnet["shape"] != base["magnet"].get("shape"):
        base = {**base, "magnet": {}}
    return deep_merge(base, override)


def parse_override(text):
    """``a.b.c=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    cur = node
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cur[part] = {}
        cur = cur[part]
    cur[parts[-1]] = value
    return node


def _build(cls, data, section):
    if data is None:
        return None
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides=(), output_dir=None):
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            text = Path(path).read_text()
            try:
                data = merge_config(data, json.loads(text))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        for item in overrides:
            data = merge_config(data, parse_override(item))
        if os.environ.get(OUTPUT_ENV):
            data["output_dir"] = os.environ[OUTPUT_ENV]
        if output_dir is not None:
            data["output_dir"] = str(output_dir)
        cfg = cls(data)
        cfg.validate()
        return cfg

    def validate(self):
        # building every section surfaces all config errors up front
        self.spec
        self.array
        self.sampler
        self.train
        self.optimizer
        self.noise
        self.trajectory
        self.space
        if self.raw["source"] not in SOURCE_KINDS:
            raise ConfigError(f"source must be one of {sorted(SOURCE_KINDS)}, got {self.raw['source']!r}")
        if int(self.raw["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")
        methods = set(self.raw["eval"]["methods"])
        if not methods <= {"mlp", "optimizer", "truth"}:
            raise ConfigError(f"unknown eval methods {sorted(methods - {'mlp', 'optimizer', 'truth'})}")

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def output_dir(self):
        return Path(self.raw["output_dir"])

    @property
    def spec(self):
        m = dict(self.raw["magnet"])
        shape = m.pop("shape", None)
        if shape == "sphere":
            return _build(Sphere, m, "magnet")
        if shape == "cylinder":
            return _build(Cylinder, m, "magnet")
        raise ConfigError(f"magnet shape must be 'sphere' or 'cylinder', got {shape!r}")

    @property
    def array(self):
        sensors = self.raw["sensors"]
        full = SensorArray.grid()
        if isinstance(sensors, int):
            if sensors not in SENSOR_SUBSETS:
                raise ConfigError(f"sensor count must be one of {sorted(SENSOR_SUBSETS)}, got {sensors}")
            return full.subset(sensors)
        return full.subset(list(sensors))

    @property
    def sampler(self):
        v = self.raw["volume"]
        return SamplerConfig(tuple(v["low"]), tuple(v["high"]), seed=self.seed)

    @property
    def space(self):
        v = self.raw["volume"]
        return InteractiveSpace(tuple(v["low"]), tuple(v["high"]))

    @property
    def train(self):
        t = dict(self.raw["train"])
        t.setdefault("seed", self.seed)
        return _build(TrainConfig, t, "train")

    @property
    def optimizer(self):
        return _build(OptConfig, self.raw["optimizer"], "optimizer")

    @property
    def noise(self):
        return _build(NoiseConfig, self.raw["noise"], "noise")

    @property
    def trajectory(self):
        t = dict(self.raw["trajectory"])
        t.setdefault("seed", self.seed)
        return _build(TrajConfig, t, "trajectory")

    def source(self, kind=None):
        kind = kind or self.raw["source"]
        if kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown data source {kind!r}")
        return make_source(self.spec, SOURCE_KINDS[kind], **(self.raw["grid"] if kind == "fem-surrogate" else {}))

    def resolved(self):
        """Plain-JSON copy of the full configuration for report provenance."""
        return copy.deepcopy(self.raw)
