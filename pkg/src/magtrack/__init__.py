"""Simulated 5-DoF tracking of one axisymmetric permanent magnet over a Hall-sensor array."""

from .errors import ConfigError, ContractError, DivergenceError, DomainError, FormatError, MagtrackError
from .field_models import (
    AnalyticSource,
    Cylinder,
    DipoleSource,
    FieldMap2D,
    Sphere,
    build_field_map,
    cylinder_field_2d,
    dipole_field,
    equivalent_dipole_moment,
    make_source,
)
from .synth import Pose, SensorArray, synthesize_array, synthesize_reading

__version__ = "0.1.0"

__all__ = [
    "AnalyticSource",
    "ConfigError",
    "ContractError",
    "Cylinder",
    "DipoleSource",
    "DivergenceError",
    "DomainError",
    "FieldMap2D",
    "FormatError",
    "MagtrackError",
    "Pose",
    "SensorArray",
    "Sphere",
    "build_field_map",
    "cylinder_field_2d",
    "dipole_field",
    "equivalent_dipole_moment",
    "make_source",
    "synthesize_array",
    "synthesize_reading",
]
