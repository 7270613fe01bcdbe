"""Distributed Gauss-Newton AC state estimation by Gaussian belief propagation."""

from .engine import ConvergenceTrace, DampingConfig, GbpEngine, Schedule, UnobservableVariable
from .factor_graph import FactorGraph, FactorKind, build_graph, is_tree
from .measurements import (
    Measurement, MeasurementKind, StateVector, evaluate_h, generate_measurements,
    jacobian_row, load_devices,
)
from .network import NetworkCase, build_admittance, load_case
from .wls import gauss_newton

__version__ = "0.1.0"
