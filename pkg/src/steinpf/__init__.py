"""Stein particle filtering, an SIR baseline, exact references and a benchmark harness."""

from .filter import (
    FilterError,
    SirState,
    SteinState,
    WindowState,
    sir_initial,
    sir_step,
    stein_initial_step,
    stein_sequential_step,
    stein_window_initial,
    stein_window_step,
)
from .model import StateSpaceModel, benes_spec, discretize, linear_gaussian_spec, simulate
from .svgd import KernelConfig, LogDensityTarget, SvgdConfig

__version__ = "0.1.0"

__all__ = [
    "FilterError",
    "KernelConfig",
    "LogDensityTarget",
    "SirState",
    "StateSpaceModel",
    "SteinState",
    "SvgdConfig",
    "WindowState",
    "benes_spec",
    "discretize",
    "linear_gaussian_spec",
    "simulate",
    "sir_initial",
    "sir_step",
    "stein_initial_step",
    "stein_sequential_step",
    "stein_window_initial",
    "stein_window_step",
]
