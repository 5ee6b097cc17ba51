"""Bowed mass-spring oscillator: reference solver, physics-informed neural
solvers (PINN / PI-DeepONet / hybrid), and optimization-conditioning
diagnostics."""

from .fdm import InitialCondition, OscillatorConfig, Trajectory, simulate
from .friction import FrictionParams, PhaseLabel

__all__ = [
    "FrictionParams", "PhaseLabel",
    "OscillatorConfig", "InitialCondition", "Trajectory", "simulate",
]

__version__ = "0.1.0"
