"""Non-Markovian quantum trajectories for a driven two-level atom radiating
into a Lorentzian (cavity-filtered) continuum, with an extended-system
Markovian oracle for validation."""

from .kernels import FlatKernel, LorentzianKernel
from .engine import Engine, SimParams, TrajectoryRecord, run_trajectory

__all__ = [
    "Engine",
    "FlatKernel",
    "LorentzianKernel",
    "SimParams",
    "TrajectoryRecord",
    "run_trajectory",
]

__version__ = "0.1.0"
