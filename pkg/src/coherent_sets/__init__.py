"""Finite-time coherent sets from sparse trajectory data via space-time fuzzy clustering."""

__version__ = "0.1.0"

from .clustering import ClusterState, FcmConfig, initialize, run, run_restarts
from .ensemble import TrajectoryEnsemble, build_availability_index, load_ensemble, save_ensemble, thin_ensemble
from .geometry import GeometryConfig

__all__ = [
    "ClusterState",
    "FcmConfig",
    "GeometryConfig",
    "TrajectoryEnsemble",
    "build_availability_index",
    "initialize",
    "load_ensemble",
    "run",
    "run_restarts",
    "save_ensemble",
    "thin_ensemble",
]
