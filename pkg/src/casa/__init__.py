"""Critic-as-actor heads, doubly-robust traces and gradient-consistency diagnostics."""
from ._accel import backend_name
from .autodiff import ParamVector
from .diagnostics import AngleReport, angle_panel, compute_chi, compute_cos_beta, guarded_cosine
from .gpi import GpiWeights, LossBatch, combined_update, grad_J, grad_Lq, grad_Lv
from .head import CasaHead, HeadVariant
from .mdp import TabularMdp, TabularPolicy, Trajectory, TrajectoryBatch, sample_trajectories
from .traces import TraceSpec, ValuePair

__version__ = "0.1.0"

__all__ = [
    "AngleReport", "CasaHead", "GpiWeights", "HeadVariant", "LossBatch", "ParamVector", "TabularMdp",
    "TabularPolicy", "TraceSpec", "Trajectory", "TrajectoryBatch", "ValuePair", "angle_panel", "backend_name",
    "combined_update", "compute_chi", "compute_cos_beta", "grad_J", "grad_Lq", "grad_Lv", "guarded_cosine",
    "sample_trajectories",
]
