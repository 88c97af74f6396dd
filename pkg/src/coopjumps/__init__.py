"""Quantum-jump simulation of two dipole-coupled three-level V-systems.

Photon emission records are sampled with the waiting-time method, binned into
intensity traces and segmented into dark, single-bright and double-bright
periods whose mean durations are studied as a function of atomic distance.
"""

__version__ = "0.1.0"

from .model import ModelParams, coupling_constant, coupling_curve, kr_grid
from .hilbert import LABELS, StateVector, subspace_populations, subspace_projection
from .dynamics import ConditionalGenerator, build_h_cond, no_photon_probability, propagate
from .trajectory import EmissionRecord, ResetChannels, apply_reset, run_ensemble, run_trajectory

__all__ = [
    "ModelParams", "coupling_constant", "coupling_curve", "kr_grid",
    "LABELS", "StateVector", "subspace_populations", "subspace_projection",
    "ConditionalGenerator", "build_h_cond", "no_photon_probability", "propagate",
    "EmissionRecord", "ResetChannels", "apply_reset", "run_ensemble", "run_trajectory",
]
