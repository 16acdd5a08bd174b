"""Finite-size key rates for four-state discrete-modulated CV-QKD.

Modules
-------
special      incomplete gamma, binary entropy, binomial tail bound, Gauss-Radau rules
protocol     parameters, scores, truncated POVMs and configuration files
dimred       truncation corrections and their tangent linearisations
channel      honest loss-and-noise channel statistics and a round sampler
entropy      symmetry-reduced entropy SDP, dual certificates, affine bounds
finite_size  completeness tolerances, GEAT bound, key length
pipeline     optimisation, sweeps and the completeness simulation
"""

__version__ = "0.1.0"

from .channel import ChannelParams, honest_statistics
from .entropy import AffineScoreFunction, DualCertificate, SolveOptions, assemble_g, build_problem, min_tradeoff, solve, verify_certificate
from .finite_size import AcceptanceSet, KeyRateReport, finite_key, geat_bound, key_length
from .pipeline import Ablation, SweepSpec, asymptotic_rate, keyrate_point, simulate_completeness, sweep
from .protocol import EpsilonBudget, ProtocolParams, build_operators

__all__ = [
    "AcceptanceSet", "Ablation", "AffineScoreFunction", "ChannelParams", "DualCertificate", "EpsilonBudget",
    "KeyRateReport", "ProtocolParams", "SolveOptions", "SweepSpec", "assemble_g", "asymptotic_rate",
    "build_operators", "build_problem", "finite_key", "geat_bound", "honest_statistics", "key_length",
    "keyrate_point", "min_tradeoff", "simulate_completeness", "solve", "sweep", "verify_certificate",
]
