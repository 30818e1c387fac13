"""Simulation designs, population bias formulas and the Monte Carlo harness."""

from .decomposition import DecompositionReport, DiscreteJoint, JointError, decompose_did, prop1_predict
from .dgp import DgpConfig, DgpError, benchmark_dgp, clean_dgp, simulate, simulate_panel, simulate_rcs
from .montecarlo import McError, McReport, monte_carlo
from .theory import joint_from_dgp, simple_did_bias, theorem1_bias_fd, theorem1_bias_pols

__all__ = [
    "DecompositionReport", "DiscreteJoint", "JointError", "decompose_did", "prop1_predict",
    "DgpConfig", "DgpError", "benchmark_dgp", "clean_dgp", "simulate", "simulate_panel",
    "simulate_rcs", "McError", "McReport", "monte_carlo", "joint_from_dgp", "simple_did_bias",
    "theorem1_bias_fd", "theorem1_bias_pols",
]
