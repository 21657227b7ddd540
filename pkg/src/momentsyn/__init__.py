"""Controller synthesis via semidefinite programs over moment matrices.

The toolkit formulates stochastic linear state-feedback problems with
quadratic expectation costs and constraints as semidefinite programs over
the second-order moments of the joint (1, state, input) vector, solves
them, extracts affine stochastic policies, and verifies the results by
closed-loop simulation and independent certificates.
"""

from .core import (
    AffinePolicy,
    DimensionMismatchError,
    Dimensions,
    MomentMatrix,
    QuadraticForm,
    StateMoment,
    SynthesisProblem,
    SynthesisSolution,
    SystemStage,
    propagate_moment,
    propagation_residual,
    quad_expectation,
)
from .builder import solve_synthesis
from .extract import PolicyExtractionError, extract_policy, reconstruct_moments

__all__ = [
    "AffinePolicy",
    "DimensionMismatchError",
    "Dimensions",
    "MomentMatrix",
    "PolicyExtractionError",
    "QuadraticForm",
    "StateMoment",
    "SynthesisProblem",
    "SynthesisSolution",
    "SystemStage",
    "extract_policy",
    "propagate_moment",
    "propagation_residual",
    "quad_expectation",
    "reconstruct_moments",
    "solve_synthesis",
]

__version__ = "0.1.0"
