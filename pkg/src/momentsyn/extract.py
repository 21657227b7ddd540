"""Recover the affine stochastic policy realizing a moment matrix.

Given a positive semidefinite moment matrix of (1, x, u), there always
exists an affine feedback with independent excitation producing exactly
those moments; the gain is read off by solving the cross-moment equation
against the (1, x) corner, and the excitation covariance is the remaining
input variance.  The reverse direction rebuilds the exact moment sequence
of the closed loop without sampling.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .core import (
    AffinePolicy,
    MomentMatrix,
    StateMoment,
    SystemStage,
    propagate_moment,
    symmetrize,
)


class PolicyExtractionError(ValueError):
    """The input is not a consistent moment matrix."""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


def _psd_pinv(M: np.ndarray, rel_cutoff: float) -> np.ndarray:
    """Pseudoinverse of a symmetric PSD matrix via eigendecomposition."""
    w, V = np.linalg.eigh(M)
    cutoff = rel_cutoff * max(w[-1], 0.0) if M.size else 0.0
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return (V * inv) @ V.T


def extract_policy(
    sigma: MomentMatrix, tol: float = 1e-9, check_tol: float = None
) -> AffinePolicy:
    """Minimum-norm affine policy (k1, K2, sigma_v) realizing sigma.

    The gain [k1 K2] is the least-Frobenius-norm solution of the
    cross-moment equation, computed with an eigenvalue pseudoinverse at
    relative cutoff tol; sigma_v is the leftover input covariance,
    symmetrized and clipped at zero.  Raises PolicyExtractionError when
    rebuilding the input blocks from the result misses sigma by more than
    10 * check_tol * ||sigma||.  check_tol defaults to tol; pass a looser
    value when sigma carries interior-point solver noise, which lands in
    the truncated directions without being policy-relevant.
    """
    if check_tol is None:
        check_tol = tol
    n, m = sigma.n, sigma.m
    corner = sigma.state_marginal().data
    cross = sigma.input_rows()  # m x (1+n)
    K = cross @ _psd_pinv(corner, tol)
    sigma_v = sigma.Sigma33 - K @ cross.T
    sigma_v = symmetrize(sigma_v, "sigma_v")

    scale = max(1.0, float(np.linalg.norm(sigma.data)))
    w, V = np.linalg.eigh(sigma_v)
    if w.size and w[0] < -max(1e-9, check_tol) * scale:
        raise PolicyExtractionError(
            "input covariance defect is negative beyond tolerance", float(-w[0])
        )
    sigma_v = (V * np.clip(w, 0.0, None)) @ V.T

    cross_check = K @ corner
    s33_check = K @ corner @ K.T + sigma_v
    residual = max(
        float(np.max(np.abs(cross_check - cross))),
        float(np.max(np.abs(s33_check - sigma.Sigma33))),
    )
    if residual > 10.0 * check_tol * scale:
        raise PolicyExtractionError(
            "moment matrix is inconsistent with any affine policy", residual
        )
    return AffinePolicy(k1=K[:, 0], K2=K[:, 1:], sigma_v=sigma_v)


def classify(policies: Sequence[AffinePolicy], det_tol: float = 1e-4) -> str:
    """"deterministic" iff every excitation covariance has trace <= det_tol."""
    worst = max((float(np.trace(p.sigma_v)) for p in policies), default=0.0)
    return "deterministic" if worst <= det_tol else "stochastic"


def closed_loop_moment(state: StateMoment, policy: AffinePolicy) -> MomentMatrix:
    """Assemble the full (1, x, u) moment from a state moment and a policy."""
    n, m = state.n, policy.m
    G = np.zeros((1 + n + m, 1 + n))
    G[0, 0] = 1.0
    G[1 : 1 + n, 1:] = np.eye(n)
    G[1 + n :, :] = policy.gain()
    full = G @ state.data @ G.T
    full[1 + n :, 1 + n :] += policy.sigma_v
    return MomentMatrix(full, n, m)


def reconstruct_moments(
    initial: StateMoment,
    policies: Sequence[AffinePolicy],
    stages: Sequence[SystemStage],
) -> List[MomentMatrix]:
    """Exact closed-loop moment sequence under the given per-stage policies.

    Returns one moment matrix per policy; stage t's dynamics propagate
    moment t to the state marginal of moment t+1.  With fewer stages than
    policies the last stage (and policy) repeat, covering the stationary
    case.
    """
    if not policies:
        return []
    if len(stages) < len(policies) - 1:
        raise ValueError(
            f"need at least {len(policies) - 1} stages, got {len(stages)}"
        )
    out: List[MomentMatrix] = []
    state = initial
    for t, policy in enumerate(policies):
        full = closed_loop_moment(state, policy)
        out.append(full)
        if t < len(policies) - 1:
            stage = stages[min(t, len(stages) - 1)]
            state = propagate_moment(full, stage)
    return out
