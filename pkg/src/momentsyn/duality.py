"""Stability LMIs, the dualization lemma, and classical reference oracles.

The primal/dual Lyapunov inequalities here certify stabilization of an
affine closed loop; the dual variables are, after the variable transform,
blocks of a stationary moment matrix.  The Riccati and H2 routines are
independent ground-truth computations used to cross-check the SDP path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla

from .core import (
    DimensionMismatchError,
    MomentMatrix,
    QuadraticForm,
    SystemStage,
    symmetrize,
)

STRICT_EIG_TOL = 1e-9


@dataclass(frozen=True)
class StabilityCertificate:
    """Lyapunov variables for an affine closed loop.

    P and P_tilde are (1+n) x (1+n) with P @ P_tilde = I when both are
    given; K = [k1 K2] is the controller mean part and K_tilde = K @ P_tilde.
    """

    P: Optional[np.ndarray] = None
    P_tilde: Optional[np.ndarray] = None
    k1: Optional[np.ndarray] = None
    K2: Optional[np.ndarray] = None
    K_tilde: Optional[np.ndarray] = None

    def gain(self) -> np.ndarray:
        k1 = np.zeros((self.K2.shape[0], 1)) if self.k1 is None else np.atleast_2d(self.k1).reshape(-1, 1)
        return np.hstack([k1, self.K2])


def closed_loop(cert: StabilityCertificate, stage: SystemStage) -> np.ndarray:
    """The augmented (1+n) closed-loop map [[1, 0], [f + B k1, A + B K2]]."""
    n = stage.n
    k1 = np.zeros(stage.m) if cert.k1 is None else np.asarray(cert.k1).reshape(-1)
    K2 = np.zeros((stage.m, n)) if cert.K2 is None else np.asarray(cert.K2)
    C = np.zeros((1 + n, 1 + n))
    C[0, 0] = 1.0
    C[1:, 0] = stage.f + stage.B @ k1
    C[1:, 1:] = stage.A + stage.B @ K2
    return C


def _margins(lmi_ok_matrix: np.ndarray, pos_matrix: np.ndarray) -> Tuple[bool, float]:
    """Common feasibility/margin computation.

    lmi_ok_matrix must be negative semidefinite (up to a scaled tolerance)
    and pos_matrix positive definite.  The margin is
    min(-max eig(lmi), min eig(pos)); the constant coordinate of the
    augmented state pins one eigenvalue of the LMI at zero, so the margin
    of a feasible certificate is at best ~0.
    """
    scale = max(1.0, float(np.linalg.norm(lmi_ok_matrix, 2)))
    lam_max = float(np.linalg.eigvalsh(lmi_ok_matrix)[-1])
    p_min = float(np.linalg.eigvalsh(pos_matrix)[0])
    feasible = lam_max <= STRICT_EIG_TOL * scale and p_min > STRICT_EIG_TOL
    return feasible, min(-lam_max, p_min)


def check_primal_lmi(cert: StabilityCertificate, stage: SystemStage) -> Dict:
    """Primal Lyapunov inequality C' P C - P <= 0 with P > 0."""
    if cert.P is None:
        raise ValueError("certificate has no P")
    P = symmetrize(cert.P, "P")
    C = closed_loop(cert, stage)
    if P.shape != C.shape:
        raise DimensionMismatchError("P", C.shape, P.shape)
    lmi = C.T @ P @ C - P
    feasible, margin = _margins(lmi, P)
    return {"feasible": feasible, "margin": margin}


def check_dual_lmi(cert: StabilityCertificate, stage: SystemStage) -> Dict:
    """Dual Lyapunov inequality Pt - C Pt C' >= 0 with Pt > 0."""
    if cert.P_tilde is None:
        raise ValueError("certificate has no P_tilde")
    Pt = symmetrize(cert.P_tilde, "P_tilde")
    C = closed_loop(cert, stage)
    if Pt.shape != C.shape:
        raise DimensionMismatchError("P_tilde", C.shape, Pt.shape)
    lmi = Pt - C @ Pt @ C.T
    feasible, margin = _margins(-lmi, Pt)
    return {"feasible": feasible, "margin": margin}


def dualization_check(M: np.ndarray, W: np.ndarray) -> Dict[str, bool]:
    """Evaluate both sides of the dualization lemma for a partitioned M.

    With M symmetric nonsingular split conformably with W (q x p), the
    primal side is [I; W]' M [I; W] <= 0 and M22 > 0; the dual side is
    [W'; -I]' inv(M) [W'; -I] >= 0 and inv(M)11 < 0.
    """
    M = symmetrize(np.asarray(M, dtype=float), "M")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    q, p = W.shape
    if M.shape != (p + q, p + q):
        raise DimensionMismatchError("M", (p + q, p + q), M.shape)
    if np.linalg.cond(M) > 1e12:
        raise ValueError("M is numerically singular")
    Minv = np.linalg.inv(M)

    top = np.vstack([np.eye(p), W])
    primal_lmi = top.T @ M @ top
    M22 = M[p:, p:]
    scale1 = max(1.0, float(np.linalg.norm(primal_lmi, 2)))
    primal = (
        float(np.linalg.eigvalsh(primal_lmi)[-1]) <= STRICT_EIG_TOL * scale1
        and float(np.linalg.eigvalsh(M22)[0]) > STRICT_EIG_TOL
    )

    bot = np.vstack([W.T, -np.eye(q)])
    dual_lmi = bot.T @ Minv @ bot
    Minv11 = Minv[:p, :p]
    scale2 = max(1.0, float(np.linalg.norm(dual_lmi, 2)))
    dual = (
        float(np.linalg.eigvalsh(dual_lmi)[0]) >= -STRICT_EIG_TOL * scale2
        and float(np.linalg.eigvalsh(Minv11)[-1]) < -STRICT_EIG_TOL
    )
    return {"primal_holds": primal, "dual_holds": dual}


def transform_to_moments(cert: StabilityCertificate) -> MomentMatrix:
    """Map dual Lyapunov variables (P_tilde, K_tilde) to a moment matrix.

    The (1, x) corner is P_tilde, the input cross rows are K_tilde, and
    the input block is K_tilde inv(P_tilde) K_tilde', making the result
    positive semidefinite by construction.
    """
    if cert.P_tilde is None or cert.K_tilde is None:
        raise ValueError("certificate needs P_tilde and K_tilde")
    Pt = symmetrize(cert.P_tilde, "P_tilde")
    Kt = np.atleast_2d(np.asarray(cert.K_tilde, dtype=float))
    if float(np.linalg.eigvalsh(Pt)[0]) <= 0.0:
        raise ValueError("P_tilde must be positive definite")
    n = Pt.shape[0] - 1
    m = Kt.shape[0]
    if Kt.shape[1] != 1 + n:
        raise DimensionMismatchError("K_tilde", (m, 1 + n), Kt.shape)
    gain = Kt @ np.linalg.inv(Pt)  # the controller gain [k1 K2]
    d = 1 + n + m
    S = np.zeros((d, d))
    S[: 1 + n, : 1 + n] = Pt
    S[1 + n :, : 1 + n] = Kt
    S[: 1 + n, 1 + n :] = Kt.T
    S[1 + n :, 1 + n :] = gain @ Kt.T
    return MomentMatrix(S, n, m)


def project_input_block(sigma: MomentMatrix) -> MomentMatrix:
    """Replace the input-input block by its minimal consistent value.

    Shrinks Sigma33 to cross * pinv(corner) * cross', landing the matrix on
    the image of the dual-variable transform while keeping it PSD.
    """
    corner = sigma.state_marginal().data
    cross = sigma.input_rows()
    w, V = np.linalg.eigh(corner)
    cutoff = 1e-12 * max(w[-1], 0.0)
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    pinv = (V * inv) @ V.T
    S = np.array(sigma.data)
    S[1 + sigma.n :, 1 + sigma.n :] = cross @ pinv @ cross.T
    return MomentMatrix(S, sigma.n, sigma.m)


def riccati_lqr(
    stages: Sequence[SystemStage], costs: Sequence[QuadraticForm]
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Backward Riccati recursion on the (1, x)-augmented system.

    costs has one entry per stage plus the terminal one (len(stages) + 1).
    Returns per-stage affine gains [k1 K2] (length N+1, the last being the
    static minimizer of the terminal cost) and value matrices on (1, x)
    (length N+1).  The affine and constant cost terms ride along in the
    augmented coordinate.
    """
    N = len(stages)
    if len(costs) != N + 1:
        raise ValueError(f"need {N + 1} costs for {N} stages, got {len(costs)}")
    n = stages[0].n if N else costs[0].M.shape[0] - 1 - 1
    # Split a cost on (1, x, u) into blocks on (1+n) and u.
    def split(cost: QuadraticForm, n: int, m: int):
        M = cost.M
        Q = M[: 1 + n, : 1 + n]
        S = M[: 1 + n, 1 + n :]
        Ru = M[1 + n :, 1 + n :]
        return Q, S, Ru

    if N:
        n, m = stages[0].n, stages[0].m
    else:
        m = 1  # no stages: dims implied by the single cost are ambiguous
        n = costs[0].M.shape[0] - 1 - m

    gains: List[np.ndarray] = [None] * (N + 1)
    values: List[np.ndarray] = [None] * (N + 1)

    Q, S, Ru = split(costs[N], n, m)
    if float(np.linalg.eigvalsh(Ru)[0]) <= 0:
        raise ValueError("terminal input-cost block must be positive definite")
    K = -np.linalg.solve(Ru, S.T)
    gains[N] = K
    P = Q - S @ np.linalg.solve(Ru, S.T)
    values[N] = symmetrize(P, "value")
    for t in range(N - 1, -1, -1):
        stage = stages[t]
        At = np.zeros((1 + n, 1 + n))
        At[0, 0] = 1.0
        At[1:, 0] = stage.f
        At[1:, 1:] = stage.A
        Bt = np.zeros((1 + n, m))
        Bt[1:, :] = stage.B
        Q, S, Ru = split(costs[t], n, m)
        G = Ru + Bt.T @ P @ Bt
        if float(np.linalg.eigvalsh(G)[0]) <= 0:
            raise ValueError(f"stage {t}: singular input-cost block")
        L = S + At.T @ P @ Bt
        K = -np.linalg.solve(G, L.T)
        gains[t] = K
        P = symmetrize(Q + At.T @ P @ At - L @ np.linalg.solve(G, L.T), "value")
        values[t] = P
    return gains, values


def h2_norm_squared(
    stage: SystemStage, C: np.ndarray, B2: np.ndarray, K2: np.ndarray
) -> float:
    """Squared H2 norm of the closed loop from the B2 input to the C output.

    trace(C X C') with X the controllability Gramian of (A + B K2, B2),
    computed by the direct (vectorized) discrete Lyapunov solve.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    B2 = np.atleast_2d(np.asarray(B2, dtype=float))
    K2 = np.atleast_2d(np.asarray(K2, dtype=float))
    AK = stage.A + stage.B @ K2
    rho = max(abs(np.linalg.eigvals(AK)))
    if rho >= 1.0:
        raise ValueError(f"closed loop is unstable (spectral radius {rho:.4f})")
    X = sla.solve_discrete_lyapunov(AK, B2 @ B2.T, method="direct")
    return float(np.trace(C @ X @ C.T))


def solve_discrete_lyapunov_certificate(
    AK: np.ndarray, slack: float = 1e-3
) -> np.ndarray:
    """A strict Lyapunov matrix for a stable AK: solves S = AK' S AK + I,
    used to manufacture feasible certificates in tests."""
    S = sla.solve_discrete_lyapunov(AK.T, np.eye(AK.shape[0]), method="direct")
    return S + slack * np.eye(AK.shape[0])


def affine_lyapunov_certificate(
    stage: SystemStage,
    k1: np.ndarray,
    K2: np.ndarray,
    eps: float = 1e-2,
) -> StabilityCertificate:
    """Primal-feasible certificate for a stable affine closed loop.

    Centers a quadratic Lyapunov function at the closed-loop equilibrium
    and lifts it to the (1, x) coordinates; eps pads the constant entry to
    keep P positive definite.
    """
    k1 = np.asarray(k1, dtype=float).reshape(-1)
    K2 = np.atleast_2d(np.asarray(K2, dtype=float))
    fK = stage.f + stage.B @ k1
    AK = stage.A + stage.B @ K2
    rho = max(abs(np.linalg.eigvals(AK)))
    if rho >= 1.0:
        raise ValueError(f"closed loop is unstable (spectral radius {rho:.4f})")
    S = solve_discrete_lyapunov_certificate(AK)
    xstar = np.linalg.solve(np.eye(AK.shape[0]) - AK, fK)
    n = AK.shape[0]
    P = np.zeros((1 + n, 1 + n))
    P[0, 0] = xstar @ S @ xstar + eps
    P[0, 1:] = -(S @ xstar)
    P[1:, 0] = -(S @ xstar)
    P[1:, 1:] = S
    Pt = np.linalg.inv(P)
    K = np.hstack([k1[:, None], K2])
    return StabilityCertificate(P=P, P_tilde=Pt, k1=k1, K2=K2, K_tilde=K @ Pt)
