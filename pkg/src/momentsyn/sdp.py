"""Standard-form semidefinite programs and the solver contract.

A problem is a block-diagonal PSD variable X = diag(X_1, ..., X_k) with a
linear objective sum_b trace(C_b X_b), linear trace equalities and trace
inequalities.  The solve() back-end is Clarabel's interior-point method;
everything above this module depends only on the contract encoded in
SdpSolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

import clarabel

from .core import symmetrize

SQRT2 = math.sqrt(2.0)


def svec(M: np.ndarray) -> np.ndarray:
    """Stack the lower triangle column-major, scaling off-diagonals by sqrt(2).

    The scaling makes dot(svec(A), svec(B)) == trace(A @ B) for symmetric
    A, B.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"svec needs a square matrix, got shape {M.shape}")
    d = M.shape[0]
    out = np.empty(d * (d + 1) // 2)
    k = 0
    for j in range(d):
        out[k] = M[j, j]
        cnt = d - j - 1
        out[k + 1 : k + 1 + cnt] = SQRT2 * M[j + 1 :, j]
        k += 1 + cnt
    return out


def smat(v: np.ndarray) -> np.ndarray:
    """Inverse of svec."""
    v = np.asarray(v, dtype=float)
    d = int(round((math.sqrt(8 * v.size + 1) - 1) / 2))
    if d * (d + 1) // 2 != v.size:
        raise ValueError(f"length {v.size} is not a triangular number")
    M = np.zeros((d, d))
    k = 0
    for j in range(d):
        M[j, j] = v[k]
        cnt = d - j - 1
        M[j + 1 :, j] = v[k + 1 : k + 1 + cnt] / SQRT2
        M[j, j + 1 :] = M[j + 1 :, j]
        k += 1 + cnt
    return M


def _svec_upper_colmajor(M: np.ndarray) -> np.ndarray:
    """Clarabel's PSD-triangle vectorization (upper triangle, column-major)."""
    d = M.shape[0]
    out = np.empty(d * (d + 1) // 2)
    k = 0
    for j in range(d):
        for i in range(j + 1):
            out[k] = M[i, j] if i == j else SQRT2 * M[i, j]
            k += 1
    return out


def _smat_upper_colmajor(v: np.ndarray, d: int) -> np.ndarray:
    M = np.zeros((d, d))
    k = 0
    for j in range(d):
        for i in range(j + 1):
            if i == j:
                M[i, j] = v[k]
            else:
                M[i, j] = M[j, i] = v[k] / SQRT2
            k += 1
    return M


# Coefficient maps are {block name: symmetric matrix}; blocks not present
# contribute zero.
CoeffMap = Dict[str, np.ndarray]


@dataclass
class SdpProblem:
    """min sum_b trace(C_b X_b) over X_b >= 0 subject to trace constraints."""

    blocks: List[Tuple[str, int]] = field(default_factory=list)
    objective: CoeffMap = field(default_factory=dict)
    equalities: List[Tuple[CoeffMap, float]] = field(default_factory=list)
    inequalities: List[Tuple[CoeffMap, float]] = field(default_factory=list)

    def add_block(self, name: str, side: int) -> None:
        if any(b == name for b, _ in self.blocks):
            raise ValueError(f"duplicate block name {name!r}")
        self.blocks.append((name, side))

    def block_side(self, name: str) -> int:
        for b, s in self.blocks:
            if b == name:
                return s
        raise KeyError(name)

    def _check_coeffs(self, coeffs: CoeffMap) -> CoeffMap:
        out = {}
        for name, M in coeffs.items():
            s = self.block_side(name)
            M = np.asarray(M, dtype=float)
            if M.shape != (s, s):
                raise ValueError(
                    f"coefficient for block {name!r} has shape {M.shape}, expected {(s, s)}"
                )
            out[name] = symmetrize(M, f"coefficient[{name}]")
        return out

    def add_objective(self, coeffs: CoeffMap) -> None:
        for name, M in self._check_coeffs(coeffs).items():
            if name in self.objective:
                self.objective[name] = self.objective[name] + M
            else:
                self.objective[name] = M

    def add_equality(self, coeffs: CoeffMap, rhs: float) -> None:
        self.equalities.append((self._check_coeffs(coeffs), float(rhs)))

    def add_inequality(self, coeffs: CoeffMap, rhs: float) -> None:
        self.inequalities.append((self._check_coeffs(coeffs), float(rhs)))

    def dump(self, path: str) -> None:
        """Write a sparse triplet dump for cross-checking with other solvers.

        Format: a header line "blocks <k>" then one "block <name> <side>"
        line per block; sections "objective", "equality <rhs>",
        "inequality <rhs>", each followed by "<block> <row> <col> <value>"
        triplet lines (lower triangle of each coefficient matrix).
        """
        def triplets(fh, coeffs):
            for name, M in sorted(coeffs.items()):
                for j in range(M.shape[0]):
                    for i in range(j, M.shape[0]):
                        if M[i, j] != 0.0:
                            fh.write(f"{name} {i} {j} {M[i, j]!r}\n")

        with open(path, "w") as fh:
            fh.write(f"blocks {len(self.blocks)}\n")
            for name, side in self.blocks:
                fh.write(f"block {name} {side}\n")
            fh.write("objective\n")
            triplets(fh, self.objective)
            for coeffs, rhs in self.equalities:
                fh.write(f"equality {rhs!r}\n")
                triplets(fh, coeffs)
            for coeffs, rhs in self.inequalities:
                fh.write(f"inequality {rhs!r}\n")
                triplets(fh, coeffs)


@dataclass
class SdpSolution:
    """Solver output plus self-reported feasibility diagnostics."""

    X: Dict[str, np.ndarray]
    objective: float
    status: str
    max_eq_residual: float
    min_block_eigenvalue: float
    max_ineq_violation: float = 0.0
    solve_info: Optional[str] = None


_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _row(problem: SdpProblem, offsets: Dict[str, int], nvar: int, coeffs: CoeffMap):
    row = np.zeros(nvar)
    for name, M in coeffs.items():
        off = offsets[name]
        v = _svec_upper_colmajor(M)
        row[off : off + v.size] = v
    return row


def solve(
    problem: SdpProblem,
    feas_tol: float = 1e-8,
    max_iters: int = 200,
    verbose: bool = False,
) -> SdpSolution:
    """Solve the SDP with Clarabel and verify feasibility of the result.

    A returned status of "optimal" guarantees all equalities hold within
    feas_tol * (1 + ||b||), all inequalities within feas_tol, and every
    block is PSD within feas_tol; otherwise the status is downgraded to
    "numerical_trouble".
    """
    offsets: Dict[str, int] = {}
    nvar = 0
    for name, side in problem.blocks:
        offsets[name] = nvar
        nvar += side * (side + 1) // 2

    q = np.zeros(nvar)
    for name, M in problem.objective.items():
        off = offsets[name]
        v = _svec_upper_colmajor(M)
        q[off : off + v.size] += v

    rows: List[np.ndarray] = []
    b: List[float] = []
    cones: List = []
    for coeffs, rhs in problem.equalities:
        rows.append(_row(problem, offsets, nvar, coeffs))
        b.append(rhs)
    if problem.equalities:
        cones.append(clarabel.ZeroConeT(len(problem.equalities)))
    for coeffs, rhs in problem.inequalities:
        rows.append(_row(problem, offsets, nvar, coeffs))
        b.append(rhs)
    if problem.inequalities:
        cones.append(clarabel.NonnegativeConeT(len(problem.inequalities)))
    # PSD membership of each block: s = x_block in the PSD triangle cone.
    psd_rows = sparse.lil_matrix((nvar, nvar))
    for name, side in problem.blocks:
        off = offsets[name]
        k = side * (side + 1) // 2
        for i in range(k):
            psd_rows[off + i, off + i] = -1.0
        cones.append(clarabel.PSDTriangleConeT(side))

    A_dense = np.array(rows) if rows else np.zeros((0, nvar))
    A = sparse.vstack([sparse.csc_matrix(A_dense), psd_rows.tocsc()]).tocsc()
    bvec = np.concatenate([np.asarray(b), np.zeros(nvar)])
    P = sparse.csc_matrix((nvar, nvar))

    settings = clarabel.DefaultSettings()
    settings.verbose = verbose
    settings.max_iter = max_iters
    settings.tol_feas = feas_tol * 1e-1
    settings.tol_gap_abs = feas_tol * 1e-1
    settings.tol_gap_rel = feas_tol * 1e-1

    solver = clarabel.DefaultSolver(P, q, A, bvec, cones, settings)
    result = solver.solve()
    status = _STATUS_MAP.get(str(result.status), "numerical_trouble")

    X: Dict[str, np.ndarray] = {}
    max_eq = 0.0
    max_ineq = 0.0
    min_eig = 0.0
    objective = float("nan")
    if status == "optimal":
        x = np.asarray(result.x)
        for name, side in problem.blocks:
            off = offsets[name]
            k = side * (side + 1) // 2
            X[name] = _smat_upper_colmajor(x[off : off + k], side)
        bnorm = np.linalg.norm(b) if b else 0.0
        for coeffs, rhs in problem.equalities:
            val = sum(float(np.sum(X[nm] * M)) for nm, M in coeffs.items())
            max_eq = max(max_eq, abs(val - rhs) / (1.0 + bnorm))
        for coeffs, rhs in problem.inequalities:
            val = sum(float(np.sum(X[nm] * M)) for nm, M in coeffs.items())
            max_ineq = max(max_ineq, val - rhs)
        for name, _ in problem.blocks:
            eigs = np.linalg.eigvalsh(X[name])
            min_eig = min(min_eig, float(eigs[0]))
        objective = float(result.obj_val)
        scale = 1.0 + max(float(np.linalg.norm(M)) for M in X.values())
        if (
            max_eq > feas_tol * scale
            or max_ineq > feas_tol * scale
            or min_eig < -feas_tol * scale
        ):
            status = "numerical_trouble"
    return SdpSolution(
        X=X,
        objective=objective,
        status=status,
        max_eq_residual=max_eq,
        min_block_eigenvalue=min_eig,
        max_ineq_violation=max_ineq,
        solve_info=str(result.status),
    )
