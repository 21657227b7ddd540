"""Domain types and moment-matrix algebra shared by all other modules.

The central object is the second-order moment matrix of the stacked vector
(1, x, u).  Everything downstream (SDP lowering, policy extraction,
simulation cross-checks) manipulates these matrices or their (1, x)
marginals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

SYMMETRY_TOL = 1e-12
SYMMETRY_WARN = 1e-9
PSD_FLOOR = 1e-9


class DimensionMismatchError(ValueError):
    """Raised when a matrix block does not have the expected shape."""

    def __init__(self, block: str, expected, actual):
        self.block = block
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"block {block!r}: expected shape {self.expected}, got {self.actual}"
        )


def _as_matrix(M, block: str, shape) -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.shape != tuple(shape):
        raise DimensionMismatchError(block, shape, A.shape)
    return A


def symmetrize(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return (M + M^T)/2, warning if the asymmetry is above 1e-9."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatchError(name, (M.shape[0], M.shape[0]), M.shape)
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > SYMMETRY_WARN * max(1.0, np.max(np.abs(M))):
        warnings.warn(
            f"{name}: asymmetry {asym:.3e} above {SYMMETRY_WARN:g}; symmetrizing",
            stacklevel=3,
        )
    return 0.5 * (M + M.T)


def min_eigenvalue(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(M)[0])


def is_psd(M: np.ndarray, floor: float = PSD_FLOOR) -> bool:
    """PSD check with an eigenvalue floor scaled by the matrix norm."""
    scale = max(1.0, float(np.linalg.norm(M, 2))) if M.size else 1.0
    return min_eigenvalue(M) >= -floor * scale


def _frozen(A: np.ndarray) -> np.ndarray:
    A = np.array(A, dtype=float)
    A.setflags(write=False)
    return A


@dataclass(frozen=True)
class Dimensions:
    """Problem dimensions: state n, input m, horizon N, constraints per stage s."""

    n: int
    m: int
    N: int = 0
    s: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("state and input dimensions must be >= 1")
        if self.N < 0 or self.s < 0:
            raise ValueError("horizon and constraint count must be >= 0")

    @property
    def d(self) -> int:
        """Side length of the full moment matrix, 1 + n + m."""
        return 1 + self.n + self.m


@dataclass(frozen=True)
class SystemStage:
    """One stage of affine dynamics x+ = f + A x + B u + w, cov(w) = sigma_w."""

    f: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A", np.asarray(self.A).shape)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatchError("A", (n, n), A.shape)
        f = np.asarray(self.f, dtype=float).reshape(-1)
        if f.shape != (n,):
            raise DimensionMismatchError("f", (n,), f.shape)
        B = _as_matrix(self.B, "B", (n, np.asarray(self.B).shape[1]))
        W = symmetrize(_as_matrix(self.sigma_w, "sigma_w", (n, n)), "sigma_w")
        if not is_psd(W, floor=1e-10):
            raise ValueError("sigma_w must be positive semidefinite")
        object.__setattr__(self, "f", _frozen(f))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))
        object.__setattr__(self, "sigma_w", _frozen(W))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def transition(self) -> np.ndarray:
        """The (1+n) x (1+n+m) map sending (1, x, u) to (1, x+) less noise."""
        n, m = self.n, self.m
        T = np.zeros((1 + n, 1 + n + m))
        T[0, 0] = 1.0
        T[1:, 0] = self.f
        T[1:, 1 : 1 + n] = self.A
        T[1:, 1 + n :] = self.B
        return T


@dataclass(frozen=True)
class StateMoment:
    """Second moment of (1, x): blocks sigma11 (scalar), sigma12, Sigma22."""

    data: np.ndarray
    n: int = field(default=-1)

    def __post_init__(self):
        D = symmetrize(np.asarray(self.data, dtype=float), "state moment")
        n = self.n if self.n >= 0 else D.shape[0] - 1
        if D.shape != (1 + n, 1 + n):
            raise DimensionMismatchError("state moment", (1 + n, 1 + n), D.shape)
        object.__setattr__(self, "data", _frozen(D))
        object.__setattr__(self, "n", n)

    @classmethod
    def from_mean_cov(cls, mean, cov) -> "StateMoment":
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float)
        n = mean.shape[0]
        D = np.empty((1 + n, 1 + n))
        D[0, 0] = 1.0
        D[0, 1:] = mean
        D[1:, 0] = mean
        D[1:, 1:] = cov + np.outer(mean, mean)
        return cls(D, n)

    @classmethod
    def dirac(cls, point) -> "StateMoment":
        point = np.asarray(point, dtype=float).reshape(-1)
        return cls.from_mean_cov(point, np.zeros((point.size, point.size)))

    @property
    def sigma11(self) -> float:
        return float(self.data[0, 0])

    @property
    def sigma12(self) -> np.ndarray:
        return self.data[0, 1:]

    @property
    def Sigma22(self) -> np.ndarray:
        return self.data[1:, 1:]

    @property
    def mean(self) -> np.ndarray:
        return self.sigma12 / self.sigma11

    @property
    def cov(self) -> np.ndarray:
        mu = self.mean
        return self.Sigma22 / self.sigma11 - np.outer(mu, mu)


@dataclass(frozen=True)
class MomentMatrix:
    """Symmetric (1+n+m) second moment of (1, x, u) with named blocks."""

    data: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        d = 1 + self.n + self.m
        D = symmetrize(_as_matrix(self.data, "moment matrix", (d, d)), "moment matrix")
        object.__setattr__(self, "data", _frozen(D))

    @property
    def d(self) -> int:
        return 1 + self.n + self.m

    @property
    def sigma11(self) -> float:
        return float(self.data[0, 0])

    @property
    def sigma12(self) -> np.ndarray:
        return self.data[0, 1 : 1 + self.n]

    @property
    def sigma13(self) -> np.ndarray:
        return self.data[0, 1 + self.n :]

    @property
    def sigma21(self) -> np.ndarray:
        return self.data[1 : 1 + self.n, 0]

    @property
    def sigma31(self) -> np.ndarray:
        return self.data[1 + self.n :, 0]

    @property
    def Sigma22(self) -> np.ndarray:
        return self.data[1 : 1 + self.n, 1 : 1 + self.n]

    @property
    def Sigma23(self) -> np.ndarray:
        return self.data[1 : 1 + self.n, 1 + self.n :]

    @property
    def Sigma32(self) -> np.ndarray:
        return self.data[1 + self.n :, 1 : 1 + self.n]

    @property
    def Sigma33(self) -> np.ndarray:
        return self.data[1 + self.n :, 1 + self.n :]

    def state_marginal(self) -> StateMoment:
        """The (1, x) marginal, dropping all input blocks."""
        return StateMoment(self.data[: 1 + self.n, : 1 + self.n], self.n)

    def input_rows(self) -> np.ndarray:
        """The m x (1+n) block [sigma31 Sigma32]."""
        return self.data[1 + self.n :, : 1 + self.n]

    def is_realizable(self, floor: float = PSD_FLOOR, tol: float = 1e-6) -> bool:
        return is_psd(self.data, floor) and abs(self.sigma11 - 1.0) <= tol


@dataclass(frozen=True)
class QuadraticForm:
    """Symmetric coefficient matrix on (1, x, u); may be indefinite.

    sense is "cost" for objective terms and "leq_zero" for expectation
    constraints E[z' M z] <= 0.
    """

    M: np.ndarray
    sense: str = "cost"

    def __post_init__(self):
        if self.sense not in ("cost", "leq_zero"):
            raise ValueError(f"unknown sense {self.sense!r}")
        object.__setattr__(self, "M", _frozen(symmetrize(self.M, "quadratic form")))


@dataclass(frozen=True)
class AffinePolicy:
    """Affine stochastic state feedback u = k1 + K2 x + v, cov(v) = sigma_v."""

    k1: np.ndarray
    K2: np.ndarray
    sigma_v: np.ndarray

    def __post_init__(self):
        K2 = np.atleast_2d(np.asarray(self.K2, dtype=float))
        m = K2.shape[0]
        k1 = np.asarray(self.k1, dtype=float).reshape(-1)
        if k1.shape != (m,):
            raise DimensionMismatchError("k1", (m,), k1.shape)
        V = symmetrize(_as_matrix(self.sigma_v, "sigma_v", (m, m)), "sigma_v")
        w, Q = np.linalg.eigh(V)
        if w.size and w[0] < -1e-9 * max(1.0, float(w[-1])):
            raise ValueError(
                f"sigma_v must be positive semidefinite (min eig {w[0]:.3e})"
            )
        V = (Q * np.clip(w, 0.0, None)) @ Q.T
        object.__setattr__(self, "k1", _frozen(k1))
        object.__setattr__(self, "K2", _frozen(K2))
        object.__setattr__(self, "sigma_v", _frozen(V))

    @property
    def m(self) -> int:
        return self.K2.shape[0]

    @property
    def n(self) -> int:
        return self.K2.shape[1]

    def gain(self) -> np.ndarray:
        """The stacked m x (1+n) gain [k1 K2] acting on (1, x)."""
        return np.hstack([self.k1[:, None], self.K2])

    def mean_input(self, x: np.ndarray) -> np.ndarray:
        return self.k1 + self.K2 @ x


MODES = ("finite", "stationary", "stationary_tail")


@dataclass(frozen=True)
class SynthesisProblem:
    """A full synthesis instance: dynamics, costs, constraints, initial moments.

    constraints is a list of (stage, form) pairs where stage is an int or
    the string "all".
    """

    dims: Dimensions
    stages: Sequence[SystemStage]
    costs: Sequence[QuadraticForm]
    constraints: Sequence[tuple]
    initial: Optional[StateMoment]
    mode: str = "finite"
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "stationary_tail":
            if self.gamma is None or not (0.0 <= self.gamma < 1.0):
                raise ValueError("stationary_tail requires gamma in [0, 1)")
        elif self.gamma is not None:
            raise ValueError(f"gamma is only valid in stationary_tail mode")
        n, m = self.dims.n, self.dims.m
        for t, st in enumerate(self.stages):
            if st.n != n or st.m != m:
                raise DimensionMismatchError(f"stage {t}", (n, m), (st.n, st.m))
        d = self.dims.d
        for t, c in enumerate(self.costs):
            if c.M.shape != (d, d):
                raise DimensionMismatchError(f"cost {t}", (d, d), c.M.shape)
        for stage_idx, form in self.constraints:
            if form.M.shape != (d, d):
                raise DimensionMismatchError(
                    f"constraint at stage {stage_idx}", (d, d), form.M.shape
                )
        if self.mode == "finite":
            if len(self.stages) != self.dims.N:
                raise ValueError(
                    f"finite mode needs N={self.dims.N} stages, got {len(self.stages)}"
                )
            if len(self.costs) != self.dims.N + 1:
                raise ValueError(
                    f"finite mode needs N+1={self.dims.N + 1} costs, got {len(self.costs)}"
                )
        if self.mode == "stationary":
            if len(self.stages) != 1 or len(self.costs) != 1:
                raise ValueError("stationary mode needs exactly one stage and one cost")
        if self.initial is not None and self.initial.n != n:
            raise DimensionMismatchError("initial", (1 + n, 1 + n), self.initial.data.shape)


SOLVER_STATUSES = ("optimal", "infeasible", "unbounded", "numerical_trouble")


@dataclass(frozen=True)
class SynthesisSolution:
    """Solved moment sequence plus extracted policies and diagnostics."""

    moments: Sequence[MomentMatrix]
    policies: Sequence[AffinePolicy]
    objective: float
    solver_status: str
    residuals: Sequence[float]

    def __post_init__(self):
        if self.solver_status not in SOLVER_STATUSES:
            raise ValueError(f"unknown status {self.solver_status!r}")


def propagation_residual(
    sigma: MomentMatrix, sigma_plus: StateMoment, stage: SystemStage
) -> np.ndarray:
    """Residual of the one-step moment recursion.

    Returns sigma_plus - (T sigma T' + diag(0, sigma_w)) with T the affine
    transition on (1, x, u).  A zero result means sigma_plus is exactly the
    (1, x) moment one step after sigma under the stage dynamics.
    """
    n, m = stage.n, stage.m
    if sigma.n != n or sigma.m != m:
        raise DimensionMismatchError("sigma", (1 + n + m,) * 2, sigma.data.shape)
    if sigma_plus.n != n:
        raise DimensionMismatchError("sigma_plus", (1 + n,) * 2, sigma_plus.data.shape)
    T = stage.transition()
    pushed = T @ sigma.data @ T.T
    pushed[1:, 1:] += stage.sigma_w
    return sigma_plus.data - pushed


def propagate_moment(sigma: MomentMatrix, stage: SystemStage) -> StateMoment:
    """The unique next-stage (1, x) moment making the recursion residual vanish."""
    T = stage.transition()
    out = T @ sigma.data @ T.T
    out[1:, 1:] += stage.sigma_w
    return StateMoment(out, stage.n)


def quad_expectation(sigma: MomentMatrix, form: QuadraticForm) -> float:
    """E[z' M z] for z = (1, x, u), i.e. trace(sigma * M)."""
    if form.M.shape != sigma.data.shape:
        raise DimensionMismatchError("form", sigma.data.shape, form.M.shape)
    return float(np.sum(sigma.data * form.M))
