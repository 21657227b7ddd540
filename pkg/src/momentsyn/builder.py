"""Lower synthesis problems to standard-form SDPs over moment blocks.

Each stage's moment matrix becomes one PSD block.  The one-step recursion
is imposed entry-wise on the lower triangle of the (1, x) marginal, the
initial moments are pinned entry-wise, expectation constraints become
trace inequalities, and the objective is the stage-weighted trace cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import extract as _extract
from .core import (
    AffinePolicy,
    MomentMatrix,
    QuadraticForm,
    StateMoment,
    SynthesisProblem,
    SynthesisSolution,
    SystemStage,
    propagation_residual,
)
from .sdp import SdpProblem, SdpSolution, solve


@dataclass
class LoweringMap:
    """Which SDP block holds each stage's moment matrix."""

    stage_blocks: List[str]
    n: int
    m: int
    aux_blocks: List[str] = field(default_factory=list)

    def extract_moments(self, solution: SdpSolution) -> List[MomentMatrix]:
        return [
            MomentMatrix(solution.X[name], self.n, self.m)
            for name in self.stage_blocks
        ]


def _sym_unit(d: int, a: int, b: int) -> np.ndarray:
    """Symmetric E with trace(E X) == X[a, b] for symmetric X."""
    E = np.zeros((d, d))
    if a == b:
        E[a, a] = 1.0
    else:
        E[a, b] = E[b, a] = 0.5
    return E


def _recursion_coeffs(stage: SystemStage) -> List[Tuple[np.ndarray, np.ndarray, float]]:
    """Per lower-triangle entry (a, b) of the (1+n) marginal, the pair
    (coefficient on the next moment, coefficient on the current moment)
    and the right-hand side, encoding marginal(next) = push-forward(current)."""
    n, m = stage.n, stage.m
    d = 1 + n + m
    T = stage.transition()
    out = []
    for b in range(1 + n):
        for a in range(b, 1 + n):
            E_next = _sym_unit(d, a, b)
            M_cur = 0.5 * (np.outer(T[a], T[b]) + np.outer(T[b], T[a]))
            rhs = stage.sigma_w[a - 1, b - 1] if (a >= 1 and b >= 1) else 0.0
            out.append((E_next, M_cur, rhs))
    return out


def _add_stage_constraints(sdp: SdpProblem, problem: SynthesisProblem, names: List[str]) -> None:
    N_last = len(names) - 1
    for stage_idx, form in problem.constraints:
        if stage_idx == "all":
            targets = range(len(names))
        else:
            if not 0 <= int(stage_idx) <= N_last:
                raise ValueError(f"constraint stage {stage_idx} outside 0..{N_last}")
            targets = [int(stage_idx)]
        for t in targets:
            sdp.add_inequality({names[t]: form.M}, 0.0)


def _pin_initial(sdp: SdpProblem, initial: StateMoment, name: str, d: int) -> None:
    for b in range(1 + initial.n):
        for a in range(b, 1 + initial.n):
            sdp.add_equality({name: _sym_unit(d, a, b)}, initial.data[a, b])


def build_finite(problem: SynthesisProblem) -> Tuple[SdpProblem, LoweringMap]:
    """Finite-horizon program: N+1 moment blocks chained by the recursion."""
    if problem.mode != "finite":
        raise ValueError(f"expected finite mode, got {problem.mode!r}")
    if problem.initial is None:
        raise ValueError("finite mode requires initial moments")
    if abs(problem.initial.sigma11 - 1.0) > 1e-9:
        raise ValueError("initial state moment must have sigma11 = 1")
    dims = problem.dims
    d = dims.d
    sdp = SdpProblem()
    names = [f"sigma_{t}" for t in range(dims.N + 1)]
    for name in names:
        sdp.add_block(name, d)
    _pin_initial(sdp, problem.initial, names[0], d)
    for t, stage in enumerate(problem.stages):
        for E_next, M_cur, rhs in _recursion_coeffs(stage):
            sdp.add_equality({names[t + 1]: E_next, names[t]: -M_cur}, rhs)
    _add_stage_constraints(sdp, problem, names)
    for t, cost in enumerate(problem.costs):
        sdp.add_objective({names[t]: cost.M})
    return sdp, LoweringMap(names, dims.n, dims.m)


def build_stationary(problem: SynthesisProblem) -> Tuple[SdpProblem, LoweringMap]:
    """Stationary average-cost program: one moment block, fixed-point recursion."""
    if problem.mode != "stationary":
        raise ValueError(f"expected stationary mode, got {problem.mode!r}")
    dims = problem.dims
    d = dims.d
    sdp = SdpProblem()
    name = "sigma"
    sdp.add_block(name, d)
    sdp.add_equality({name: _sym_unit(d, 0, 0)}, 1.0)
    stage = problem.stages[0]
    for E_next, M_cur, rhs in _recursion_coeffs(stage):
        sdp.add_equality({name: E_next - M_cur}, rhs)
    _add_stage_constraints(sdp, problem, [name])
    sdp.add_objective({name: problem.costs[0].M})
    return sdp, LoweringMap([name], dims.n, dims.m)


def build_stationary_tail(problem: SynthesisProblem) -> Tuple[SdpProblem, LoweringMap]:
    """Discounted program with a stationary tail at the final stage.

    Stage weights are gamma^t for t < N and gamma^N / (1 - gamma) for the
    final, stationary stage.  A single cost in the problem is applied at
    every stage; otherwise costs are taken per stage.
    """
    if problem.mode != "stationary_tail":
        raise ValueError(f"expected stationary_tail mode, got {problem.mode!r}")
    gamma = problem.gamma
    dims = problem.dims
    N = dims.N
    d = dims.d
    sdp = SdpProblem()
    names = [f"sigma_{t}" for t in range(N + 1)]
    for name in names:
        sdp.add_block(name, d)
    if problem.initial is not None:
        _pin_initial(sdp, problem.initial, names[0], d)
    else:
        sdp.add_equality({names[0]: _sym_unit(d, 0, 0)}, 1.0)

    def stage_at(t: int) -> SystemStage:
        return problem.stages[min(t, len(problem.stages) - 1)]

    for t in range(N):
        for E_next, M_cur, rhs in _recursion_coeffs(stage_at(t)):
            sdp.add_equality({names[t + 1]: E_next, names[t]: -M_cur}, rhs)
    for E_next, M_cur, rhs in _recursion_coeffs(stage_at(N)):
        sdp.add_equality({names[N]: E_next - M_cur}, rhs)
    _add_stage_constraints(sdp, problem, names)

    def cost_at(t: int) -> QuadraticForm:
        return problem.costs[min(t, len(problem.costs) - 1)]

    for t in range(N):
        sdp.add_objective({names[t]: gamma**t * cost_at(t).M})
    tail_weight = gamma**N / (1.0 - gamma)
    sdp.add_objective({names[N]: tail_weight * cost_at(N).M})
    return sdp, LoweringMap(names, dims.n, dims.m)


def stage_weights(N: int, gamma: float) -> List[float]:
    """Objective weights of the discounted program with stationary tail."""
    return [gamma**t for t in range(N)] + [gamma**N / (1.0 - gamma)]


def add_schur_excitation(
    sdp: SdpProblem,
    lmap: LoweringMap,
    stage_or_all,
    level,
) -> SdpProblem:
    """Force the extracted excitation covariance to satisfy sigma_v >= level I.

    An auxiliary PSD block is pinned equal to the stage's moment matrix
    with level subtracted from the diagonal of the input-input block; its
    positive semidefiniteness is, via the Schur complement against the
    (1, x) corner, exactly the excitation lower bound.  level may be a
    scalar or one value per input.
    """
    n, m = lmap.n, lmap.m
    levels = np.broadcast_to(np.asarray(level, dtype=float), (m,))
    if np.any(levels < 0):
        raise ValueError("excitation level must be >= 0")
    d = 1 + n + m
    if stage_or_all == "all":
        targets = range(len(lmap.stage_blocks))
    else:
        targets = [int(stage_or_all)]
    for t in targets:
        sigma_name = lmap.stage_blocks[t]
        aux = f"excite_{t}"
        sdp.add_block(aux, d)
        lmap.aux_blocks.append(aux)
        for b in range(d):
            for a in range(b, d):
                E = _sym_unit(d, a, b)
                shift = -levels[a - 1 - n] if (a == b and a >= 1 + n) else 0.0
                sdp.add_equality({aux: E, sigma_name: -E}, shift)
    return sdp


def scale_problem(
    problem: SynthesisProblem, dx: np.ndarray, du: np.ndarray
) -> SynthesisProblem:
    """Rewrite the problem under the change of variables x = diag(dx) x',
    u = diag(du) u'.

    Objective values are invariant; moments transform by congruence with
    diag(1, dx, du).  Used to equilibrate badly scaled instances before
    handing them to the interior-point solver.
    """
    n, m = problem.dims.n, problem.dims.m
    dx = np.asarray(dx, dtype=float).reshape(n)
    du = np.asarray(du, dtype=float).reshape(m)
    if np.any(dx <= 0) or np.any(du <= 0):
        raise ValueError("scaling factors must be positive")
    D = np.concatenate([[1.0], dx, du])
    ix = np.s_[1 : 1 + n]
    stages = [
        SystemStage(
            f=st.f / dx,
            A=st.A * (dx[None, :] / dx[:, None]),
            B=st.B * (du[None, :] / dx[:, None]),
            sigma_w=st.sigma_w / np.outer(dx, dx),
        )
        for st in problem.stages
    ]
    costs = [
        QuadraticForm(np.outer(D, D) * c.M, sense=c.sense) for c in problem.costs
    ]
    constraints = [
        (idx, QuadraticForm(np.outer(D, D) * form.M, sense=form.sense))
        for idx, form in problem.constraints
    ]
    initial = problem.initial
    if initial is not None:
        Dbar = np.concatenate([[1.0], dx])
        initial = StateMoment(initial.data / np.outer(Dbar, Dbar), n)
    return SynthesisProblem(
        dims=problem.dims,
        stages=stages,
        costs=costs,
        constraints=constraints,
        initial=initial,
        mode=problem.mode,
        gamma=problem.gamma,
    )


def build(problem: SynthesisProblem) -> Tuple[SdpProblem, LoweringMap]:
    """Dispatch on the problem mode."""
    if problem.mode == "finite":
        return build_finite(problem)
    if problem.mode == "stationary":
        return build_stationary(problem)
    return build_stationary_tail(problem)


def solution_residuals(
    problem: SynthesisProblem, moments: List[MomentMatrix]
) -> List[float]:
    """Frobenius norms of the one-step recursion residuals per stage."""
    out = []
    if problem.mode == "stationary":
        stage = problem.stages[0]
        R = propagation_residual(moments[0], moments[0].state_marginal(), stage)
        out.append(float(np.linalg.norm(R)))
        return out
    for t in range(len(moments) - 1):
        stage = problem.stages[min(t, len(problem.stages) - 1)]
        R = propagation_residual(moments[t], moments[t + 1].state_marginal(), stage)
        out.append(float(np.linalg.norm(R)))
    if problem.mode == "stationary_tail":
        stage = problem.stages[min(len(moments) - 1, len(problem.stages) - 1)]
        R = propagation_residual(
            moments[-1], moments[-1].state_marginal(), stage
        )
        out.append(float(np.linalg.norm(R)))
    return out


def _solve_moments(
    problem: SynthesisProblem,
    feas_tol: float,
    max_iters: int,
    excitation_level,
    excitation_stage,
    verbose: bool,
) -> Tuple[str, float, List[MomentMatrix]]:
    sdp, lmap = build(problem)
    if excitation_level is not None:
        add_schur_excitation(sdp, lmap, excitation_stage, excitation_level)
    sol = solve(sdp, feas_tol=feas_tol, max_iters=max_iters, verbose=verbose)
    if sol.status != "optimal":
        return sol.status, float("nan"), []
    return "optimal", sol.objective, lmap.extract_moments(sol)


def solve_synthesis(
    problem: SynthesisProblem,
    feas_tol: float = 1e-8,
    max_iters: int = 200,
    excitation_level: Optional[float] = None,
    excitation_stage="all",
    extract_tol: float = 1e-6,
    scaling=None,
    verbose: bool = False,
) -> SynthesisSolution:
    """Lower, solve, and extract policies in one call.

    scaling equilibrates badly conditioned instances by a diagonal change
    of variables before solving: pass "auto" to derive the factors from a
    loose-tolerance pilot solve, or an explicit vector of 1+n+m positive
    factors (the leading entry is ignored).  Moments, policies, and the
    objective are always reported in the original coordinates.
    """
    n, m = problem.dims.n, problem.dims.m
    factors = None
    if isinstance(scaling, str):
        if scaling != "auto":
            raise ValueError(f"unknown scaling mode {scaling!r}")
        _, _, pilot = _solve_moments(
            problem, max(feas_tol, 1e-6), max_iters,
            excitation_level, excitation_stage, False,
        )
        if pilot:
            diag = np.max([np.diag(S.data) for S in pilot], axis=0)
            factors = np.sqrt(np.clip(diag, 1e-12, None))
            # A floor keeps directions the pilot left at numerical zero
            # from poisoning the conditioning of the scaled problem.
            factors = np.maximum(factors, 1e-6 * factors.max())
    elif scaling is not None:
        factors = np.asarray(scaling, dtype=float).reshape(1 + n + m)

    if factors is None:
        status, objective, moments = _solve_moments(
            problem, feas_tol, max_iters,
            excitation_level, excitation_stage, verbose,
        )
        if status != "optimal":
            return SynthesisSolution(
                moments=[], policies=[], objective=float("nan"),
                solver_status=status, residuals=[],
            )
        policies = [
            _extract.extract_policy(S, tol=1e-9, check_tol=extract_tol)
            for S in moments
        ]
    else:
        dx, du = factors[1 : 1 + n], factors[1 + n :]
        level = None
        if excitation_level is not None:
            level = np.asarray(excitation_level, dtype=float) / du**2
        status, objective, scaled_moments = _solve_moments(
            scale_problem(problem, dx, du), feas_tol, max_iters,
            level, excitation_stage, verbose,
        )
        if status != "optimal":
            return SynthesisSolution(
                moments=[], policies=[], objective=float("nan"),
                solver_status=status, residuals=[],
            )
        # Extract in the equilibrated coordinates, where small but genuine
        # variance directions sit above the pseudoinverse cutoff, and map
        # the policy back to the original coordinates.
        D = np.concatenate([[1.0], dx, du])
        Du, Dx = np.diag(du), np.diag(dx)
        moments = [
            MomentMatrix(S.data * np.outer(D, D), n, m) for S in scaled_moments
        ]
        policies = []
        for S in scaled_moments:
            pol = _extract.extract_policy(S, tol=1e-9, check_tol=extract_tol)
            policies.append(
                AffinePolicy(
                    k1=du * pol.k1,
                    K2=Du @ pol.K2 @ np.linalg.inv(Dx),
                    sigma_v=Du @ pol.sigma_v @ Du,
                )
            )
    residuals = solution_residuals(problem, moments)
    return SynthesisSolution(
        moments=moments,
        policies=policies,
        objective=objective,
        solver_status="optimal",
        residuals=residuals,
    )
