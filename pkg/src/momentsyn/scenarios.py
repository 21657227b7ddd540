"""Built-in benchmark scenarios and random instance generators.

The obstacle scenarios are planar double-integrator reach tasks with
expectation keep-out constraints; the pendulum scenario is the stationary
swing-up design with forced excitation.  Random LQR / H2 generators feed
the oracle cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import (
    Dimensions,
    QuadraticForm,
    StateMoment,
    SynthesisProblem,
    SystemStage,
)
from .simulate import PendulumParams, Scene


@dataclass
class ObstacleScenario:
    """Planar integrator steering to the origin around keep-out disks.

    The speed bound caps E||u||^2 per stage; each obstacle imposes
    E||x - center||^2 >= (radius + margin)^2 at every stage.
    """

    centers: List[Tuple[float, float]]
    radii: List[float]
    margin: float = 0.1
    speed_bound: float = 0.1
    horizon: int = 60
    terminal_weight: float = 100.0
    start: Tuple[float, float] = (-10.0, 0.0)

    def __post_init__(self):
        if len(self.centers) != len(self.radii):
            raise ValueError("one radius per obstacle center")
        if any(r <= 0 for r in self.radii) or self.margin < 0:
            raise ValueError("radii must be positive and margin nonnegative")

    def to_problem(self) -> SynthesisProblem:
        n = m = 2
        N = self.horizon
        dims = Dimensions(n=n, m=m, N=N, s=1 + len(self.centers))
        stage = SystemStage(
            f=np.zeros(n), A=np.eye(n), B=np.eye(m), sigma_w=np.zeros((n, n))
        )
        running = QuadraticForm(np.diag([0.0, 1.0, 1.0, 1.0, 1.0]))
        terminal = QuadraticForm(
            np.diag([0.0, self.terminal_weight, self.terminal_weight, 0.0, 0.0])
        )
        costs = [running] * N + [terminal]

        constraints = []
        speed = np.diag([-self.speed_bound, 0.0, 0.0, 1.0, 1.0])
        constraints.append(("all", QuadraticForm(speed, sense="leq_zero")))
        for center, r in zip(self.centers, self.radii):
            c = np.asarray(center, dtype=float)
            keep = (r + self.margin) ** 2
            H = np.zeros((5, 5))
            H[0, 0] = keep - c @ c
            H[0, 1:3] = c
            H[1:3, 0] = c
            H[1:3, 1:3] = -np.eye(2)
            constraints.append(("all", QuadraticForm(H, sense="leq_zero")))

        return SynthesisProblem(
            dims=dims,
            stages=[stage] * N,
            costs=costs,
            constraints=constraints,
            initial=StateMoment.dirac(self.start),
            mode="finite",
        )

    def scene(self) -> Scene:
        return Scene(
            kind="plane",
            axes=(0, 1),
            obstacles=[
                (tuple(c), r, self.margin) for c, r in zip(self.centers, self.radii)
            ],
        )

    def clearances(self, states: np.ndarray) -> np.ndarray:
        """Distances to each obstacle center minus its radius, per point."""
        states = np.asarray(states)
        out = []
        for center, r in zip(self.centers, self.radii):
            d = np.linalg.norm(states[..., :2] - np.asarray(center), axis=-1)
            out.append(d - r)
        return np.stack(out, axis=-1)


def two_obstacle_scenario(horizon: int = 60) -> ObstacleScenario:
    """Two offset disks between the start and the origin."""
    return ObstacleScenario(
        centers=[(-7.5, 0.5), (-2.5, -0.5)],
        radii=[1.0, 1.0],
        horizon=horizon,
    )


def blocking_obstacle_scenario(
    horizon: int = 60, perturb: float = 0.0
) -> ObstacleScenario:
    """One disk exactly between start and target; perturb shifts it sideways."""
    return ObstacleScenario(
        centers=[(-5.0, 0.0 + perturb)],
        radii=[1.0],
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# Pendulum swing-up
# ---------------------------------------------------------------------------

ENERGY_CAP_ANGLE = 2.0
ENERGY_REWARD = 1e4
EXCITATION_SCALE = 1e4


def energy_coefficients(p: PendulumParams) -> Tuple[float, float]:
    """Quadratic energy proxy e(x2, x4) = a2 x2^2 + a4 x4^2."""
    return 0.5 * p.m2 * p.g * p.l, 0.5 * p.g * p.l**2


def energy_form(p: PendulumParams) -> QuadraticForm:
    """Constraint form for E[e(x2, x4)] <= e(ENERGY_CAP_ANGLE, 0)."""
    a2, a4 = energy_coefficients(p)
    cap = a2 * ENERGY_CAP_ANGLE**2
    H = np.zeros((6, 6))
    H[0, 0] = -cap
    H[2, 2] = a2
    H[4, 4] = a4
    return QuadraticForm(H, sense="leq_zero")


def energy_cap(p: PendulumParams) -> float:
    a2, _ = energy_coefficients(p)
    return a2 * ENERGY_CAP_ANGLE**2


def excitation_level(p: PendulumParams) -> float:
    return EXCITATION_SCALE * p.h


@dataclass
class PendulumScenario:
    """Stationary escape-controller design for the cart-pole swing-up.

    The default step is shorter than the generic pendulum default: with
    h = 0.01 the forced excitation already pumps more average energy into
    the angular velocity than the energy cap allows, making the synthesis
    infeasible.
    """

    params: PendulumParams = field(
        default_factory=lambda: PendulumParams(h=0.004)
    )

    def to_problem(self) -> SynthesisProblem:
        from .simulate import linearized_stage

        p = self.params
        stage = linearized_stage(p)
        a2, a4 = energy_coefficients(p)
        R = np.diag(
            [0.0, 1.0, -ENERGY_REWARD * a2, 1.0, -ENERGY_REWARD * a4, 1.0]
        )
        return SynthesisProblem(
            dims=Dimensions(n=4, m=1, N=0, s=1),
            stages=[stage],
            costs=[QuadraticForm(R)],
            constraints=[("all", energy_form(p))],
            initial=None,
            mode="stationary",
        )

    def excitation(self) -> float:
        return excitation_level(self.params)


# ---------------------------------------------------------------------------
# Random oracle instances
# ---------------------------------------------------------------------------


def random_stable_matrix(
    rng: np.random.Generator, n: int, radius_range=(0.3, 0.95)
) -> np.ndarray:
    """Gaussian matrix rescaled to a uniform random spectral radius."""
    A = rng.standard_normal((n, n))
    rho = max(abs(np.linalg.eigvals(A)))
    target = rng.uniform(*radius_range)
    return A * (target / rho)


def random_psd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    G = rng.standard_normal((n, n))
    return scale * (G @ G.T) / n


def random_lqr_problem(
    rng: np.random.Generator, n: int, m: int, N: int
) -> SynthesisProblem:
    """Finite-horizon instance with PSD costs and no expectation constraints."""
    d = 1 + n + m
    stages = []
    for _ in range(N):
        stages.append(
            SystemStage(
                f=0.3 * rng.standard_normal(n),
                A=random_stable_matrix(rng, n, (0.3, 1.1)),
                B=rng.standard_normal((n, m)),
                sigma_w=random_psd(rng, n, 0.5) + 0.05 * np.eye(n),
            )
        )
    costs = []
    for _ in range(N + 1):
        G = rng.standard_normal((d, d)) / np.sqrt(d)
        M = G @ G.T
        M[1 + n :, 1 + n :] += 0.5 * np.eye(m)  # keep the input block well-posed
        costs.append(QuadraticForm(M))
    mean = rng.standard_normal(n)
    cov = random_psd(rng, n, 0.5) + 0.05 * np.eye(n)
    return SynthesisProblem(
        dims=Dimensions(n=n, m=m, N=N),
        stages=stages,
        costs=costs,
        constraints=[],
        initial=StateMoment.from_mean_cov(mean, cov),
        mode="finite",
    )


def random_h2_instance(rng: np.random.Generator, n: int, m: int):
    """Stationary instance whose optimum is a squared H2 norm.

    Returns (problem, C, B2): cost [0 C 0]'[0 C 0] on (1, x, u) and noise
    covariance B2 B2'.
    """
    d = 1 + n + m
    A = random_stable_matrix(rng, n)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((n, n)) + 0.5 * np.eye(n)
    B2 = rng.standard_normal((n, n)) + 0.5 * np.eye(n)
    stage = SystemStage(f=np.zeros(n), A=A, B=B, sigma_w=B2 @ B2.T)
    sel = np.zeros((n, d))
    sel[:, 1 : 1 + n] = C
    R = sel.T @ sel
    problem = SynthesisProblem(
        dims=Dimensions(n=n, m=m, N=0),
        stages=[stage],
        costs=[QuadraticForm(R)],
        constraints=[],
        initial=None,
        mode="stationary",
    )
    return problem, C, B2
