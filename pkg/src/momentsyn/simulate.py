"""Monte Carlo closed-loop simulation and trajectory export.

Linear closed loops are simulated exactly under the affine stochastic
policy; the cart-pole swing-up is integrated on the nonlinear ODE with a
zero-order-hold controller.  All randomness is derived per trajectory from
(seed, trajectory index), so results are bit-exact regardless of execution
order or parallelism.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as sla
from scipy.signal import cont2discrete

from .core import AffinePolicy, MomentMatrix, StateMoment, SystemStage


class SimulationDivergenceError(RuntimeError):
    def __init__(self, time: float):
        self.time = time
        super().__init__(f"state norm exceeded 1e6 at t = {time:.4f} s")


@dataclass(frozen=True)
class SimConfig:
    trajectories: int
    seed: int
    horizon: int
    noise_model: str = "gaussian"
    record_inputs: bool = True

    def __post_init__(self):
        if self.trajectories < 1:
            raise ValueError("need at least one trajectory")
        if self.noise_model != "gaussian":
            raise ValueError(f"unknown noise model {self.noise_model!r}")


@dataclass
class TrajectoryBatch:
    """Realized states and inputs plus the per-trajectory seed record."""

    states: np.ndarray  # (trajectories, horizon+1, n)
    inputs: np.ndarray  # (trajectories, horizon, m)
    seed: int
    sub_seeds: List[Tuple[int, ...]]
    meta: Dict = field(default_factory=dict)

    @property
    def trajectories(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]


def _psd_sqrt(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    if w.size and w[0] < -1e-9 * scale:
        raise ValueError(f"{name} is not positive semidefinite (min eig {w[0]:.3e})")
    return V * np.sqrt(np.clip(w, 0.0, None))


def _trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


InitialSampler = Union[StateMoment, Callable[[np.random.Generator], np.ndarray]]


def _draw_noise(
    config: SimConfig, n: int, m: int, initial: InitialSampler
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-trajectory draws: x0 plus standard normals for v and w."""
    T, H = config.trajectories, config.horizon
    x0 = np.empty((T, n))
    zv = np.empty((T, H, m))
    zw = np.empty((T, H, n))
    gaussian_init = isinstance(initial, StateMoment)
    if gaussian_init:
        mean = initial.mean
        L0 = _psd_sqrt(initial.cov, "initial covariance")
    for i in range(T):
        rng = _trajectory_rng(config.seed, i)
        if gaussian_init:
            x0[i] = mean + L0 @ rng.standard_normal(n)
        else:
            x0[i] = np.asarray(initial(rng), dtype=float).reshape(n)
        z = rng.standard_normal(H * (m + n))
        zv[i] = z[: H * m].reshape(H, m)
        zw[i] = z[H * m :].reshape(H, n)
    return x0, zv, zw


def simulate_linear(
    stages: Sequence[SystemStage],
    policies: Sequence[AffinePolicy],
    initial_sampler: InitialSampler,
    config: SimConfig,
) -> TrajectoryBatch:
    """Simulate u = k1 + K2 x + v on the affine plant with Gaussian v, w.

    Stages and policies shorter than the horizon repeat their last entry,
    covering stationary closed loops.
    """
    if not stages or not policies:
        raise ValueError("need at least one stage and one policy")
    n, m = stages[0].n, stages[0].m
    H, T = config.horizon, config.trajectories
    x0, zv, zw = _draw_noise(config, n, m, initial_sampler)

    states = np.empty((T, H + 1, n))
    inputs = np.empty((T, H, m))
    states[:, 0, :] = x0
    x = x0
    for t in range(H):
        stage = stages[min(t, len(stages) - 1)]
        policy = policies[min(t, len(policies) - 1)]
        Lv = _psd_sqrt(policy.sigma_v, "sigma_v")
        Lw = _psd_sqrt(stage.sigma_w, "sigma_w")
        v = zv[:, t, :] @ Lv.T
        w = zw[:, t, :] @ Lw.T
        u = policy.k1 + x @ policy.K2.T + v
        inputs[:, t, :] = u
        x = stage.f + x @ stage.A.T + u @ stage.B.T + w
        states[:, t + 1, :] = x
    return TrajectoryBatch(
        states=states,
        inputs=inputs if config.record_inputs else np.empty((T, H, 0)),
        seed=config.seed,
        sub_seeds=[(i,) for i in range(T)],
    )


def empirical_moments(batch: TrajectoryBatch, t: int) -> MomentMatrix:
    """Sample second moment of (1, x_t, u_t) across trajectories."""
    if not 0 <= t < batch.horizon:
        raise IndexError(f"stage {t} outside 0..{batch.horizon - 1}")
    if batch.inputs.shape[2] == 0:
        raise ValueError("inputs were not recorded")
    T = batch.trajectories
    z = np.hstack(
        [np.ones((T, 1)), batch.states[:, t, :], batch.inputs[:, t, :]]
    )
    M = z.T @ z / T
    n = batch.states.shape[2]
    m = batch.inputs.shape[2]
    return MomentMatrix(M, n, m)


# ---------------------------------------------------------------------------
# Cart-pole pendulum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PendulumParams:
    """Cart-pole parameters; x2 = 0 is the hanging (lower) equilibrium."""

    g: float = 9.81
    m1: float = 1.0
    m2: float = 1e-3
    l: float = 1.0
    h: float = 0.01

    def __post_init__(self):
        if min(self.g, self.m1, self.m2, self.l, self.h) <= 0:
            raise ValueError("all pendulum parameters must be positive")


@dataclass(frozen=True)
class SwitchRule:
    """Switch to the stabilizer when z' P z <= level, z the upright error."""

    P: np.ndarray
    level: float


def cartpole_rhs(X: np.ndarray, u: np.ndarray, p: PendulumParams) -> np.ndarray:
    """Nonlinear cart-pole dynamics, vectorized over a batch of states."""
    x2 = X[:, 1]
    x3 = X[:, 2]
    x4 = X[:, 3]
    s = np.sin(x2)
    c = np.cos(x2)
    den = p.m1 + s * s * p.m2
    dx3 = (p.m2 * p.l * x4 * x4 * s - p.m2 * p.g * s * c + u) / den
    dx4 = ((p.m2 * p.l * x4 * x4 * c - (p.m1 + p.m2) * p.g) * s - (p.l * c) * u) / (
        p.l * den
    )
    return np.stack([x3, x4, dx3, dx4], axis=1)


def rk4_step(X: np.ndarray, u: np.ndarray, p: PendulumParams, dt: float) -> np.ndarray:
    k1 = cartpole_rhs(X, u, p)
    k2 = cartpole_rhs(X + 0.5 * dt * k1, u, p)
    k3 = cartpole_rhs(X + 0.5 * dt * k2, u, p)
    k4 = cartpole_rhs(X + dt * k3, u, p)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_hold(
    X: np.ndarray, u: np.ndarray, p: PendulumParams, nsub: int = 10
) -> np.ndarray:
    """One control interval of length h under zero-order hold, RK4 at h/nsub."""
    dt = p.h / nsub
    for _ in range(nsub):
        X = rk4_step(X, u, p, dt)
    return X


def wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def upright_error(X: np.ndarray, x1_ref: np.ndarray) -> np.ndarray:
    """Error coordinates around the upright equilibrium at cart position x1_ref."""
    z = np.array(X)
    z[:, 0] = X[:, 0] - x1_ref
    z[:, 1] = wrap_angle(X[:, 1] - np.pi)
    return z


def linearized_stage(p: PendulumParams) -> SystemStage:
    """The synthesis model: lower-equilibrium linearization, Euler step h."""
    h = p.h
    A = np.array(
        [
            [1.0, 0.0, h, 0.0],
            [0.0, 1.0, 0.0, h],
            [0.0, -h * p.m2 * p.g / p.m1, 1.0, 0.0],
            [0.0, -h * (p.m1 + p.m2) * p.g / (p.l * p.m2), 0.0, 1.0],
        ]
    )
    B = np.array([[0.0], [0.0], [h / p.m2], [h * p.l / p.m1]])
    return SystemStage(f=np.zeros(4), A=A, B=B, sigma_w=np.zeros((4, 4)))


def upright_linearization(p: PendulumParams) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous-time Jacobian of the nonlinear model at the upright point."""
    eps = 1e-6
    x_eq = np.array([[0.0, np.pi, 0.0, 0.0]])
    A = np.zeros((4, 4))
    for j in range(4):
        d = np.zeros((1, 4))
        d[0, j] = eps
        fp = cartpole_rhs(x_eq + d, np.zeros(1), p)[0]
        fm = cartpole_rhs(x_eq - d, np.zeros(1), p)[0]
        A[:, j] = (fp - fm) / (2 * eps)
    fp = cartpole_rhs(x_eq, np.array([eps]), p)[0]
    fm = cartpole_rhs(x_eq, np.array([-eps]), p)[0]
    B = ((fp - fm) / (2 * eps)).reshape(4, 1)
    return A, B


def design_stabilizer(
    p: PendulumParams,
    sim_time: float = 8.0,
    n_boundary: int = 32,
    bisect_iters: int = 14,
    seed: int = 1234,
    angle_cap: Optional[float] = None,
) -> Tuple[AffinePolicy, SwitchRule]:
    """LQR stabilizer for the upright equilibrium plus a certified switch level.

    Discrete LQR (unit state weights, unit input weight) on the sampled
    upright linearization gives the gain and the Lyapunov matrix; the
    switch level is the largest sublevel set, found by bisection, whose
    boundary samples converge under the nonlinear closed loop with the
    Lyapunov value decreasing along the whole trajectory.  angle_cap, if
    given, additionally shrinks the level until the sublevel set contains
    no angle error larger than angle_cap.
    """
    Ac, Bc = upright_linearization(p)
    Ad, Bd, *_ = cont2discrete((Ac, Bc, np.eye(4), np.zeros((4, 1))), p.h)
    Q = np.eye(4)
    R = np.eye(1)
    P = sla.solve_discrete_are(Ad, Bd, Q, R)
    K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)  # u = -K z
    policy = AffinePolicy(k1=np.zeros(1), K2=-K, sigma_v=np.zeros((1, 1)))

    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_boundary, 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    steps = int(round(sim_time / p.h))

    def boundary_converges(c: float) -> bool:
        radii = np.sqrt(c / np.einsum("ij,jk,ik->i", dirs, P, dirs))
        Z = dirs * radii[:, None]
        X = np.zeros((n_boundary, 4))
        X[:, 0] = Z[:, 0]
        X[:, 1] = np.pi + Z[:, 1]
        X[:, 2:] = Z[:, 2:]
        prev = np.einsum("ij,jk,ik->i", Z, P, Z)
        for _ in range(steps):
            z = upright_error(X, np.zeros(n_boundary))
            u = policy.k1 + z @ policy.K2.T
            X = integrate_hold(X, u[:, 0], p)
            if np.max(np.abs(X)) > 1e6:
                return False
            z = upright_error(X, np.zeros(n_boundary))
            vals = np.einsum("ij,jk,ik->i", z, P, z)
            if np.any(vals > prev * (1.0 + 1e-9) + 1e-12):
                return False
            prev = vals
        return bool(np.all(prev <= 1e-3 * c + 1e-12))

    lo, hi = 0.0, 1.0
    while boundary_converges(hi):
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            break
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if boundary_converges(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0.0:
        raise RuntimeError("could not certify any region of attraction")
    if angle_cap is not None:
        # Largest angle error over {z' P z <= c} is sqrt(c * (P^-1)_22).
        pinv22 = float(np.linalg.inv(P)[1, 1])
        lo = min(lo, angle_cap**2 / pinv22)
    return policy, SwitchRule(P=P, level=lo)


def simulate_pendulum(
    params: PendulumParams,
    escape: AffinePolicy,
    stabilizer: AffinePolicy,
    switch: SwitchRule,
    config: SimConfig,
    initial_state: Optional[np.ndarray] = None,
) -> TrajectoryBatch:
    """Swing up the nonlinear cart-pole, then hand over to the stabilizer.

    The escape policy acts on the raw state (angle measured from the
    hanging position); once the upright error enters the switch sublevel
    set the stabilizer takes over permanently, regulating the cart to its
    position at the moment of switching.
    """
    T, H = config.trajectories, config.horizon
    x_init = np.zeros(4) if initial_state is None else np.asarray(initial_state, float)

    zv = np.empty((T, H))
    for i in range(T):
        rng = _trajectory_rng(config.seed, i)
        zv[i] = rng.standard_normal(H)
    sv = float(np.sqrt(max(escape.sigma_v[0, 0], 0.0)))

    X = np.tile(x_init, (T, 1))
    states = np.empty((T, H + 1, 4))
    inputs = np.empty((T, H, 1))
    states[:, 0, :] = X
    switched = np.zeros(T, dtype=bool)
    switch_step = np.full(T, -1, dtype=int)
    x1_ref = np.zeros(T)
    for t in range(H):
        if not switched.all():
            idx = ~switched
            z = upright_error(X[idx], X[idx, 0])  # cart-centered check
            vals = np.einsum("ij,jk,ik->i", z, switch.P, z)
            hit = vals <= switch.level
            if hit.any():
                who = np.flatnonzero(idx)[hit]
                switched[who] = True
                switch_step[who] = t
                x1_ref[who] = X[who, 0]
        u = np.empty(T)
        esc = ~switched
        if esc.any():
            u[esc] = (
                escape.k1[0] + X[esc] @ escape.K2[0] + sv * zv[esc, t]
            )
        if switched.any():
            z = upright_error(X[switched], x1_ref[switched])
            u[switched] = stabilizer.k1[0] + z @ stabilizer.K2[0]
        inputs[:, t, 0] = u
        X = integrate_hold(X, u, params)
        if np.max(np.abs(X)) > 1e6:
            raise SimulationDivergenceError((t + 1) * params.h)
        states[:, t + 1, :] = X
    return TrajectoryBatch(
        states=states,
        inputs=inputs,
        seed=config.seed,
        sub_seeds=[(i,) for i in range(T)],
        meta={"switch_step": switch_step, "x1_ref": x1_ref},
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_csv(batch: TrajectoryBatch, path: str) -> None:
    """Write trajectory_id, t, x1..xn, u1..um rows (RFC 4180, LF endings)."""
    n = batch.states.shape[2]
    m = batch.inputs.shape[2]
    header = (
        ["trajectory_id", "t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(m)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(batch.trajectories):
            for t in range(batch.states.shape[1]):
                row = [i, t] + [repr(v) for v in batch.states[i, t]]
                if t < batch.horizon:
                    row += [repr(v) for v in batch.inputs[i, t]]
                else:
                    row += [""] * m
                writer.writerow(row)


@dataclass
class Scene:
    """Static geometry drawn behind trajectories.

    kind "plane" plots state component axes[1] against axes[0]; kind
    "time" plots component axes[0] against the stage index.  Obstacles are
    (center, radius, margin) triples drawn as disks.
    """

    kind: str = "plane"
    axes: Tuple[int, int] = (0, 1)
    obstacles: List[Tuple[Tuple[float, float], float, float]] = field(
        default_factory=list
    )


def render_svg(batch: TrajectoryBatch, scene: Scene, path: str) -> None:
    """Render trajectories and scene geometry to a static SVG 1.1 file."""
    width, height, pad = 640.0, 480.0, 40.0
    if scene.kind == "time":
        xs = np.tile(
            np.arange(batch.states.shape[1], dtype=float), (batch.trajectories, 1)
        )
        ys = batch.states[:, :, scene.axes[0]]
    else:
        xs = batch.states[:, :, scene.axes[0]]
        ys = batch.states[:, :, scene.axes[1]]
    circle_pts = []
    for (cx, cy), r, eps in scene.obstacles:
        circle_pts += [
            (cx - r - eps, cy - r - eps),
            (cx + r + eps, cy + r + eps),
        ]
    all_x = np.concatenate([xs.ravel(), [p[0] for p in circle_pts]]) if circle_pts else xs.ravel()
    all_y = np.concatenate([ys.ravel(), [p[1] for p in circle_pts]]) if circle_pts else ys.ravel()
    if all_x.size == 0:
        all_x = np.array([0.0, 1.0])
        all_y = np.array([0.0, 1.0])
    x0, x1 = float(all_x.min()), float(all_x.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    sx = (width - 2 * pad) / (x1 - x0)
    sy = (height - 2 * pad) / (y1 - y0)

    def to_px(x, y):
        return pad + (x - x0) * sx, height - pad - (y - y0) * sy

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
    ]
    for (cx, cy), r, eps in scene.obstacles:
        px, py = to_px(cx, cy)
        if eps > 0:
            parts.append(
                f'<ellipse cx="{px:.2f}" cy="{py:.2f}" rx="{(r + eps) * sx:.2f}" '
                f'ry="{(r + eps) * sy:.2f}" fill="#cccccc"/>'
            )
        parts.append(
            f'<ellipse cx="{px:.2f}" cy="{py:.2f}" rx="{r * sx:.2f}" '
            f'ry="{r * sy:.2f}" fill="#222222"/>'
        )
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
              "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    for i in range(batch.trajectories):
        pts = " ".join(
            "%.2f,%.2f" % to_px(xs[i, t], ys[i, t]) for t in range(xs.shape[1])
        )
        color = colors[i % len(colors)]
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
