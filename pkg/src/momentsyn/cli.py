"""Command-line entry point: synthesize, simulate, verify, example.

Exit codes: 0 success/optimal, 2 infeasible, 3 unbounded, 4 numerical
trouble, 5 schema or input error.  The solver feasibility tolerance can be
overridden with the MOMENTSYN_FEAS_TOL environment variable.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click
import numpy as np

from . import extract as ex
from . import io as mio
from . import scenarios, simulate as sim
from .builder import solve_synthesis, solution_residuals
from .core import SynthesisProblem, SynthesisSolution, propagation_residual, quad_expectation

EXIT_BY_STATUS = {"optimal": 0, "infeasible": 2, "unbounded": 3, "numerical_trouble": 4}
EXIT_SCHEMA = 5


def _feas_tol(default: float = 1e-8) -> float:
    return float(os.environ.get("MOMENTSYN_FEAS_TOL", default))


@click.group()
def main():
    """Moment-matrix controller synthesis toolkit."""


def _load_problem(path: str) -> SynthesisProblem:
    try:
        return mio.problem_from_dict(mio.load_json(path))
    except mio.SchemaError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_SCHEMA)


def _load_solution(path: str) -> SynthesisSolution:
    try:
        return mio.solution_from_dict(mio.load_json(path))
    except mio.SchemaError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_SCHEMA)


@main.command()
@click.argument("problem_file", type=click.Path(exists=True))
@click.argument("out_file", type=click.Path())
@click.option("--feas-tol", type=float, default=None, help="solver feasibility tolerance")
@click.option("--max-iters", type=int, default=200)
@click.option("--excitation", type=float, default=None,
              help="enforce excitation covariance >= LEVEL * I at every stage")
@click.option("--verbose", is_flag=True)
def synthesize(problem_file, out_file, feas_tol, max_iters, excitation, verbose):
    """Solve a problem file and write the solution file."""
    problem = _load_problem(problem_file)
    tol = feas_tol if feas_tol is not None else _feas_tol()
    solution = solve_synthesis(
        problem, feas_tol=tol, max_iters=max_iters,
        excitation_level=excitation, verbose=verbose,
    )
    mio.save_json(
        mio.solution_to_dict(solution, problem.dims.n, problem.dims.m), out_file
    )
    click.echo(f"status: {solution.solver_status}  objective: {solution.objective}")
    if solution.solver_status == "optimal":
        applied = solution.policies
        if problem.mode == "finite":
            applied = applied[: problem.dims.N]
        click.echo(f"policy: {ex.classify(applied)}")
    sys.exit(EXIT_BY_STATUS[solution.solver_status])


@main.command(name="simulate")
@click.argument("solution_file", type=click.Path(exists=True))
@click.argument("problem_file", type=click.Path(exists=True))
@click.option("--trajectories", type=int, default=10)
@click.option("--seed", type=int, default=0)
@click.option("--horizon", type=int, default=None,
              help="override horizon (defaults to the problem horizon)")
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@click.option("--svg", "svg_path", type=click.Path(), default=None)
def simulate_cmd(solution_file, problem_file, trajectories, seed, horizon, csv_path, svg_path):
    """Monte Carlo simulation of a solved policy on the linear plant."""
    problem = _load_problem(problem_file)
    solution = _load_solution(solution_file)
    if solution.solver_status != "optimal":
        click.echo("error: solution is not optimal", err=True)
        sys.exit(EXIT_SCHEMA)
    if horizon is None:
        horizon = problem.dims.N if problem.mode == "finite" else 100
    if problem.initial is None:
        initial = sim.StateMoment.dirac(np.zeros(problem.dims.n))
    else:
        initial = problem.initial
    config = sim.SimConfig(trajectories=trajectories, seed=seed, horizon=horizon)
    batch = sim.simulate_linear(list(problem.stages), list(solution.policies),
                                initial, config)
    doc = mio.load_json(problem_file)
    scene_doc = doc.get("scene")
    if csv_path:
        sim.export_csv(batch, csv_path)
        click.echo(f"wrote {csv_path}")
    if svg_path:
        if scene_doc:
            scene = sim.Scene(
                kind=scene_doc.get("kind", "plane"),
                axes=tuple(scene_doc.get("axes", (0, 1))),
                obstacles=[
                    (tuple(o["center"]), o["radius"], o.get("margin", 0.0))
                    for o in scene_doc.get("obstacles", [])
                ],
            )
        elif problem.dims.n >= 2:
            scene = sim.Scene()
        else:
            scene = sim.Scene(kind="time", axes=(0, 0))
        sim.render_svg(batch, scene, svg_path)
        click.echo(f"wrote {svg_path}")
    sys.exit(0)


@main.command()
@click.argument("solution_file", type=click.Path(exists=True))
@click.argument("problem_file", type=click.Path(exists=True))
@click.option("--tol", type=float, default=1e-6)
def verify(solution_file, problem_file, tol):
    """Check a solution against the problem: PSD margins, recursion
    residuals, constraint slacks, and policy round-trip consistency."""
    problem = _load_problem(problem_file)
    solution = _load_solution(solution_file)
    ok = True
    moments = list(solution.moments)
    if not moments:
        click.echo("FAIL: solution contains no moment matrices")
        sys.exit(1)

    scale = max(1.0, max(float(np.linalg.norm(S.data)) for S in moments))
    for t, S in enumerate(moments):
        eig = float(np.linalg.eigvalsh(S.data)[0])
        line_ok = eig >= -tol * scale
        ok &= line_ok
        click.echo(f"stage {t}: min eigenvalue {eig:+.3e} "
                   f"{'ok' if line_ok else 'VIOLATED'}")
    for t, r in enumerate(solution_residuals(problem, moments)):
        line_ok = r <= tol * scale
        ok &= line_ok
        click.echo(f"stage {t}: recursion residual {r:.3e} "
                   f"{'ok' if line_ok else 'VIOLATED'}")
    for stage_idx, form in problem.constraints:
        targets = range(len(moments)) if stage_idx == "all" else [int(stage_idx)]
        for t in targets:
            if t >= len(moments):
                continue
            slack = quad_expectation(moments[t], form)
            line_ok = slack <= tol * scale
            ok &= line_ok
            click.echo(f"stage {t}: constraint value {slack:+.3e} "
                       f"{'ok' if line_ok else 'VIOLATED'}")
    # Policy consistency, one stage at a time so that errors cannot
    # compound through an amplifying closed loop.
    try:
        policies = [ex.extract_policy(S, tol=1e-9, check_tol=tol)
                    for S in moments]
        err = max(
            float(np.linalg.norm(
                ex.closed_loop_moment(S.state_marginal(), pol).data - S.data
            )) / scale
            for S, pol in zip(moments, policies)
        )
        line_ok = err <= max(tol, 1e-5)
        ok &= line_ok
        click.echo(f"policy consistency relative error {err:.3e} "
                   f"{'ok' if line_ok else 'VIOLATED'}")
    except ex.PolicyExtractionError as e:
        ok = False
        click.echo(f"policy extraction FAILED: {e}")
    click.echo("PASS" if ok else "FAIL")
    sys.exit(0 if ok else 1)


@main.command()
@click.argument("name", type=click.Choice(
    ["obstacle1", "obstacle2", "pendulum", "h2check", "lqrcheck"]))
@click.argument("out_dir", type=click.Path())
@click.option("--horizon", type=int, default=60, help="obstacle scenario horizon")
@click.option("--perturb", type=float, default=0.0,
              help="sideways shift of the blocking obstacle (obstacle2)")
@click.option("--trajectories", type=int, default=10)
@click.option("--seed", type=int, default=0)
def example(name, out_dir, horizon, perturb, trajectories, seed):
    """Materialize a built-in scenario: problem, solution, figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if name in ("obstacle1", "obstacle2"):
        _run_obstacle(name, out, horizon, perturb, trajectories, seed)
    elif name == "pendulum":
        _run_pendulum(out, seed)
    elif name == "lqrcheck":
        _run_lqrcheck(out, seed)
    else:
        _run_h2check(out, seed)
    sys.exit(0)


def _write_pair(out: Path, problem, solution, scene_doc=None):
    mio.save_json(mio.problem_to_dict(problem, scene=scene_doc), out / "problem.json")
    mio.save_json(
        mio.solution_to_dict(solution, problem.dims.n, problem.dims.m),
        out / "solution.json",
    )


def _run_obstacle(name, out, horizon, perturb, trajectories, seed):
    if name == "obstacle1":
        scenario = scenarios.two_obstacle_scenario(horizon)
    else:
        scenario = scenarios.blocking_obstacle_scenario(horizon, perturb)
    problem = scenario.to_problem()
    solution = solve_synthesis(problem, feas_tol=_feas_tol())
    if solution.solver_status != "optimal":
        click.echo(f"synthesis failed: {solution.solver_status}", err=True)
        sys.exit(EXIT_BY_STATUS[solution.solver_status])
    scene = scenario.scene()
    scene_doc = {
        "kind": scene.kind,
        "axes": list(scene.axes),
        "obstacles": [
            {"center": list(c), "radius": r, "margin": m}
            for c, r, m in scene.obstacles
        ],
    }
    _write_pair(out, problem, solution, scene_doc)
    config = sim.SimConfig(trajectories=trajectories, seed=seed,
                           horizon=problem.dims.N)
    batch = sim.simulate_linear(list(problem.stages), list(solution.policies),
                                problem.initial, config)
    sim.export_csv(batch, out / "trajectories.csv")
    sim.render_svg(batch, scene, out / "figure.svg")
    kind = ex.classify(solution.policies[: problem.dims.N])
    click.echo(f"objective {solution.objective:.4f}, policy {kind}")
    click.echo(f"wrote {out}/problem.json solution.json trajectories.csv figure.svg")


def _run_pendulum(out, seed):
    scenario = scenarios.PendulumScenario()
    p = scenario.params
    problem = scenario.to_problem()
    solution = solve_synthesis(problem, feas_tol=_feas_tol(),
                               excitation_level=scenario.excitation(),
                               scaling="auto", max_iters=400)
    if solution.solver_status != "optimal":
        click.echo(f"synthesis failed: {solution.solver_status}", err=True)
        sys.exit(EXIT_BY_STATUS[solution.solver_status])
    _write_pair(out, problem, solution)
    escape = solution.policies[0]
    trace_v = float(np.trace(escape.sigma_v))
    energy = quad_expectation(solution.moments[0], scenarios.energy_form(p)) \
        + scenarios.energy_cap(p)
    click.echo(f"excitation trace {trace_v:.4f} (bound {scenario.excitation():.4f})")
    click.echo(f"average energy {energy:.6f} (cap {scenarios.energy_cap(p):.6f})")
    stabilizer, rule = sim.design_stabilizer(p, angle_cap=0.05)
    horizon = int(round(60.0 / p.h))
    config = sim.SimConfig(trajectories=2, seed=seed, horizon=horizon)
    batch = sim.simulate_pendulum(p, escape, stabilizer, rule, config)
    sim.export_csv(batch, out / "trajectories.csv")
    sim.render_svg(batch, sim.Scene(kind="time", axes=(1, 0)), out / "angle.svg")
    sim.render_svg(batch, sim.Scene(kind="time", axes=(0, 0)), out / "cart.svg")
    for i, s in enumerate(batch.meta["switch_step"]):
        t = s * p.h if s >= 0 else float("nan")
        click.echo(f"trajectory {i}: stabilizer engaged at t = {t:.2f} s")
    click.echo(f"wrote {out}/problem.json solution.json trajectories.csv angle.svg cart.svg")


def _run_lqrcheck(out, seed):
    from .duality import riccati_lqr

    rng = np.random.default_rng(seed)
    problem = scenarios.random_lqr_problem(rng, n=3, m=2, N=8)
    solution = solve_synthesis(problem, feas_tol=_feas_tol())
    _write_pair(out, problem, solution)
    gains, _ = riccati_lqr(list(problem.stages), list(problem.costs))
    err = max(
        float(np.max(np.abs(pol.gain() - K)))
        for pol, K in zip(solution.policies, gains)
    )
    click.echo(f"max gain deviation from the Riccati oracle: {err:.3e}")
    click.echo(f"wrote {out}/problem.json solution.json")


def _run_h2check(out, seed):
    from .duality import h2_norm_squared

    rng = np.random.default_rng(seed)
    problem, C, B2 = scenarios.random_h2_instance(rng, n=3, m=1)
    solution = solve_synthesis(problem, feas_tol=_feas_tol())
    _write_pair(out, problem, solution)
    K2 = solution.policies[0].K2
    ref = h2_norm_squared(problem.stages[0], C, B2, K2)
    rel = abs(solution.objective - ref) / max(1.0, abs(ref))
    click.echo(f"SDP objective {solution.objective:.6f}, "
               f"closed-loop squared H2 norm {ref:.6f}, relative gap {rel:.2e}")
    click.echo(f"wrote {out}/problem.json solution.json")


if __name__ == "__main__":
    main()
