"""JSON problem/solution files with canonical serialization.

Matrices are row-major nested arrays of numbers.  Serialization sorts keys
and uses shortest-roundtrip floats, so regenerating a file is
byte-identical.
"""

from __future__ import annotations

import json
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from .core import (
    AffinePolicy,
    Dimensions,
    MomentMatrix,
    QuadraticForm,
    StateMoment,
    SynthesisProblem,
    SynthesisSolution,
    SystemStage,
)

_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_VECTOR = {"type": "array", "items": {"type": "number"}}

PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["dims", "mode", "stages", "costs", "constraints"],
    "properties": {
        "dims": {
            "type": "object",
            "required": ["n", "m", "N"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "m": {"type": "integer", "minimum": 1},
                "N": {"type": "integer", "minimum": 0},
                "s": {"type": "integer", "minimum": 0},
            },
        },
        "mode": {"enum": ["finite", "stationary", "stationary_tail"]},
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["f", "A", "B", "sigma_w"],
                "properties": {
                    "f": _VECTOR,
                    "A": _MATRIX,
                    "B": _MATRIX,
                    "sigma_w": _MATRIX,
                },
            },
        },
        "costs": {"type": "array", "items": _MATRIX},
        "constraints": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["stage", "H"],
                "properties": {
                    "stage": {
                        "anyOf": [{"type": "integer", "minimum": 0}, {"const": "all"}]
                    },
                    "H": _MATRIX,
                },
            },
        },
        "initial": {
            "type": ["object", "null"],
            "required": ["sigma11", "sigma12", "Sigma22"],
            "properties": {
                "sigma11": {"type": "number"},
                "sigma12": _VECTOR,
                "Sigma22": _MATRIX,
            },
        },
        "scene": {"type": "object"},
    },
}

SOLUTION_SCHEMA = {
    "type": "object",
    "required": ["status", "objective", "moments", "policies", "residuals"],
    "properties": {
        "status": {
            "enum": ["optimal", "infeasible", "unbounded", "numerical_trouble"]
        },
        "objective": {"type": ["number", "null"]},
        "residuals": _VECTOR,
        "moments": {"type": "array", "items": _MATRIX},
        "policies": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["k1", "K2", "sigma_v"],
                "properties": {"k1": _VECTOR, "K2": _MATRIX, "sigma_v": _MATRIX},
            },
        },
        "dims": {"type": "object"},
    },
}


class SchemaError(ValueError):
    """A problem or solution file failed validation."""


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _mat(M) -> List[List[float]]:
    return [[float(v) for v in row] for row in np.atleast_2d(np.asarray(M))]


def _vec(v) -> List[float]:
    return [float(x) for x in np.asarray(v).reshape(-1)]


def problem_to_dict(problem: SynthesisProblem, scene: Optional[dict] = None) -> Dict:
    doc = {
        "dims": {
            "n": problem.dims.n,
            "m": problem.dims.m,
            "N": problem.dims.N,
            "s": problem.dims.s,
        },
        "mode": problem.mode,
        "stages": [
            {
                "f": _vec(st.f),
                "A": _mat(st.A),
                "B": _mat(st.B),
                "sigma_w": _mat(st.sigma_w),
            }
            for st in problem.stages
        ],
        "costs": [_mat(c.M) for c in problem.costs],
        "constraints": [
            {"stage": stage, "H": _mat(form.M)} for stage, form in problem.constraints
        ],
        "initial": None
        if problem.initial is None
        else {
            "sigma11": problem.initial.sigma11,
            "sigma12": _vec(problem.initial.sigma12),
            "Sigma22": _mat(problem.initial.Sigma22),
        },
    }
    if problem.gamma is not None:
        doc["gamma"] = problem.gamma
    if scene is not None:
        doc["scene"] = scene
    return doc


def problem_from_dict(doc: Dict) -> SynthesisProblem:
    try:
        jsonschema.validate(doc, PROBLEM_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError(f"problem file invalid at {path}: {e.message}") from e
    dims = Dimensions(
        n=doc["dims"]["n"],
        m=doc["dims"]["m"],
        N=doc["dims"]["N"],
        s=doc["dims"].get("s", 0),
    )
    try:
        stages = [
            SystemStage(
                f=np.array(s["f"]),
                A=np.array(s["A"]),
                B=np.array(s["B"]),
                sigma_w=np.array(s["sigma_w"]),
            )
            for s in doc["stages"]
        ]
        costs = [QuadraticForm(np.array(M)) for M in doc["costs"]]
        constraints = [
            (c["stage"], QuadraticForm(np.array(c["H"]), sense="leq_zero"))
            for c in doc["constraints"]
        ]
        initial = None
        if doc.get("initial") is not None:
            init = doc["initial"]
            n = dims.n
            D = np.zeros((1 + n, 1 + n))
            D[0, 0] = init["sigma11"]
            D[0, 1:] = init["sigma12"]
            D[1:, 0] = init["sigma12"]
            D[1:, 1:] = init["Sigma22"]
            initial = StateMoment(D, n)
        return SynthesisProblem(
            dims=dims,
            stages=stages,
            costs=costs,
            constraints=constraints,
            initial=initial,
            mode=doc["mode"],
            gamma=doc.get("gamma"),
        )
    except (ValueError, KeyError) as e:
        raise SchemaError(f"problem file inconsistent: {e}") from e


def solution_to_dict(solution: SynthesisSolution, n: int, m: int) -> Dict:
    return {
        "status": solution.solver_status,
        "objective": None
        if solution.objective != solution.objective  # NaN
        else float(solution.objective),
        "residuals": [float(r) for r in solution.residuals],
        "moments": [_mat(S.data) for S in solution.moments],
        "policies": [
            {"k1": _vec(p.k1), "K2": _mat(p.K2), "sigma_v": _mat(p.sigma_v)}
            for p in solution.policies
        ],
        "dims": {"n": n, "m": m},
    }


def solution_from_dict(doc: Dict) -> SynthesisSolution:
    try:
        jsonschema.validate(doc, SOLUTION_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError(f"solution file invalid at {path}: {e.message}") from e
    n = doc["dims"]["n"]
    m = doc["dims"]["m"]
    moments = [MomentMatrix(np.array(M), n, m) for M in doc["moments"]]
    policies = [
        AffinePolicy(
            k1=np.array(p["k1"]), K2=np.array(p["K2"]), sigma_v=np.array(p["sigma_v"])
        )
        for p in doc["policies"]
    ]
    objective = doc["objective"]
    return SynthesisSolution(
        moments=moments,
        policies=policies,
        objective=float("nan") if objective is None else float(objective),
        solver_status=doc["status"],
        residuals=list(doc["residuals"]),
    )


def load_json(path: str) -> Dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: not valid JSON ({e})") from e


def save_json(doc: Dict, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_dumps(doc))
