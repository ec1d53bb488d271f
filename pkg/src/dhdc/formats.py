"""Versioned JSON documents and CSV logs.

All file formats carry explicit schema strings so golden-file tests and
other implementations can validate them.  Serialization is canonical:
keys sorted, arrays nested row-major, floats in shortest round-trip form.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import (
    Clique,
    Gaussian,
    Hierarchy,
    LevelParams,
    LtiSystem,
    Obstacle,
    Scenario,
)

SCENARIO_SCHEMA = "dhdc-scenario-v1"
LEVELS_SCHEMA = "dhdc-levels-v1"
POLICIES_SCHEMA = "dhdc-policies-v1"
SAFETY_SCHEMA = "dhdc-safety-v1"


class FormatError(ValueError):
    """Malformed or mismatching document."""


def _arr(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def _gauss_dict(g: Gaussian) -> dict:
    return {"mean": _arr(g.mean), "cov": _arr(g.cov)}


def _gauss_load(d: dict) -> Gaussian:
    return Gaussian(mean=np.asarray(d["mean"]), cov=np.asarray(d["cov"]))


def dump_json(doc: dict, path) -> None:
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _expect_schema(doc: dict, schema: str) -> None:
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise FormatError(
            f"expected schema {schema!r}, found {doc.get('schema')!r}"
            if isinstance(doc, dict) else "document is not a JSON object")


# -- scenario ---------------------------------------------------------------


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "schema": SCENARIO_SCHEMA,
        "theta": sc.theta,
        "system": {
            "A": _arr(sc.system.A), "B": _arr(sc.system.B),
            "H": _arr(sc.system.H), "W": _arr(sc.system.W),
            "N": sc.system.N, "dt": sc.system.dt,
        },
        "R": _arr(sc.R),
        "hierarchy": {
            "levels": sc.hierarchy.levels,
            "cliques": [
                {
                    "id": c.id, "level": c.level, "parent": c.parent,
                    "children": list(c.children),
                    "neighbors": list(c.neighbors),
                    "reverse": list(c.reverse),
                }
                for c in sorted(sc.hierarchy.cliques.values(),
                                key=lambda c: c.id)
            ],
        },
        "agents": {
            str(a): {
                "initial": _gauss_dict(sc.leaf_initial[a]),
                "target": _gauss_dict(sc.leaf_target[a]),
            }
            for a in sorted(sc.leaf_initial)
        },
        "obstacles": [
            {"center": _arr(o.center), "radius": o.radius}
            for o in sc.obstacles
        ],
        "level_params": {
            str(lv): {"r": p.r, "d_inter": p.d_inter, "d_obs": p.d_obs}
            for lv, p in sorted(sc.level_params.items())
        },
    }


def scenario_from_dict(doc: dict) -> Scenario:
    _expect_schema(doc, SCENARIO_SCHEMA)
    try:
        sysd = doc["system"]
        system = LtiSystem(
            A=np.asarray(sysd["A"]), B=np.asarray(sysd["B"]),
            H=np.asarray(sysd["H"]), W=np.asarray(sysd["W"]),
            N=int(sysd["N"]), dt=float(sysd["dt"]),
        )
        cliques = [
            Clique(
                id=int(c["id"]), level=int(c["level"]),
                parent=None if c["parent"] is None else int(c["parent"]),
                children=[int(x) for x in c["children"]],
                neighbors=[int(x) for x in c["neighbors"]],
            )
            for c in doc["hierarchy"]["cliques"]
        ]
        hier = Hierarchy(levels=int(doc["hierarchy"]["levels"]),
                         cliques=cliques)
        if not doc["agents"]:
            raise FormatError("scenario has no agents")
        leaf_initial = {int(a): _gauss_load(d["initial"])
                        for a, d in doc["agents"].items()}
        leaf_target = {int(a): _gauss_load(d["target"])
                       for a, d in doc["agents"].items()}
        obstacles = [Obstacle(center=np.asarray(o["center"]),
                              radius=float(o["radius"]))
                     for o in doc["obstacles"]]
        level_params = {int(lv): LevelParams(r=float(p["r"]),
                                             d_inter=float(p["d_inter"]),
                                             d_obs=float(p["d_obs"]))
                        for lv, p in doc["level_params"].items()}
        return Scenario(
            hierarchy=hier, system=system,
            leaf_initial=leaf_initial, leaf_target=leaf_target,
            obstacles=obstacles, theta=float(doc["theta"]),
            level_params=level_params, R=np.asarray(doc["R"]),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed scenario document: {e}") from e


def save_scenario(sc: Scenario, path) -> None:
    dump_json(scenario_to_dict(sc), path)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(load_json(path))


# -- estimation levels ------------------------------------------------------


def levels_to_dict(scenario: Scenario, est) -> dict:
    hier = scenario.hierarchy
    return {
        "schema": LEVELS_SCHEMA,
        "levels": {
            str(cid): {
                "level": hier.cliques[cid].level,
                "initial": _gauss_dict(est.initial[cid]),
                "target": _gauss_dict(est.target[cid]),
            }
            for cid in sorted(est.initial)
        },
        "warnings": list(est.warnings),
        "converged": bool(est.converged),
    }


def levels_from_dict(doc: dict):
    """Returns (initial, target, level) dicts keyed by clique id."""
    _expect_schema(doc, LEVELS_SCHEMA)
    initial, target, level = {}, {}, {}
    for cid, d in doc["levels"].items():
        initial[int(cid)] = _gauss_load(d["initial"])
        target[int(cid)] = _gauss_load(d["target"])
        level[int(cid)] = int(d["level"])
    return initial, target, level


# -- steering policies ------------------------------------------------------


def policies_to_dict(scenario: Scenario, out) -> dict:
    hier = scenario.hierarchy
    cliques = {}
    for cid in sorted(out.solutions):
        sol = out.solutions[cid]
        cliques[str(cid)] = {
            "level": hier.cliques[cid].level,
            "ubar": _arr(sol.policy.ubar),
            "L": _arr(sol.policy.L),
            "K": _arr(sol.policy.K),
            "means": _arr(sol.moments.means),
            "covs": _arr(sol.moments.covs),
        }
    return {
        "schema": POLICIES_SCHEMA,
        "horizon": scenario.system.N,
        "cliques": cliques,
        "warnings": list(out.warnings),
        "failed": {str(k): v for k, v in out.failed.items()},
        "skipped": list(out.skipped),
        "converged": bool(out.converged),
    }


def policies_from_dict(doc: dict):
    """Returns {clique id: (level, SteeringPolicy, TrajectoryMoments)}."""
    from .dhds import SteeringPolicy, TrajectoryMoments

    _expect_schema(doc, POLICIES_SCHEMA)
    out = {}
    for cid, d in doc["cliques"].items():
        pol = SteeringPolicy(ubar=np.asarray(d["ubar"]),
                             L=np.asarray(d["L"]), K=np.asarray(d["K"]))
        mom = TrajectoryMoments(means=np.asarray(d["means"]),
                                covs=np.asarray(d["covs"]))
        out[int(cid)] = (int(d["level"]), pol, mom)
    return out


# -- safety report ----------------------------------------------------------


def safety_to_dict(report) -> dict:
    doc = {"schema": SAFETY_SCHEMA}
    doc.update(report.to_dict())
    return doc


# -- CSV logs ---------------------------------------------------------------


def write_convergence_csv(path, rows) -> None:
    """Rows of (iteration, primal residual, dual residual, wall time)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "primal_residual", "dual_residual",
                    "wall_time"])
        for r in rows:
            w.writerow([r[0], repr(float(r[1])), repr(float(r[2])),
                        repr(float(r[3]))])


def write_compare_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["size", "method", "status", "wall_time",
                    "admm_iterations", "collision_rate"])
        for r in rows:
            w.writerow(r)
