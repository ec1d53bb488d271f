"""Flat centralized and distributed covariance-steering baselines.

Both solve the bottom-level problem over all agents jointly, without any
hierarchy: CCS as one monolithic program (iterated linearization of the
couplings), DCS as a flat consensus ADMM.  Constraint semantics match the
hierarchical steering at the leaf level, minus containment.
"""

from __future__ import annotations

import numpy as np

from .core import Gaussian, Scenario
from .dhds import (
    AgentSteeringData,
    CliqueSolution,
    FeedforwardSpec,
    SteeringConfig,
    SteeringError,
    SteeringOutput,
    SteeringPolicy,
    build_horizon,
    feedback_problem,
    feedforward_admm,
    feedforward_monolithic,
    propagate_moments,
    verify_feedforward,
)
from .exchange import WorkerPool

DEFAULT_CCS_CAP = 64


class CentralizedCapExceeded(RuntimeError):
    """The centralized baseline refuses problems beyond its size cap."""


def _flat_spec(scenario: Scenario, hm, neighbor_radius: float | None) -> FeedforwardSpec:
    leaves = scenario.hierarchy.leaf_ids()
    lp = scenario.level_params[scenario.hierarchy.levels]
    H = scenario.system.H
    pos0 = {a: H @ scenario.leaf_initial[a].mean for a in leaves}
    posf = {a: H @ scenario.leaf_target[a].mean for a in leaves}
    agents = {}
    for a in leaves:
        if neighbor_radius is None:
            nbrs = [b for b in leaves if b != a]
        else:
            nbrs = [
                b for b in leaves if b != a and (
                    np.linalg.norm(pos0[a] - pos0[b]) <= neighbor_radius
                    or np.linalg.norm(posf[a] - posf[b]) <= neighbor_radius
                    or np.linalg.norm(pos0[a] - posf[b]) <= neighbor_radius
                )
            ]
        agents[a] = AgentSteeringData(
            cid=a,
            mu0=scenario.leaf_initial[a].mean,
            muf=scenario.leaf_target[a].mean,
            cov0=scenario.leaf_initial[a].cov,
            covf=scenario.leaf_target[a].cov,
            neighbors=nbrs,
        )
    return FeedforwardSpec(
        agents=agents, hm=hm, H=H, obstacles=scenario.obstacles,
        r=lp.r, d_inter=lp.d_inter, d_obs=lp.d_obs, alpha=scenario.alpha,
    )


def _assemble(scenario: Scenario, spec: FeedforwardSpec, hm, ubar: dict,
              cfg: SteeringConfig, warnings: list, logs: dict,
              pool: WorkerPool) -> SteeringOutput:
    lp = scenario.level_params[scenario.hierarchy.levels]
    fb_cache: dict = {}

    def solve_member(aid):
        ag = spec.agents[aid]
        key = (ag.cov0.tobytes(), ag.covf.tobytes())
        if key not in fb_cache:
            fb_cache[key] = feedback_problem(
                ag.cov0, ag.covf, lp.r, scenario.system, hm, scenario.R,
                scenario.alpha, tol=cfg.solver_tol, clique_id=aid,
                cap_backoff=cfg.cap_backoff)
        L, K = fb_cache[key]
        pol = SteeringPolicy(ubar=ubar[aid], L=L, K=K)
        mom = propagate_moments(pol, Gaussian(ag.mu0, ag.cov0), hm)
        return CliqueSolution(policy=pol, moments=mom)

    ids = sorted(spec.agents)
    got = pool.map(solve_member, ids)
    solutions = dict(zip(ids, got))
    warnings.extend(verify_feedforward(spec, ubar, cfg))
    return SteeringOutput(solutions=solutions, warnings=warnings, logs=logs,
                          failed={}, skipped=[],
                          converged=not warnings)


def solve_ccs(scenario: Scenario, cfg: SteeringConfig | None = None,
              pool: WorkerPool | None = None,
              cap: int = DEFAULT_CCS_CAP) -> SteeringOutput:
    """Centralized flat covariance steering over all agents jointly."""
    cfg = cfg or SteeringConfig()
    n = scenario.num_agents()
    if n > cap:
        raise CentralizedCapExceeded(
            f"{n} agents exceed the centralized cap of {cap}")
    own = pool is None
    pool = pool or WorkerPool()
    try:
        hm = build_horizon(scenario.system, scenario.R)
        spec = _flat_spec(scenario, hm, neighbor_radius=None)
        warnings: list = []
        logs: dict = {}
        ubar = feedforward_monolithic(spec, cfg)
        return _assemble(scenario, spec, hm, ubar, cfg, warnings, logs, pool)
    finally:
        if own:
            pool.close()


def solve_dcs(scenario: Scenario, cfg: SteeringConfig | None = None,
              pool: WorkerPool | None = None,
              neighbor_radius: float | None = None) -> SteeringOutput:
    """Flat consensus-ADMM covariance steering over all agents.

    Every agent couples with every other by default; ``neighbor_radius``
    optionally sparsifies the coupling graph by initial/target proximity.
    """
    cfg = cfg or SteeringConfig()
    own = pool is None
    pool = pool or WorkerPool()
    try:
        hm = build_horizon(scenario.system, scenario.R)
        spec = _flat_spec(scenario, hm, neighbor_radius)
        warnings: list = []
        rows: list = []
        logs = {("flat", None): rows}
        try:
            ubar = feedforward_admm(spec, cfg, pool, rows, warnings)
        except SteeringError:
            raise
        return _assemble(scenario, spec, hm, ubar, cfg, warnings, logs, pool)
    finally:
        if own:
            pool.close()
