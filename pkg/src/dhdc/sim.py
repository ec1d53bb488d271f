"""Monte-Carlo closed-loop simulation and chance-constraint validation.

Rollouts integrate the dynamics step by step with the causal policy (the
feedback at step k sees the initial-state deviation and noise up to step
k-1 only), independently of the stacked-matrix algebra used to plan, so
they double as an oracle for the planned moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Gaussian, Scenario, chi2_quantile, position_ellipse
from .dhds import SteeringPolicy


@dataclass
class RolloutBatch:
    """Sampled closed-loop trajectories per agent.

    trajectories maps agent id to an array (trials, N+1, n_x); controls
    holds the realized inputs (trials, N, n_u).  Identical seed and
    scenario give bit-identical samples regardless of execution order:
    every agent draws from its own counter-based stream.
    """

    seed: int
    trials: int
    trajectories: dict
    controls: dict


@dataclass
class SafetyReport:
    """Empirical safety and tracking statistics of a rollout batch."""

    trials: int
    seed: int
    collision_rate: float
    obstacle_violation_rate: float
    min_pair_distance: dict          # "i-j" -> min over time of mean-trial min
    terminal_mean_error: dict        # agent -> |empirical mean - target|
    terminal_cov_excess: dict        # agent -> lambda_max(Sigma_hat - Sigma_f)
    containment_rate: dict           # agent -> min over k of in-parent rate
    checks: dict                     # named boolean outcomes

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "collision_rate": self.collision_rate,
            "obstacle_violation_rate": self.obstacle_violation_rate,
            "min_pair_distance": self.min_pair_distance,
            "terminal_mean_error": self.terminal_mean_error,
            "terminal_cov_excess": self.terminal_cov_excess,
            "containment_rate": self.containment_rate,
            "checks": self.checks,
        }


def _agent_stream(seed: int, agent_key: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, agent_key], dtype=np.uint64)))


def rollout(scenario: Scenario, policies: dict, seed: int,
            trials: int) -> RolloutBatch:
    """Simulate all leaf agents under their policies.

    ``policies`` maps agent id to :class:`SteeringPolicy`.  Noise and the
    initial state are drawn from one Philox stream per agent keyed by
    (seed, agent index), so parallel rollout order cannot change results.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    system = scenario.system
    A, B, N = system.A, system.B, system.N
    n_x, n_u = system.n_x, system.n_u
    w_sqrt = _cov_sqrt(system.W)
    trajectories = {}
    controls = {}
    for idx, aid in enumerate(sorted(policies)):
        pol = policies[aid]
        init = scenario.leaf_initial[aid]
        rng = _agent_stream(seed, idx)
        x0 = init.mean + rng.standard_normal((trials, n_x)) @ _cov_sqrt(
            init.cov).T
        w = rng.standard_normal((trials, N, n_x)) @ w_sqrt.T
        e0 = x0 - init.mean
        xs = np.empty((trials, N + 1, n_x))
        us = np.empty((trials, N, n_u))
        xs[:, 0] = x0
        wflat = w.reshape(trials, N * n_x)
        for k in range(N):
            u_k = pol.ubar[k * n_u:(k + 1) * n_u] + e0 @ pol.L[
                k * n_u:(k + 1) * n_u].T
            if k > 0:
                krow = pol.K[k * n_u:(k + 1) * n_u, :k * n_x]
                u_k = u_k + wflat[:, :k * n_x] @ krow.T
            us[:, k] = u_k
            xs[:, k + 1] = xs[:, k] @ A.T + u_k @ B.T + w[:, k]
        trajectories[aid] = xs
        controls[aid] = us
    return RolloutBatch(seed=seed, trials=trials, trajectories=trajectories,
                        controls=controls)


def _cov_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def validate(batch: RolloutBatch, scenario: Scenario,
             parent_moments: dict | None = None) -> SafetyReport:
    """Empirical safety rates for a batch.

    A chance constraint at level theta passes when the empirical
    satisfaction rate is at least theta minus three binomial standard
    errors.  ``parent_moments`` (leaf id -> parent TrajectoryMoments)
    enables the containment statistics.
    """
    system = scenario.system
    H = system.H
    theta = scenario.theta
    alpha = scenario.alpha
    ids = sorted(batch.trajectories)
    trials = batch.trials
    d_inter = scenario.level_params[scenario.hierarchy.levels].d_inter
    d_obs = scenario.level_params[scenario.hierarchy.levels].d_obs

    pos = {a: batch.trajectories[a] @ H.T for a in ids}

    collided = np.zeros(trials, dtype=bool)
    min_pair = {}
    for i_idx, a in enumerate(ids):
        for b in ids[i_idx + 1:]:
            d = np.linalg.norm(pos[a] - pos[b], axis=2)
            collided |= (d < d_inter).any(axis=1)
            min_pair[f"{a}-{b}"] = float(d.min())
    collision_rate = float(collided.mean()) if len(ids) > 1 else 0.0

    obs_violated = np.zeros(trials, dtype=bool)
    for a in ids:
        for o in scenario.obstacles:
            d = np.linalg.norm(pos[a] - o.center, axis=2)
            obs_violated |= (d < d_obs + o.radius).any(axis=1)
    obstacle_violation_rate = float(obs_violated.mean()) if scenario.obstacles \
        else 0.0

    terminal_mean_error = {}
    terminal_cov_excess = {}
    for a in ids:
        xf = batch.trajectories[a][:, -1, :]
        target = scenario.leaf_target[a]
        mu_hat = xf.mean(axis=0)
        sig_hat = np.cov(xf.T, bias=False)
        terminal_mean_error[a] = float(np.linalg.norm(mu_hat - target.mean))
        terminal_cov_excess[a] = float(
            np.linalg.eigvalsh(sig_hat - target.cov)[-1])

    containment_rate = {}
    se = np.sqrt(theta * (1.0 - theta) / trials)
    if parent_moments:
        for a in ids:
            if a not in parent_moments:
                continue
            mom = parent_moments[a]
            rates = []
            for k in range(mom.means.shape[0]):
                center = H @ mom.means[k]
                shape = H @ mom.covs[k] @ H.T
                d = pos[a][:, k, :] - center
                val = np.einsum("tc,cd,td->t", d, np.linalg.inv(shape), d)
                rates.append(float((val <= alpha).mean()))
            containment_rate[a] = min(rates)

    checks = {
        "collision_rate_within_theta": collision_rate <= (1.0 - theta) + 3 * se,
        "obstacle_rate_within_theta":
            obstacle_violation_rate <= (1.0 - theta) + 3 * se,
    }
    if containment_rate:
        checks["containment_within_theta"] = all(
            r >= theta - 3 * se for r in containment_rate.values())
    return SafetyReport(
        trials=trials, seed=batch.seed,
        collision_rate=collision_rate,
        obstacle_violation_rate=obstacle_violation_rate,
        min_pair_distance=min_pair,
        terminal_mean_error=terminal_mean_error,
        terminal_cov_excess=terminal_cov_excess,
        containment_rate=containment_rate,
        checks=checks,
    )
