"""Scenario generation for the experiment families.

All families share one construction: cliques sit on nested rings, every
clique swaps to the diametrically opposite position, and ring radii are
sized bottom-up so that sibling clearances and radius budgets hold with
margin at the initial and target configurations.  The two-block family
adds circular obstacles between the blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Clique,
    Gaussian,
    Hierarchy,
    LevelParams,
    LtiSystem,
    Obstacle,
    Scenario,
    chi2_quantile,
)

FAMILIES = ("ring-swap", "two-block", "power-hierarchy")

# paper-scale noise: position/velocity step noise for the small and
# mid-scale tasks, much smaller for the large swarm family
W_SMALL = np.diag([0.02, 0.02, 0.2, 0.2]) ** 2
W_LARGE = np.diag([1e-3, 1e-3, 1e-2, 1e-2]) ** 2

DEFAULT_SPACING = {
    "r_leaf": 0.2,            # leaf clique radius budget
    "d_frac": 0.25,           # clearance distance as a fraction of r
    "chord_margin": 1.35,     # sibling spacing over the required clearance
    "r_margin": 1.2,          # radius budget over the children hull
    "obstacle_radius": 0.8,
    "obstacle_offset": 2.2,
    "rotate": 0.0,            # global rotation of every ring (radians)
}


@dataclass
class GeneratorSpec:
    """Which family to build and how large.

    ``branching[0]`` is the number of level-1 cliques; ``branching[i]``
    the children per level-(i+1) clique.  The product is the agent count.
    """

    family: str
    branching: list
    seed: int = 0
    spacing: dict = field(default_factory=dict)
    horizon: int = 100
    dt: float = 0.05
    theta: float = 0.997
    max_agents: int = 10_000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        self.branching = [int(b) for b in self.branching]
        if any(b < 1 for b in self.branching) or len(self.branching) < 2:
            raise ValueError("branching needs at least two positive factors")
        if self.family == "ring-swap" and len(self.branching) != 2:
            raise ValueError("ring-swap is a two-level family")
        if self.family == "two-block":
            if len(self.branching) != 3 or self.branching[0] != 2:
                raise ValueError("two-block needs branching [2, b2, b3]")

    def num_agents(self) -> int:
        return int(np.prod(self.branching))


def double_integrator(dt: float, N: int, W: np.ndarray) -> LtiSystem:
    """Planar double integrator with exact zero-order-hold discretization."""
    A = np.block([
        [np.eye(2), dt * np.eye(2)],
        [np.zeros((2, 2)), np.eye(2)],
    ])
    B = np.vstack([dt ** 2 / 2 * np.eye(2), dt * np.eye(2)])
    H = np.hstack([np.eye(2), np.zeros((2, 2))])
    return LtiSystem(A=A, B=B, H=H, W=W, N=N, dt=dt)


def _leaf_covariances(family: str):
    if family == "power-hierarchy":
        cov0 = np.diag([0.02 ** 2, 0.02 ** 2, 0.02 ** 2, 0.02 ** 2])
        covf = np.diag([0.03 ** 2, 0.03 ** 2, 0.05 ** 2, 0.05 ** 2])
    else:
        cov0 = np.diag([0.03 ** 2, 0.03 ** 2, 0.05 ** 2, 0.05 ** 2])
        covf = np.diag([0.05 ** 2, 0.05 ** 2, 0.25 ** 2, 0.25 ** 2])
    return cov0, covf


def _size_levels(branching: list, sp: dict):
    """Bottom-up ring radii and level parameters.

    Returns (ring, level_params) where ring[l] is the radius of the ring
    that level-(l+1) cliques occupy around their level-l parent; ring[0]
    places the level-1 cliques around the origin.  Radius budgets r grow
    bottom-up so each level's budget covers its children ring plus the
    children's own budget, with margin.
    """
    L = len(branching)
    r = {L: sp["r_leaf"]}
    d = {L: sp["d_frac"] * sp["r_leaf"]}
    ring = {}
    for lv in range(L - 1, 0, -1):
        b = branching[lv]
        need = sp["chord_margin"] * (d[lv + 1] + 2.0 * r[lv + 1])
        ring[lv] = 0.0 if b == 1 else need / (2.0 * math.sin(math.pi / b))
        r[lv] = sp["r_margin"] * (ring[lv] + r[lv + 1])
        d[lv] = sp["d_frac"] * r[lv]
    b1 = branching[0]
    need = sp["chord_margin"] * (d[1] + 2.0 * r[1])
    ring[0] = 0.0 if b1 == 1 else need / (2.0 * math.sin(math.pi / b1))
    level_params = {lv: LevelParams(r=r[lv], d_inter=d[lv], d_obs=d[lv])
                    for lv in range(1, L + 1)}
    return ring, level_params


def _ring_points(n: int, radius: float, phase: float) -> np.ndarray:
    if n == 1:
        return np.zeros((1, 2))
    ang = phase + 2.0 * math.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def generate(spec: GeneratorSpec) -> Scenario:
    """Build the scenario for a generator specification.

    Deterministic given (spec, seed); the seed only perturbs nothing in
    the current families but keeps the interface uniform.
    """
    n_agents = spec.num_agents()
    if n_agents > spec.max_agents:
        raise ValueError(
            f"requested {n_agents} agents exceeds the configured cap of "
            f"{spec.max_agents}")
    sp = dict(DEFAULT_SPACING)
    sp.update(spec.spacing)
    L = len(spec.branching)
    ring, level_params = _size_levels(spec.branching, sp)

    W = W_LARGE if spec.family == "power-hierarchy" else W_SMALL
    system = double_integrator(spec.dt, spec.horizon, W)
    cov0, covf = _leaf_covariances(spec.family)

    cliques: list[Clique] = []
    centers: dict[int, np.ndarray] = {}
    next_id = 1
    frontier: list[tuple[int, np.ndarray]] = []
    top = _ring_points(spec.branching[0], ring[0], sp["rotate"])
    for pt in top:
        cliques.append(Clique(id=next_id, level=1, parent=None))
        centers[next_id] = pt
        frontier.append((next_id, pt))
        next_id += 1
    for lv in range(2, L + 1):
        new_frontier = []
        for parent_id, parent_pt in frontier:
            b = spec.branching[lv - 1]
            phase = sp["rotate"] + math.pi / b * (parent_id % 2)
            for pt in _ring_points(b, ring[lv - 1], phase):
                cliques.append(Clique(id=next_id, level=lv, parent=parent_id))
                centers[next_id] = parent_pt + pt
                cliques[parent_id - 1].children.append(next_id)
                new_frontier.append((next_id, parent_pt + pt))
                next_id += 1
        frontier = new_frontier
    for c in cliques:
        siblings = ([s.id for s in cliques
                     if s.level == c.level and s.parent == c.parent])
        c.neighbors = [s for s in siblings if s != c.id]
    hierarchy = Hierarchy(levels=L, cliques=cliques)

    leaf_initial = {}
    leaf_target = {}
    for leaf in hierarchy.leaf_ids():
        p0 = centers[leaf]
        leaf_initial[leaf] = Gaussian(np.array([p0[0], p0[1], 0.0, 0.0]),
                                      cov0)
        leaf_target[leaf] = Gaussian(np.array([-p0[0], -p0[1], 0.0, 0.0]),
                                     covf)

    obstacles = []
    if spec.family == "two-block":
        y = sp["obstacle_offset"]
        obstacles = [
            Obstacle(center=np.array([0.0, y]), radius=sp["obstacle_radius"]),
            Obstacle(center=np.array([0.0, -y]), radius=sp["obstacle_radius"]),
        ]

    return Scenario(
        hierarchy=hierarchy,
        system=system,
        leaf_initial=leaf_initial,
        leaf_target=leaf_target,
        obstacles=obstacles,
        theta=spec.theta,
        level_params=level_params,
        R=np.eye(system.n_u),
    )
