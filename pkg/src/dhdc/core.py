"""Domain types, confidence-ellipse geometry, and moment algebra.

Everything in here is a pure function of its inputs.  All matrix-valued
types symmetrize their covariance-like fields on construction so that
downstream Cholesky/eigen factorizations never trip over solver round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

# Relative PSD tolerance: smallest eigenvalue >= -PSD_REL_TOL*(1 + largest)
# counts as positive semidefinite.  Solver outputs are inexact.
PSD_REL_TOL = 1e-8
SYM_TOL = 1e-9


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return (m + m.T)/2 as a new float array."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def min_eig(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(m))[0])


def is_psd(m: np.ndarray, rel_tol: float = PSD_REL_TOL) -> bool:
    w = np.linalg.eigvalsh(symmetrize(m))
    return bool(w[0] >= -rel_tol * (1.0 + max(float(w[-1]), 0.0)))


def _check_symmetric(m: np.ndarray, name: str) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if np.max(np.abs(m - m.T)) > SYM_TOL * (1.0 + np.max(np.abs(m))):
        raise ValueError(f"{name} is not symmetric within tolerance")


@dataclass(frozen=True)
class Gaussian:
    """Mean vector plus positive-definite covariance.

    The universal state descriptor for agents and cliques at all levels
    and times.  The covariance is symmetrized on construction and must be
    positive definite.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = symmetrize(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean length")
        if min_eig(cov) <= 0.0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class PositionEllipse:
    """The set {x : (x - center)^T shape^{-1} (x - center) <= alpha} in 2D."""

    center: np.ndarray
    shape: np.ndarray
    alpha: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        shape = symmetrize(np.asarray(self.shape, dtype=float))
        if center.size != 2 or shape.shape != (2, 2):
            raise ValueError("position ellipse is 2-dimensional")
        if min_eig(shape) <= 0.0:
            raise ValueError("ellipse shape matrix must be positive definite")
        if not self.alpha > 0.0:
            raise ValueError("alpha must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "alpha", float(self.alpha))

    def enclosing_radius(self) -> float:
        """Radius of the minimum enclosing circle (the semi-major axis)."""
        return math.sqrt(self.alpha * float(np.linalg.eigvalsh(self.shape)[-1]))

    def contains_point(self, x: np.ndarray, tol: float = 0.0) -> bool:
        d = np.asarray(x, dtype=float).reshape(-1) - self.center
        return float(d @ np.linalg.solve(self.shape, d)) <= self.alpha + tol

    def boundary_points(self, n: int) -> np.ndarray:
        """n points on the ellipse boundary, shape (n, 2)."""
        w, v = np.linalg.eigh(self.shape)
        ts = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        circ = np.stack([np.cos(ts), np.sin(ts)], axis=1)
        return self.center + (circ * np.sqrt(self.alpha * w)) @ v.T


@dataclass(frozen=True)
class LtiSystem:
    """Shared discrete-time linear dynamics x+ = A x + B u + w, w ~ N(0, W).

    H selects the two position coordinates; N is the horizon length and dt
    the step duration (metadata only).
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    W: np.ndarray
    N: int
    dt: float = 1.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        H = np.asarray(self.H, dtype=float)
        W = symmetrize(np.asarray(self.W, dtype=float))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise ValueError("A must be square")
        if B.shape[0] != n_x:
            raise ValueError("B row count must match state dimension")
        if W.shape != (n_x, n_x) or not is_psd(W):
            raise ValueError("W must be symmetric PSD with state dimension")
        if H.shape != (2, n_x) or np.linalg.matrix_rank(H) != 2:
            raise ValueError("H must be a full-row-rank 2 x n_x selector")
        if int(self.N) < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class Obstacle:
    """Circular obstacle with center p_o and radius r_o > 0."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        if center.size != 2:
            raise ValueError("obstacle center must be 2D")
        if not self.radius > 0.0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))


@dataclass
class Clique:
    """One node of the hierarchy forest.

    ``children`` lists the member cliques one level below (empty for
    bottom-level cliques, which are individual agents).  ``neighbors`` is
    the directed coupling set n[.] among siblings; ``reverse`` is the set
    m[.] of cliques that list this one as a neighbor.
    """

    id: int
    level: int
    parent: int | None
    children: list[int] = field(default_factory=list)
    neighbors: list[int] = field(default_factory=list)
    reverse: list[int] = field(default_factory=list)


class Hierarchy:
    """An L-level forest of cliques with parent/children/neighbor structure.

    Level 1 cliques have no parent; level L cliques are singleton agents.
    Construction validates the structural invariants and derives the
    reverse-neighbor sets from the neighbor sets.
    """

    def __init__(self, levels: int, cliques: list[Clique]):
        if levels < 2:
            raise ValueError("hierarchy needs at least 2 levels")
        self.levels = int(levels)
        self.cliques: dict[int, Clique] = {}
        for c in cliques:
            if c.id in self.cliques:
                raise ValueError(f"duplicate clique id {c.id}")
            self.cliques[c.id] = c
        self._by_level: dict[int, list[int]] = {
            lv: [] for lv in range(1, levels + 1)
        }
        for c in cliques:
            if not 1 <= c.level <= levels:
                raise ValueError(f"clique {c.id} has invalid level {c.level}")
            self._by_level[c.level].append(c.id)
        for lv in self._by_level:
            self._by_level[lv].sort()
        self._validate()
        self._derive_reverse()

    def _validate(self) -> None:
        for c in self.cliques.values():
            if c.level == 1:
                if c.parent is not None:
                    raise ValueError(f"level-1 clique {c.id} must have no parent")
            else:
                if c.parent is None or c.parent not in self.cliques:
                    raise ValueError(f"clique {c.id} has no valid parent")
                p = self.cliques[c.parent]
                if p.level != c.level - 1:
                    raise ValueError(f"parent of {c.id} is not one level above")
                if c.id not in p.children:
                    raise ValueError(f"clique {c.id} missing from parent children")
            if c.level == self.levels and c.children:
                raise ValueError(f"bottom-level clique {c.id} must be a leaf")
            if c.level < self.levels and not c.children:
                raise ValueError(f"clique {c.id} has no children")
            for ch in c.children:
                if ch not in self.cliques or self.cliques[ch].parent != c.id:
                    raise ValueError(f"child link {c.id}->{ch} inconsistent")
            for j in c.neighbors:
                if j not in self.cliques:
                    raise ValueError(f"unknown neighbor {j} of {c.id}")
                if self.cliques[j].parent != c.parent:
                    raise ValueError(
                        f"neighbors {c.id},{j} do not share a parent"
                    )
                if self.cliques[j].level != c.level:
                    raise ValueError(f"neighbor {j} of {c.id} is cross-level")
        # children of the same level partition the level below
        for lv in range(1, self.levels):
            seen: set[int] = set()
            for cid in self._by_level[lv]:
                for ch in self.cliques[cid].children:
                    if ch in seen:
                        raise ValueError(f"clique {ch} has two parents")
                    seen.add(ch)
            if seen != set(self._by_level[lv + 1]):
                raise ValueError(f"level {lv + 1} is not partitioned by level {lv}")

    def _derive_reverse(self) -> None:
        for c in self.cliques.values():
            c.reverse = []
        for c in self.cliques.values():
            for j in c.neighbors:
                self.cliques[j].reverse.append(c.id)
        for c in self.cliques.values():
            c.reverse.sort()

    def level_ids(self, level: int) -> list[int]:
        """Sorted clique ids at a level."""
        return list(self._by_level[level])

    def leaf_ids(self) -> list[int]:
        return self.level_ids(self.levels)

    def sibling_groups(self, level: int) -> list[tuple[int | None, list[int]]]:
        """Groups of level-``level`` cliques sharing a parent.

        Returns (parent id, sorted member ids) pairs; at level 1 there is a
        single group with parent ``None``.
        """
        if level == 1:
            return [(None, self.level_ids(1))]
        groups = []
        for pid in self.level_ids(level - 1):
            groups.append((pid, sorted(self.cliques[pid].children)))
        return groups


@dataclass(frozen=True)
class LevelParams:
    """Per-level clique radius bound and clearance distances."""

    r: float
    d_inter: float
    d_obs: float

    def __post_init__(self):
        if not (self.r > 0 and self.d_inter > 0 and self.d_obs > 0):
            raise ValueError("level parameters must be strictly positive")


@dataclass
class Scenario:
    """A complete problem instance.

    Hierarchy plus per-leaf initial/target Gaussians, obstacles, the
    confidence level theta, per-level parameters and the control weight R.
    """

    hierarchy: Hierarchy
    system: LtiSystem
    leaf_initial: dict[int, Gaussian]
    leaf_target: dict[int, Gaussian]
    obstacles: list[Obstacle]
    theta: float
    level_params: dict[int, LevelParams]
    R: np.ndarray

    def __post_init__(self):
        if not 0.5 < self.theta < 1.0:
            raise ValueError("theta must lie in (0.5, 1)")
        R = symmetrize(np.asarray(self.R, dtype=float))
        n_u = self.system.n_u
        if R.shape != (n_u, n_u) or min_eig(R) <= 0.0:
            raise ValueError("R must be symmetric positive definite (n_u x n_u)")
        self.R = R
        leaves = set(self.hierarchy.leaf_ids())
        if set(self.leaf_initial) != leaves or set(self.leaf_target) != leaves:
            raise ValueError("leaf Gaussians must cover exactly the agents")
        n_x = self.system.n_x
        for gid, g in list(self.leaf_initial.items()) + list(self.leaf_target.items()):
            if g.dim != n_x:
                raise ValueError(f"leaf Gaussian {gid} has wrong dimension")
        for lv in range(1, self.hierarchy.levels + 1):
            if lv not in self.level_params:
                raise ValueError(f"missing level parameters for level {lv}")

    @property
    def alpha(self) -> float:
        """Position-plane chi-square quantile for the confidence level."""
        return chi2_quantile(self.theta, 2)

    def num_agents(self) -> int:
        return len(self.hierarchy.leaf_ids())


# ---------------------------------------------------------------------------
# operations


def chi2_quantile(theta: float, dof: int) -> float:
    """Inverse CDF of the chi-square distribution with ``dof`` freedoms.

    For two degrees of freedom the exact closed form -2*ln(1-theta) is
    used; other orders bisect the regularized lower incomplete gamma.
    Relative accuracy is better than 1e-10.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    if dof == 2:
        return -2.0 * math.log1p(-theta)

    def cdf(x: float) -> float:
        return float(special.gammainc(dof / 2.0, x / 2.0))

    lo, hi = 0.0, 1.0
    while cdf(hi) < theta:
        hi *= 2.0
        if hi > 1e12:  # pragma: no cover - theta < 1 guarantees termination
            raise ArithmeticError("chi-square quantile bisection diverged")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < theta:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    return 0.5 * (lo + hi)


def kl_divergence(p: Gaussian, q: Gaussian) -> float:
    """Kullback-Leibler divergence KL(p || q) between two Gaussians."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    n = p.dim
    sign_q, logdet_q = np.linalg.slogdet(q.cov)
    sign_p, logdet_p = np.linalg.slogdet(p.cov)
    if sign_q <= 0:
        raise np.linalg.LinAlgError("q covariance is numerically singular")
    if sign_p <= 0:
        raise np.linalg.LinAlgError("p covariance is numerically singular")
    qi = np.linalg.inv(q.cov)
    d = q.mean - p.mean
    val = 0.5 * (
        logdet_q - logdet_p - n + float(np.trace(qi @ p.cov)) + float(d @ qi @ d)
    )
    return max(val, 0.0) if val > -1e-12 else val


def position_ellipse(g: Gaussian, H: np.ndarray, alpha: float) -> PositionEllipse:
    """Project a state Gaussian onto the position plane at quantile alpha."""
    H = np.asarray(H, dtype=float)
    return PositionEllipse(center=H @ g.mean, shape=H @ g.cov @ H.T, alpha=alpha)


def _containment_certificate(
    outer: PositionEllipse, inner: PositionEllipse, tau: float
) -> np.ndarray:
    """3x3 matrix whose PSD-ness at some tau >= 0 certifies inner in outer."""
    po = np.linalg.inv(outer.shape)
    pi = np.linalg.inv(inner.shape)
    co, ci = outer.center, inner.center
    a = outer.alpha
    v11 = -po + tau * pi
    v12 = (po @ co - tau * (pi @ ci)).reshape(2, 1)
    v22 = a - tau * a - float(co @ po @ co) + tau * float(ci @ pi @ ci)
    return np.block([[v11, v12], [v12.T, np.array([[v22]])]])


def ellipse_contains(
    outer: PositionEllipse, inner: PositionEllipse, tol: float = 1e-8
) -> bool:
    """True iff ``inner`` is contained in ``outer``.

    Lossless certificate: containment holds exactly when some multiplier
    tau >= 0 makes the 3x3 certificate matrix PSD.  Because the matrix is
    affine in tau, its smallest eigenvalue is concave, so a logarithmic
    grid plus golden-section refinement finds the maximizer.
    """
    if abs(outer.alpha - inner.alpha) > 1e-12 * (1.0 + outer.alpha):
        raise ValueError("ellipses must share alpha")

    def score(tau: float) -> float:
        v = _containment_certificate(outer, inner, tau)
        w = np.linalg.eigvalsh(v)
        return float(w[0]) / (1.0 + abs(float(w[-1])))

    taus = np.concatenate([[0.0], np.logspace(-8, 6, 60)])
    vals = [score(t) for t in taus]
    k = int(np.argmax(vals))
    if vals[k] >= -tol:
        return True
    lo = taus[max(k - 1, 0)]
    hi = taus[min(k + 1, len(taus) - 1)]
    # golden-section refinement of the concave 1-D score
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = score(c), score(d)
    for _ in range(120):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = score(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = score(d)
        if max(fc, fd) >= -tol:
            return True
        if b - a <= 1e-14 * (1.0 + b):
            break
    return max(fc, fd) >= -tol


def ellipse_disjoint_conservative(a: PositionEllipse, b: PositionEllipse) -> bool:
    """Sufficient disjointness test via minimum enclosing circles.

    True iff the center distance is at least the sum of the enclosing
    circle radii sqrt(alpha * lambda_max(shape)).  Boundary inclusive.
    """
    if abs(a.alpha - b.alpha) > 1e-12 * (1.0 + a.alpha):
        raise ValueError("ellipses must share alpha")
    dist = float(np.linalg.norm(a.center - b.center))
    return dist >= a.enclosing_radius() + b.enclosing_radius()


def moment_matched(children: list[Gaussian]) -> Gaussian:
    """The Gaussian minimizing the summed KL divergence from the children.

    The optimum matches the first two moments of the uniform mixture:
    mean of means, and average covariance plus mean spread.
    """
    if not children:
        raise ValueError("need at least one child")
    mu = np.mean([c.mean for c in children], axis=0)
    cov = np.zeros((children[0].dim, children[0].dim))
    for c in children:
        d = (c.mean - mu).reshape(-1, 1)
        cov += c.cov + d @ d.T
    return Gaussian(mean=mu, cov=cov / len(children))
