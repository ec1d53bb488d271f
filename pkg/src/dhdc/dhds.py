"""Top-down distributed hierarchical distribution steering.

Steers every clique's Gaussian from its assigned initial to its assigned
target under probabilistic collision, obstacle and containment
constraints.  The mean trajectory depends only on the feed-forward input
and the covariance only on the feedback gains, so each sibling set solves
a consensus-ADMM feed-forward problem followed by fully decoupled
per-clique feedback semidefinite programs.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .core import Gaussian, LtiSystem, Obstacle, Scenario, symmetrize
from .exchange import Mailbox, WorkerPool

log = logging.getLogger("dhdc.dhds")


class SteeringError(RuntimeError):
    """Steering subproblem failure, tagged with the offending clique."""

    def __init__(self, clique_id, message: str):
        super().__init__(f"clique {clique_id}: {message}")
        self.clique_id = clique_id


class TubeInfeasibleError(SteeringError):
    """Parent tube too thin for the child radius budget at some step."""

    def __init__(self, clique_id, k: int, message: str):
        super().__init__(clique_id, f"step {k}: {message}")
        self.k = k


@dataclass
class SteeringConfig:
    """ADMM and modeling knobs for the steering stage."""

    max_iters: int = 20
    rho_u: float = 1e3
    eps_primal: float = 1e-3
    eps_dual: float = 1e-3
    early_exit: bool = False
    solver_tol: float = 1e-8
    relaxed_tol: float = 1e-6  # used after iteration 5
    # constraint tightening absorbing the consensus error left after the
    # iteration cap, so returned mean paths clear the true thresholds
    clearance_margin: float = 0.05
    jitter: float = 1e-6
    # relative size of the rotational bias applied to the first
    # linearization paths; breaks head-on swap symmetry deterministically
    swirl_bias: float = 1.0
    data_check_tol: float = 1e-6
    verify_tol: float = 1e-6
    cap_backoff: float = 1e-3


# ---------------------------------------------------------------------------
# horizon algebra


@dataclass(frozen=True)
class HorizonMatrices:
    """Stacked dynamics over the horizon.

    x_stack = Psi0 x_0 + Psiu u_stack + Psiw w_stack, with Rbar and Wbar
    the block-diagonal cost and noise weights.
    """

    Psi0: np.ndarray
    Psiu: np.ndarray
    Psiw: np.ndarray
    Rbar: np.ndarray
    Wbar: np.ndarray
    n_x: int
    n_u: int
    N: int

    def Pk(self, k: int) -> np.ndarray:
        """Selector extracting the time-k state block."""
        out = np.zeros((self.n_x, (self.N + 1) * self.n_x))
        out[:, k * self.n_x:(k + 1) * self.n_x] = np.eye(self.n_x)
        return out

    def state_slice(self, k: int) -> slice:
        return slice(k * self.n_x, (k + 1) * self.n_x)


def build_horizon(system: LtiSystem, R: np.ndarray | None = None) -> HorizonMatrices:
    """Assemble the stacked-dynamics matrices for the system horizon."""
    A, B, W, N = system.A, system.B, system.W, system.N
    n_x, n_u = system.n_x, system.n_u
    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    Psi0 = np.vstack(powers)
    Psiu = np.zeros(((N + 1) * n_x, N * n_u))
    Psiw = np.zeros(((N + 1) * n_x, N * n_x))
    for k in range(1, N + 1):
        for j in range(k):
            blk = powers[k - 1 - j]
            Psiu[k * n_x:(k + 1) * n_x, j * n_u:(j + 1) * n_u] = blk @ B
            Psiw[k * n_x:(k + 1) * n_x, j * n_x:(j + 1) * n_x] = blk
    Rb = np.eye(n_u) if R is None else np.asarray(R, dtype=float)
    Rbar = np.kron(np.eye(N), Rb)
    Wbar = np.kron(np.eye(N), W)
    return HorizonMatrices(Psi0=Psi0, Psiu=Psiu, Psiw=Psiw, Rbar=Rbar,
                           Wbar=Wbar, n_x=n_x, n_u=n_u, N=N)


@dataclass
class SteeringPolicy:
    """Affine disturbance-feedback policy.

    u = ubar + L (x_0 - mu_0) + K w, with K strictly block lower
    triangular (the first block row is zero) so only noise up to step k-1
    can enter u_k.
    """

    ubar: np.ndarray
    L: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        self.ubar = np.asarray(self.ubar, dtype=float).reshape(-1)
        self.L = np.asarray(self.L, dtype=float)
        self.K = np.asarray(self.K, dtype=float)

    def check_causality(self, n_u: int, n_x: int, atol: float = 0.0) -> bool:
        n = self.ubar.size // n_u
        for k in range(n):
            row = self.K[k * n_u:(k + 1) * n_u, k * n_x:]
            if np.max(np.abs(row)) > atol:
                return False
        return True


@dataclass
class TrajectoryMoments:
    """Means and covariances of the state at every step 0..N."""

    means: np.ndarray  # (N+1, n_x)
    covs: np.ndarray   # (N+1, n_x, n_x)


def propagate_moments(policy: SteeringPolicy, init: Gaussian,
                      hm: HorizonMatrices) -> TrajectoryMoments:
    """Closed-form moments of the closed loop under the policy."""
    n_x, N = hm.n_x, hm.N
    xbar = hm.Psi0 @ init.mean + hm.Psiu @ policy.ubar
    m1 = hm.Psi0 + hm.Psiu @ policy.L
    m2 = hm.Psiw + hm.Psiu @ policy.K
    F = m1 @ init.cov @ m1.T + m2 @ hm.Wbar @ m2.T
    means = xbar.reshape(N + 1, n_x)
    covs = np.empty((N + 1, n_x, n_x))
    for k in range(N + 1):
        s = hm.state_slice(k)
        covs[k] = symmetrize(F[s, s])
    return TrajectoryMoments(means=means, covs=covs)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with eigenvalues clipped at zero."""
    w, v = np.linalg.eigh(symmetrize(m))
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T


def build_Phi(policy: SteeringPolicy, init_cov: np.ndarray,
              hm: HorizonMatrices) -> np.ndarray:
    """Factor with Phi Phi^T equal to the stacked state covariance."""
    try:
        c0 = np.linalg.cholesky(symmetrize(init_cov))
    except np.linalg.LinAlgError as e:
        raise SteeringError(None, f"initial covariance factorization: {e}")
    try:
        cw = np.linalg.cholesky(symmetrize(hm.Wbar))
    except np.linalg.LinAlgError:
        cw = _psd_sqrt(hm.Wbar)
    m1 = hm.Psi0 + hm.Psiu @ policy.L
    m2 = hm.Psiw + hm.Psiu @ policy.K
    return np.hstack([m1 @ c0, m2 @ cw])


# ---------------------------------------------------------------------------
# containment tube


@dataclass
class ContainmentTube:
    """Per-step shrunk-parent metric for keeping child means inside.

    A point x with (x - center_k)^T Phat_k (x - center_k) <= 1 keeps the
    whole radius-r disk around x inside the parent's position confidence
    ellipse at step k.
    """

    centers: np.ndarray      # (N+1, 2)
    Phat: np.ndarray         # (N+1, 2, 2)
    Phat_sqrt: np.ndarray    # (N+1, 2, 2)
    r: float
    alpha: float


def build_containment(parent: TrajectoryMoments, r: float, alpha: float,
                      H: np.ndarray, clique_id=None) -> ContainmentTube:
    """Shrink the parent's position ellipses by the child radius budget."""
    n = parent.means.shape[0]
    centers = np.empty((n, 2))
    Phat = np.empty((n, 2, 2))
    Phat_sqrt = np.empty((n, 2, 2))
    sq_alpha = math.sqrt(alpha)
    for k in range(n):
        centers[k] = H @ parent.means[k]
        sig = symmetrize(H @ parent.covs[k] @ H.T)
        lam, U = np.linalg.eigh(sig)
        if math.sqrt(alpha * float(lam[0])) <= r:
            raise TubeInfeasibleError(
                clique_id, k,
                f"parent tube radius {math.sqrt(alpha * float(lam[0])):.6f}"
                f" does not exceed the child radius budget {r:.6f}",
            )
        shrunk = np.sqrt(lam) - r / sq_alpha
        Phat[k] = (U * (1.0 / shrunk ** 2)) @ U.T / alpha
        Phat_sqrt[k] = (U * (1.0 / shrunk)) @ U.T / sq_alpha
    return ContainmentTube(centers=centers, Phat=Phat, Phat_sqrt=Phat_sqrt,
                           r=r, alpha=alpha)


# ---------------------------------------------------------------------------
# feed-forward stage


@dataclass
class AgentSteeringData:
    """Data of one steering agent (clique virtual state or robot)."""

    cid: int
    mu0: np.ndarray
    muf: np.ndarray
    cov0: np.ndarray
    covf: np.ndarray
    neighbors: list
    tube: ContainmentTube | None = None


@dataclass
class FeedforwardSpec:
    """One sibling set's coupled feed-forward problem."""

    agents: dict            # cid -> AgentSteeringData
    hm: HorizonMatrices
    H: np.ndarray
    obstacles: list
    r: float
    d_inter: float
    d_obs: float
    alpha: float
    # precomputed maps from u to positions: pos_map[k] = H Pk Psiu
    pos_map: np.ndarray = None
    drift: dict = None      # cid -> (N+1, 2) free-drift positions
    term_map: np.ndarray = None
    system_mats: tuple = None

    def __post_init__(self):
        hm = self.hm
        n = hm.N + 1
        self.pos_map = np.empty((n, 2, hm.N * hm.n_u))
        for k in range(n):
            s = hm.state_slice(k)
            self.pos_map[k] = self.H @ hm.Psiu[s, :]
        self.term_map = hm.Psiu[hm.state_slice(hm.N), :]
        # single-step matrices recovered from the stacked form
        self.system_mats = (
            hm.Psi0[hm.state_slice(1), :],
            hm.Psiu[hm.state_slice(1), :hm.n_u],
        )
        self.drift = {}
        for cid, ag in self.agents.items():
            stacked = (hm.Psi0 @ ag.mu0).reshape(n, hm.n_x)
            self.drift[cid] = stacked @ self.H.T

    def positions(self, cid: int, ubar: np.ndarray) -> np.ndarray:
        """Mean positions (N+1, 2) under a feed-forward input."""
        return self.drift[cid] + np.einsum("kcu,u->kc", self.pos_map, ubar)


def straight_line_positions(spec: FeedforwardSpec, cid: int) -> np.ndarray:
    """Linear interpolation of mean positions, the first iterate's path."""
    ag = spec.agents[cid]
    p0 = spec.H @ ag.mu0
    pf = spec.H @ ag.muf
    ts = np.linspace(0.0, 1.0, spec.hm.N + 1).reshape(-1, 1)
    return p0 + ts * (pf - p0)


def min_energy_input(spec: FeedforwardSpec, cid: int) -> np.ndarray:
    """Cheapest input meeting the terminal mean, ignoring couplings.

    Seeds the consensus variables so the first iterations only have to
    resolve the coupling constraints rather than rebuild the whole path.
    """
    hm = spec.hm
    ag = spec.agents[cid]
    rhs = ag.muf - (hm.Psi0 @ ag.mu0)[hm.state_slice(hm.N)]
    m = spec.term_map
    rinv_mt = np.linalg.solve(hm.Rbar, m.T)
    return rinv_mt @ np.linalg.solve(m @ rinv_mt, rhs)


def initial_guess_positions(spec: FeedforwardSpec, cid: int,
                            cfg: SteeringConfig) -> np.ndarray:
    """First-iteration linearization path.

    Without a parent tube: straight line plus a deterministic sideways
    arc (to the left of the travel direction, peaking mid-horizon,
    clearance-sized).  Head-on swaps make straight-line paths coincide
    mid-horizon where opposing constraint pushes cancel in the consensus
    average; the shared arc resolves every such tie the same way.

    With a parent tube: the parent's realized mean path plus an offset
    that rotates (counterclockwise on ties) from the initial to the final
    relative position, which keeps sibling distances and containment
    roughly intact along the whole guess.
    """
    ag = spec.agents[cid]
    ts = np.linspace(0.0, 1.0, spec.hm.N + 1)
    if ag.tube is not None:
        c = ag.tube.centers
        o0 = spec.H @ ag.mu0 - c[0]
        of = spec.H @ ag.muf - c[-1]
        r0, rf = float(np.linalg.norm(o0)), float(np.linalg.norm(of))
        if min(r0, rf) > 1e-9:
            th0 = math.atan2(o0[1], o0[0])
            thf = math.atan2(of[1], of[0])
            dth = (thf - th0) % (2.0 * math.pi)
            if dth > math.pi:
                dth -= 2.0 * math.pi
            # near-half-turns go counterclockwise for every agent, else
            # noise splits a swap group into opposing rotation directions
            if dth < -math.pi + 0.15:
                dth += 2.0 * math.pi
            # eased schedule: zero angular rate at both ends keeps the
            # guess dynamically consistent with rest-to-rest endpoints
            s = 0.5 * (1.0 - np.cos(math.pi * ts))
            rad = r0 + (rf - r0) * s
            ang = th0 + dth * s
            return c + np.stack([rad * np.cos(ang), rad * np.sin(ang)],
                                axis=1)
        s = (0.5 * (1.0 - np.cos(math.pi * ts))).reshape(-1, 1)
        return c + o0 + s * (of - o0)
    path = straight_line_positions(spec, cid)
    if cfg.swirl_bias <= 0.0:
        return path
    d = spec.H @ ag.muf - spec.H @ ag.mu0
    nrm = float(np.linalg.norm(d))
    if nrm < 1e-9:
        return path
    perp = np.array([-d[1], d[0]]) / nrm
    amp = cfg.swirl_bias * (spec.d_inter + 2.0 * spec.r)
    bump = np.sin(np.pi * ts)
    return path + amp * bump.reshape(-1, 1) * perp


def seed_input(spec: FeedforwardSpec, cid: int, cfg: SteeringConfig,
               path: np.ndarray | None = None) -> np.ndarray:
    """Input seeding the consensus variables.

    Tube-constrained agents take the minimum-energy input interpolating
    coarse waypoints of the rotating guess path (fitting every step
    exactly would demand wildly oscillatory inputs); free agents take the
    plain minimum-energy input, whose mean path is the straight line.
    """
    if spec.agents[cid].tube is None:
        return min_energy_input(spec, cid)
    if path is None:
        path = initial_guess_positions(spec, cid, cfg)
    hm = spec.hm
    ag = spec.agents[cid]
    n_way = min(8, hm.N)
    ks = np.unique(np.linspace(1, hm.N, n_way).round().astype(int))[:-1]
    m = np.vstack([spec.pos_map[k] for k in ks] + [spec.term_map])
    rhs = np.concatenate(
        [path[k] - spec.drift[cid][k] for k in ks]
        + [ag.muf - (hm.Psi0 @ ag.mu0)[hm.state_slice(hm.N)]])
    rinv_mt = np.linalg.solve(hm.Rbar, m.T)
    return rinv_mt @ np.linalg.solve(m @ rinv_mt, rhs)


def _unit(v: np.ndarray, ids, jitter: float) -> np.ndarray:
    nrm = float(np.linalg.norm(v))
    if nrm < 1e-9:
        lower = min(ids)
        v = v.copy()
        v[lower % 2] += jitter
        nrm = float(np.linalg.norm(v))
    return v / nrm


def check_static_feasibility(spec: FeedforwardSpec, cfg: SteeringConfig):
    """Verify the variable-free step-0 constraints before solving.

    At k = 0 the mean positions are data, so clearance, obstacle and tube
    constraints there are pure feasibility checks on the inputs.
    """
    ids = sorted(spec.agents)
    tol = cfg.data_check_tol
    for cid in ids:
        ag = spec.agents[cid]
        p0 = spec.drift[cid][0]
        for o in spec.obstacles:
            clear = float(np.linalg.norm(p0 - o.center)) - (
                spec.r + o.radius + spec.d_obs)
            if clear < -tol:
                raise SteeringError(
                    cid, f"initial position violates obstacle clearance "
                         f"by {-clear:.3e}")
        if ag.tube is not None:
            d = p0 - ag.tube.centers[0]
            v = float(d @ ag.tube.Phat[0] @ d)
            if v > 1.0 + tol:
                raise TubeInfeasibleError(
                    cid, 0, f"initial mean outside the shrunk parent "
                            f"ellipse ({v:.6f} > 1)")
        for j in ag.neighbors:
            dist = float(np.linalg.norm(p0 - spec.drift[j][0]))
            if dist < spec.d_inter + 2.0 * spec.r - tol:
                raise SteeringError(
                    cid, f"initial clearance to {j} is {dist:.6f} < "
                         f"{spec.d_inter + 2.0 * spec.r:.6f}")


def _add_mean_trajectory(pb: conic.ConicProblem, tag: str, u: conic.Block,
                         mu0: np.ndarray, system_mats, n_x: int, n_u: int,
                         N: int) -> conic.Block:
    """Explicit mean-state variables tied to an input block.

    Keeping the states as variables with sparse dynamics equalities keeps
    every downstream constraint row short, which is what makes the
    interior-point factorizations cheap.
    """
    A, B = system_mats
    x = pb.vector(f"x{tag}", (N + 1) * n_x)
    for r in range(n_x):
        pb.add_eq([x.offset + r], [1.0], float(mu0[r]))
    a_nz = [np.nonzero(A[r])[0] for r in range(n_x)]
    b_nz = [np.nonzero(B[r])[0] for r in range(n_x)]
    for k in range(N):
        xo = x.offset + k * n_x
        xn = xo + n_x
        uo = u.offset + k * n_u
        for r in range(n_x):
            cols = [xn + r]
            vals = [1.0]
            for c in a_nz[r]:
                cols.append(xo + int(c))
                vals.append(-float(A[r, c]))
            for c in b_nz[r]:
                cols.append(uo + int(c))
                vals.append(-float(B[r, c]))
            pb.add_eq(cols, vals, 0.0)
    return x


def _x_pos_row(x: conic.Block, H: np.ndarray, k: int, g: np.ndarray):
    """Sparse coefficients of g^T H x_k over a trajectory block."""
    n_x = H.shape[1]
    coeff = g @ H
    nz = np.nonzero(coeff)[0]
    return x.offset + k * n_x + nz, coeff[nz]


def feedforward_local_problem(
    spec: FeedforwardSpec, cid: int,
    prev_own: np.ndarray, prev_copies: dict,
    dual: np.ndarray, b_tilde: np.ndarray, rho_u: float,
    cfg: SteeringConfig,
) -> tuple[conic.ConicProblem, list]:
    """One agent's ADMM local problem around the previous mean paths.

    ``prev_own`` and ``prev_copies`` are (N+1, 2) position trajectories of
    the previous iterate; obstacle and inter-agent clearances are
    linearized around them while containment stays an exact second-order
    cone constraint.  Returns the problem and the stacked variable order
    [own] + sorted(neighbors).
    """
    hm = spec.hm
    H = spec.H
    ag = spec.agents[cid]
    nu = hm.N * hm.n_u
    order = [cid] + sorted(ag.neighbors)

    pb = conic.ConicProblem()
    blocks = {}
    xblocks = {}
    sys_mats = spec.system_mats
    for c in order:
        u_c = pb.vector(f"u{c}" if c != cid else "u", nu)
        blocks[c] = u_c
        xblocks[c] = _add_mean_trajectory(
            pb, f"_{c}", u_c, spec.agents[c].mu0, sys_mats, hm.n_x, hm.n_u,
            hm.N)
    u = blocks[cid]
    x = xblocks[cid]

    # control energy on the own block
    Rb = spec.hm.Rbar
    nz = np.nonzero(Rb)
    for i, j in zip(*nz):
        if i <= j:
            pb.add_quad(u.offset + int(i), u.offset + int(j), float(Rb[i, j]))

    # dual and proximity to the consensus point over the whole input stack
    all_idx = np.concatenate([blocks[c].indices() for c in order])
    pb.add_lin_many(all_idx, dual)
    pb.add_l2_penalty(all_idx, b_tilde, rho_u)

    # exact terminal mean on the own trajectory
    xn_off = x.offset + hm.N * hm.n_x
    for r in range(hm.n_x):
        pb.add_eq([xn_off + r], [1.0], float(ag.muf[r]))

    c_obs = spec.r + spec.d_obs
    for o in spec.obstacles:
        for k in range(1, hm.N + 1):
            eta = prev_own[k] - o.center
            g = _unit(eta, (cid, cid), cfg.jitter)
            cols, vals = _x_pos_row(x, H, k, g)
            rr = (c_obs + o.radius) - float(np.linalg.norm(eta)) + float(
                g @ prev_own[k])
            pb.add_ge(cols, vals, rr)

    if ag.tube is not None:
        for k in range(1, hm.N + 1):
            ph = ag.tube.Phat_sqrt[k]
            c0, v0 = _x_pos_row(x, H, k, ph[0])
            c1, v1 = _x_pos_row(x, H, k, ph[1])
            gv = -ph @ ag.tube.centers[k]
            pb.add_soc(f_cols=[c0, c1], f_vals=[v0, v1], g=gv,
                       a_cols=[], a_vals=[], b=1.0)

    c_inter = spec.d_inter + 2.0 * spec.r + cfg.clearance_margin
    for j in sorted(ag.neighbors):
        xj = xblocks[j]
        pj = prev_copies[j]
        for k in range(1, hm.N + 1):
            zeta = prev_own[k] - pj[k]
            g = _unit(zeta, (cid, j), cfg.jitter)
            ci, vi = _x_pos_row(x, H, k, g)
            cj, vj = _x_pos_row(xj, H, k, -g)
            rr = c_inter - float(np.linalg.norm(zeta)) + float(
                g @ (prev_own[k] - pj[k]))
            pb.add_ge(np.concatenate([ci, cj]), np.concatenate([vi, vj]), rr)
    return pb, order


def feedforward_admm(spec: FeedforwardSpec, cfg: SteeringConfig,
                     pool: WorkerPool, log_rows: list, warnings: list) -> dict:
    """Consensus ADMM over the sibling set's feed-forward inputs."""
    hm = spec.hm
    ids = sorted(spec.agents)
    nu = hm.N * hm.n_u
    check_static_feasibility(spec, cfg)

    coupled = any(spec.agents[c].neighbors for c in ids)
    prev_pos = {c: initial_guess_positions(spec, c, cfg) for c in ids}
    prev_cop = {c: {j: prev_pos[j].copy() for j in spec.agents[c].neighbors}
                for c in ids}
    u_seed = {c: seed_input(spec, c, cfg, prev_pos[c]) for c in ids}
    ubar = {c: u_seed[c].copy() for c in ids}
    copies = {c: {j: u_seed[j].copy() for j in spec.agents[c].neighbors}
              for c in ids}
    bglob = {c: u_seed[c].copy() for c in ids}
    duals = {c: np.zeros(nu * (1 + len(spec.agents[c].neighbors)))
             for c in ids}

    mailbox = Mailbox()

    def solve_local(c, it):
        tol = cfg.solver_tol if it <= 5 else max(cfg.solver_tol,
                                                 cfg.relaxed_tol)
        order = [c] + sorted(spec.agents[c].neighbors)
        b_tilde = np.concatenate([bglob[j] for j in order])

        def factory():
            pb, _ = feedforward_local_problem(
                spec, c, prev_pos[c], prev_cop[c], duals[c], b_tilde,
                cfg.rho_u if coupled else 0.0, cfg)
            return pb

        sol = conic.solve_with_relax_retry(factory, tol=tol)
        if not sol.ok:
            raise SteeringError(
                c, f"feed-forward local problem status {sol.status}")
        own = sol["u"]
        cps = {j: sol[f"u{j}"] for j in spec.agents[c].neighbors}
        return own, cps

    if not coupled:
        results = pool.map(lambda c: solve_local(c, 1), ids)
        for c, (own, _) in zip(ids, results):
            ubar[c] = own
        log_rows.append((1, 0.0, 0.0, 0.0))
        return ubar

    best = None
    b_prev = None
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        results = pool.map(lambda c: solve_local(c, it), ids)
        for c, (own, cps) in zip(ids, results):
            ubar[c] = own
            copies[c] = cps
        # refresh the linearization paths from the accepted local iterates
        for c in ids:
            prev_pos[c] = spec.positions(c, ubar[c])
            prev_cop[c] = {j: spec.positions(j, copies[c][j])
                           for j in copies[c]}
        # consensus: route copies of each agent's variable to its owner
        for c in ids:
            for j, val in copies[c].items():
                mailbox.send(c, j, "copy", val)
        new_b = {}
        for c in ids:
            received = mailbox.recv_all(c, "copy")
            vals = [ubar[c]] + [received[s] for s in sorted(received)]
            new_b[c] = np.mean(vals, axis=0)
        for c in ids:
            for j in spec.agents[c].neighbors:
                mailbox.send(j, c, "bglob", new_b[j])
        bglob = dict(new_b)
        for c in ids:
            bglob.update(mailbox.recv_all(c, "bglob"))

        prim = 0.0
        for c in ids:
            order = [c] + sorted(spec.agents[c].neighbors)
            stack = np.concatenate([ubar[c]] + [copies[c][j]
                                                for j in order[1:]])
            b_tilde = np.concatenate([bglob[j] for j in order])
            duals[c] = duals[c] + cfg.rho_u * (stack - b_tilde)
            prim += float(np.linalg.norm(stack - b_tilde))
        if b_prev is None:
            dualres = math.inf
        else:
            dualres = cfg.rho_u * sum(
                float(np.linalg.norm(new_b[c] - b_prev[c])) for c in ids)
        b_prev = new_b
        log_rows.append((it, prim, dualres, time.perf_counter() - t0))
        if best is None or prim <= best[0]:
            best = (prim, {c: ubar[c].copy() for c in ids})
        if cfg.early_exit and prim <= cfg.eps_primal * len(ids) and \
                dualres <= cfg.eps_dual * len(ids):
            break

    if log_rows and log_rows[-1][1] > cfg.eps_primal * len(ids):
        warnings.append(
            f"feed-forward group {ids[:4]}{'...' if len(ids) > 4 else ''} "
            f"stopped with primal residual {log_rows[-1][1]:.3e}")
    return ubar


def verify_feedforward(spec: FeedforwardSpec, ubar: dict,
                       cfg: SteeringConfig) -> list:
    """Evaluate the true nonlinear constraints at the returned inputs."""
    issues = []
    ids = sorted(spec.agents)
    pos = {c: spec.positions(c, ubar[c]) for c in ids}
    tol = cfg.verify_tol
    for c in ids:
        ag = spec.agents[c]
        x_n = (spec.hm.Psi0 @ ag.mu0)[spec.hm.state_slice(spec.hm.N)] + \
            spec.term_map @ ubar[c]
        err = float(np.linalg.norm(x_n - ag.muf))
        if err > 1e-5:
            issues.append(f"clique {c}: terminal mean error {err:.3e}")
        for o in spec.obstacles:
            d = np.linalg.norm(pos[c] - o.center, axis=1)
            worst = float(np.min(d - (spec.r + spec.d_obs + o.radius)))
            if worst < -tol:
                issues.append(
                    f"clique {c}: obstacle clearance violated by "
                    f"{-worst:.3e}")
        if ag.tube is not None:
            d = pos[c] - ag.tube.centers
            vals = np.einsum("kc,kcd,kd->k", d, ag.tube.Phat, d)
            worst = float(np.max(vals))
            if worst > 1.0 + tol:
                issues.append(
                    f"clique {c}: containment violated ({worst:.8f} > 1)")
        for j in ag.neighbors:
            d = np.linalg.norm(pos[c] - pos[j], axis=1)
            worst = float(np.min(d - (spec.d_inter + 2.0 * spec.r)))
            if worst < -tol:
                issues.append(
                    f"clique {c}-{j}: clearance violated by {-worst:.3e}")
    return issues


def feedforward_monolithic(spec: FeedforwardSpec, cfg: SteeringConfig,
                           outer_iters: int = 40, tol: float = 1e-9) -> dict:
    """Joint feed-forward solve without splitting (reference / flat CS).

    Sequentially relinearizes the coupled clearance constraints until the
    iterates settle.  Shares all constraint semantics with the ADMM path.
    """
    hm = spec.hm
    ids = sorted(spec.agents)
    nu = hm.N * hm.n_u
    check_static_feasibility(spec, cfg)
    pos = {c: initial_guess_positions(spec, c, cfg) for c in ids}
    ubar = {c: seed_input(spec, c, cfg, pos[c]) for c in ids}

    c_inter = spec.d_inter + 2.0 * spec.r + cfg.clearance_margin
    c_obs = spec.r + spec.d_obs
    seen = set()
    pairs = []
    for c in ids:
        for j in spec.agents[c].neighbors:
            key = (min(c, j), max(c, j))
            if key not in seen:
                seen.add(key)
                pairs.append(key)

    for _ in range(outer_iters):
        def factory():
            pb = conic.ConicProblem()
            blocks = {}
            xblocks = {}
            for c in ids:
                u = pb.vector(f"u{c}", nu)
                blocks[c] = u
                xblocks[c] = _add_mean_trajectory(
                    pb, f"_{c}", u, spec.agents[c].mu0, spec.system_mats,
                    hm.n_x, hm.n_u, hm.N)
            for c in ids:
                u, x = blocks[c], xblocks[c]
                nz = np.nonzero(hm.Rbar)
                for i, j in zip(*nz):
                    if i <= j:
                        pb.add_quad(u.offset + int(i), u.offset + int(j),
                                    float(hm.Rbar[i, j]))
                ag = spec.agents[c]
                xn_off = x.offset + hm.N * hm.n_x
                for r in range(hm.n_x):
                    pb.add_eq([xn_off + r], [1.0], float(ag.muf[r]))
                for o in spec.obstacles:
                    for k in range(1, hm.N + 1):
                        eta = pos[c][k] - o.center
                        g = _unit(eta, (c, c), cfg.jitter)
                        cols, vals = _x_pos_row(x, spec.H, k, g)
                        rr = (c_obs + o.radius) \
                            - float(np.linalg.norm(eta)) \
                            + float(g @ pos[c][k])
                        pb.add_ge(cols, vals, rr)
                if ag.tube is not None:
                    for k in range(1, hm.N + 1):
                        ph = ag.tube.Phat_sqrt[k]
                        c0, v0 = _x_pos_row(x, spec.H, k, ph[0])
                        c1, v1 = _x_pos_row(x, spec.H, k, ph[1])
                        gv = -ph @ ag.tube.centers[k]
                        pb.add_soc([c0, c1], [v0, v1], gv, [], [], 1.0)
            for (a, bb) in pairs:
                xa, xb = xblocks[a], xblocks[bb]
                for k in range(1, hm.N + 1):
                    zeta = pos[a][k] - pos[bb][k]
                    g = _unit(zeta, (a, bb), cfg.jitter)
                    ca, va = _x_pos_row(xa, spec.H, k, g)
                    cb, vb = _x_pos_row(xb, spec.H, k, -g)
                    rr = c_inter - float(np.linalg.norm(zeta)) + float(
                        g @ (pos[a][k] - pos[bb][k]))
                    pb.add_ge(np.concatenate([ca, cb]),
                              np.concatenate([va, vb]), rr)
            return pb

        sol = conic.solve_with_relax_retry(factory, tol=cfg.solver_tol)
        if not sol.ok:
            raise SteeringError(ids, f"monolithic solve {sol.status}")
        delta = 0.0
        for c in ids:
            new_u = sol[f"u{c}"]
            delta += float(np.linalg.norm(new_u - ubar[c]))
            ubar[c] = new_u
            pos[c] = spec.positions(c, new_u)
        if delta < tol:
            break
    return ubar


# ---------------------------------------------------------------------------
# feedback stage


def feedback_problem(
    cov0: np.ndarray, covf: np.ndarray, r_level: float,
    system: LtiSystem, hm: HorizonMatrices, R: np.ndarray,
    alpha: float, tol: float = 1e-8, clique_id=None,
    cap_backoff: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal feedback gains keeping the covariance inside its budgets.

    Minimizes the feedback control energy subject to the terminal bound
    cov_N <= covf and the per-step position bound
    sqrt(alpha lambda_max(H cov_k H^T)) <= r_level.  Solved in the exact
    step-recursive form (covariances and state-feedback pre-gains as
    variables); the returned (L, K) realize an optimal affine
    disturbance-feedback policy because deterministic state feedback
    attains every covariance sequence worth having at equal or lower
    cost, and dominated covariances stay feasible for upper bounds.
    """
    A, B, W, H = system.A, system.B, system.W, system.H
    n_x, n_u, N = system.n_x, system.n_u, system.N
    # backed-off cap keeps the realized radius under the budget despite
    # solver-tolerance slack on the LMIs
    cap = r_level ** 2 / alpha * (1.0 - cap_backoff)

    if cap_backoff >= 1.0:
        raise ValueError("cap_backoff must be below 1")
    lam0 = float(np.linalg.eigvalsh(symmetrize(H @ cov0 @ H.T))[-1])
    if lam0 > r_level ** 2 / alpha * (1.0 + 1e-9):
        raise SteeringError(
            clique_id,
            f"initial position covariance radius "
            f"{math.sqrt(alpha * lam0):.6f} exceeds the budget {r_level:.6f}")

    pb = conic.ConicProblem()
    S = {0: None}
    Us, Ys = {}, {}
    for k in range(1, N + 1):
        S[k] = pb.symmetric(f"S{k}", n_x)
    for k in range(N):
        Us[k] = pb.vector(f"U{k}", n_u * n_x)
        Ys[k] = pb.symmetric(f"Y{k}", n_u)
        pb.add_lin_many(Ys[k].indices(),
                        conic.sym_weights(n_u) * conic.sym_pack(R))

    i_tril_x = list(zip(*np.tril_indices(n_x)))
    i_tril_u = list(zip(*np.tril_indices(n_u)))

    for k in range(N):
        # epigraph of the feedback energy: [[Y, U], [U^T, S_k]] >= 0
        m_sz = n_u + n_x
        lmi = pb.lmi(m_sz)
        for p_idx, (i, j) in enumerate(i_tril_u):
            m = np.zeros((m_sz, m_sz))
            m[i, j] = m[j, i] = 1.0
            lmi.add(Ys[k].offset + p_idx, m)
        for r_ in range(n_u):
            for c_ in range(n_x):
                m = np.zeros((m_sz, m_sz))
                m[r_, n_u + c_] = m[n_u + c_, r_] = 1.0
                lmi.add(Us[k].offset + r_ * n_x + c_, m)
        if k == 0:
            lmi.const[n_u:, n_u:] += cov0
        else:
            for p_idx, (i, j) in enumerate(i_tril_x):
                m = np.zeros((m_sz, m_sz))
                m[n_u + i, n_u + j] = m[n_u + j, n_u + i] = 1.0
                lmi.add(S[k].offset + p_idx, m)

        # covariance recursion: [[S_{k+1} - W, A S_k + B U_k], [., S_k]] >= 0
        m_sz = 2 * n_x
        lmi = pb.lmi(m_sz)
        lmi.const[:n_x, :n_x] -= W
        for p_idx, (i, j) in enumerate(i_tril_x):
            m = np.zeros((m_sz, m_sz))
            m[i, j] = m[j, i] = 1.0
            lmi.add(S[k + 1].offset + p_idx, m)
        if k == 0:
            blk = A @ cov0
            lmi.const[:n_x, n_x:] += blk
            lmi.const[n_x:, :n_x] += blk.T
            lmi.const[n_x:, n_x:] += cov0
        else:
            for p_idx, (i, j) in enumerate(i_tril_x):
                e = np.zeros((n_x, n_x))
                e[i, j] = e[j, i] = 1.0
                m = np.zeros((m_sz, m_sz))
                ae = A @ e
                m[:n_x, n_x:] += ae
                m[n_x:, :n_x] += ae.T
                m[n_x:, n_x:] += e
                lmi.add(S[k].offset + p_idx, m)
        for r_ in range(n_u):
            for c_ in range(n_x):
                m = np.zeros((m_sz, m_sz))
                m[:n_x, n_x + c_] += B[:, r_]
                m[n_x + c_, :n_x] += B[:, r_]
                lmi.add(Us[k].offset + r_ * n_x + c_, m)

    for k in range(1, N + 1):
        # position covariance cap H S_k H^T <= cap * I
        lmi = pb.lmi(2, const=cap * np.eye(2))
        for p_idx, (i, j) in enumerate(i_tril_x):
            e = np.zeros((n_x, n_x))
            e[i, j] = e[j, i] = 1.0
            hh = H @ e @ H.T
            if np.any(hh):
                lmi.add(S[k].offset + p_idx, -hh)
    lmi = pb.lmi(n_x, const=covf)
    for p_idx, (i, j) in enumerate(i_tril_x):
        m = np.zeros((n_x, n_x))
        m[i, j] = m[j, i] = -1.0
        lmi.add(S[N].offset + p_idx, m)

    sol = conic.solve(pb, tol=tol, max_iter=400)
    if not sol.ok:
        if sol.status == conic.STATUS_INFEASIBLE:
            raise SteeringError(
                clique_id,
                f"feedback problem infeasible: radius budget {r_level:.4f} "
                f"too small for the noise level")
        raise SteeringError(clique_id, f"feedback solve {sol.status}")

    gains = []
    sig = cov0
    for k in range(N):
        u_mat = np.asarray(sol[f"U{k}"]).reshape(n_u, n_x)
        s_k = cov0 if k == 0 else symmetrize(sol[f"S{k}"])
        gains.append(u_mat @ np.linalg.pinv(s_k, hermitian=True))
        sig = s_k
    return _assemble_feedback(gains, A, B, n_x, n_u, N)


def _assemble_feedback(gains: list, A, B, n_x, n_u, N):
    """Convert per-step state-feedback gains to the (L, K) parameterization.

    The deviation e_k evolves through the closed-loop transition, so the
    policy u_k = K_k e_k expands into gains on the initial deviation and on
    each past noise sample, filling K strictly below the block diagonal.
    """
    L = np.zeros((N * n_u, n_x))
    K = np.zeros((N * n_u, N * n_x))
    # phis[j] = transition from e-source j to the current step k
    phis = [np.eye(n_x)]
    for k in range(N):
        Kk = gains[k]
        L[k * n_u:(k + 1) * n_u] = Kk @ phis[0]
        for j in range(1, k + 1):
            K[k * n_u:(k + 1) * n_u, (j - 1) * n_x:j * n_x] = Kk @ phis[j]
        acl = A + B @ Kk
        phis = [acl @ p for p in phis] + [np.eye(n_x)]
    return L, K


# ---------------------------------------------------------------------------
# hierarchy runner


@dataclass
class CliqueSolution:
    policy: SteeringPolicy
    moments: TrajectoryMoments


@dataclass
class SteeringOutput:
    """Per-clique policies and realized moments plus run diagnostics."""

    solutions: dict          # cid -> CliqueSolution
    warnings: list
    logs: dict               # (level, parent) -> residual rows
    failed: dict             # cid -> reason
    skipped: list
    converged: bool = True


def _initial_target(scenario: Scenario, estimation, cid: int):
    hier = scenario.hierarchy
    if hier.cliques[cid].level == hier.levels:
        return scenario.leaf_initial[cid], scenario.leaf_target[cid]
    return estimation.initial[cid], estimation.target[cid]


def run_dhds(scenario: Scenario, estimation, cfg: SteeringConfig | None = None,
             pool: WorkerPool | None = None) -> SteeringOutput:
    """Steer all cliques level by level, each inside its parent's tube.

    Level 1 has no containment constraint; collision constraints apply
    only within sibling sets.  A failed parent marks its whole subtree
    as skipped.
    """
    cfg = cfg or SteeringConfig()
    own_pool = pool is None
    pool = pool or WorkerPool()
    hier = scenario.hierarchy
    system = scenario.system
    alpha = scenario.alpha
    hm = build_horizon(system, scenario.R)
    warnings: list[str] = []
    logs: dict = {}
    solutions: dict[int, CliqueSolution] = {}
    failed: dict = {}
    skipped: list[int] = []
    fb_cache: dict = {}

    def feedback_cached(cov0, covf, r_level, cid):
        key = (cov0.tobytes(), covf.tobytes(), r_level)
        if key not in fb_cache:
            fb_cache[key] = feedback_problem(
                cov0, covf, r_level, system, hm, scenario.R, alpha,
                tol=cfg.solver_tol, clique_id=cid,
                cap_backoff=cfg.cap_backoff)
        return fb_cache[key]

    try:
        for lv in range(1, hier.levels + 1):
            params = scenario.level_params[lv]
            for parent_id, group_ids in hier.sibling_groups(lv):
                if parent_id is not None and parent_id in failed:
                    skipped.extend(group_ids)
                    continue
                if parent_id is not None and parent_id in skipped:
                    skipped.extend(group_ids)
                    continue
                tube = None
                if parent_id is not None:
                    try:
                        tube = build_containment(
                            solutions[parent_id].moments, params.r, alpha,
                            system.H, clique_id=parent_id)
                    except TubeInfeasibleError as e:
                        failed.update({c: str(e) for c in group_ids})
                        warnings.append(str(e))
                        continue
                agents = {}
                for cid in group_ids:
                    gi, gt = _initial_target(scenario, estimation, cid)
                    agents[cid] = AgentSteeringData(
                        cid=cid, mu0=gi.mean, muf=gt.mean,
                        cov0=gi.cov, covf=gt.cov,
                        neighbors=list(hier.cliques[cid].neighbors),
                        tube=tube,
                    )
                spec = FeedforwardSpec(
                    agents=agents, hm=hm, H=system.H,
                    obstacles=scenario.obstacles,
                    r=params.r, d_inter=params.d_inter, d_obs=params.d_obs,
                    alpha=alpha,
                )
                rows: list = []
                try:
                    ubar = feedforward_admm(spec, cfg, pool, rows, warnings)
                    issues = verify_feedforward(spec, ubar, cfg)
                    warnings.extend(issues)

                    def solve_member(cid):
                        ag = agents[cid]
                        L, K = feedback_cached(ag.cov0, ag.covf, params.r,
                                               cid)
                        pol = SteeringPolicy(ubar=ubar[cid], L=L, K=K)
                        mom = propagate_moments(
                            pol, Gaussian(ag.mu0, ag.cov0), hm)
                        return CliqueSolution(policy=pol, moments=mom)

                    got = pool.map(solve_member, group_ids)
                    solutions.update(dict(zip(group_ids, got)))
                except SteeringError as e:
                    failed.update({c: str(e) for c in group_ids})
                    warnings.append(str(e))
                finally:
                    logs[(lv, parent_id)] = rows
    finally:
        if own_pool:
            pool.close()

    return SteeringOutput(
        solutions=solutions, warnings=warnings, logs=logs,
        failed=failed, skipped=skipped,
        converged=not warnings and not failed and not skipped,
    )
