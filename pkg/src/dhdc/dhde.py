"""Bottom-up distributed hierarchical distribution estimation.

Assigns every non-leaf clique a Gaussian whose position confidence ellipse
contains all of its children's ellipses while staying clear of sibling
cliques, by minimizing the summed KL divergence from the children.  Each
sibling set is solved by consensus ADMM over the information-form
variables (Q, q) = (cov^-1, cov^-1 mean) plus an enclosing-circle radius
proxy phi per clique; containment enters through 5x5 certificate LMIs and
sibling separation through iteratively linearized distance constraints.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import conic
from .core import (
    Gaussian,
    PositionEllipse,
    Scenario,
    chi2_quantile,
    ellipse_contains,
    ellipse_disjoint_conservative,
    moment_matched,
    position_ellipse,
    symmetrize,
)
from .exchange import Mailbox, WorkerPool

log = logging.getLogger("dhdc.dhde")


class EstimationError(RuntimeError):
    """Estimation subproblem failure, tagged with the offending clique."""

    def __init__(self, clique_id, message: str):
        super().__init__(f"clique {clique_id}: {message}")
        self.clique_id = clique_id


@dataclass
class EstimationConfig:
    """ADMM and modeling knobs for the estimation stage."""

    max_iters: int = 20
    rho_Q: float = 1e3
    rho_q: float = 1e3
    rho_phi: float = 1e3
    eps_primal: float = 1e-3
    eps_dual: float = 1e-3
    early_exit: bool = False
    solver_tol: float = 1e-8
    relaxed_tol: float = 1e-6  # used after iteration 5
    separation_margin: float = 1e-3
    containment_padding: bool = True
    padding_slack: float = 1e-3
    steering_clearance: bool = True
    overlap_constraints: bool = True
    jitter: float = 1e-6
    phi_min: float = 1e-8
    repair_margin: float = 1e-6


@dataclass
class EstimationLocalState:
    """One clique's ADMM variables: own block, neighbor copies, duals."""

    Q: np.ndarray
    q: np.ndarray
    phi: float
    taus: np.ndarray
    copies: dict = field(default_factory=dict)  # j -> (Q, q, phi)
    duals: dict = field(default_factory=dict)  # key ('own' or j) -> (Xi, xi, y)


@dataclass
class EstimationOutput:
    """Per-clique Gaussians for both phases plus run diagnostics."""

    initial: dict
    target: dict
    warnings: list
    logs: dict  # (phase, level, parent) -> list of residual rows
    converged: bool = True


# ---------------------------------------------------------------------------
# certificate and overlap primitives


def build_S_block(
    Qbar: np.ndarray,
    qbar: np.ndarray,
    tau: float,
    child_mean_bar: np.ndarray,
    child_cov_bar: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """5x5 certificate matrix; PSD at some tau >= 0 iff the candidate
    position ellipse (information form Qbar, qbar) contains the child's."""
    si = np.linalg.inv(child_cov_bar)
    simu = si @ child_mean_bar
    s11 = -Qbar + tau * si
    s12 = (qbar - tau * simu).reshape(2, 1)
    s22 = alpha + tau * float(child_mean_bar @ simu) - alpha * tau
    out = np.zeros((5, 5))
    out[0:2, 0:2] = s11
    out[0:2, 2:3] = s12
    out[2:3, 0:2] = s12.T
    out[2, 2] = s22
    out[2, 3:5] = qbar
    out[3:5, 2] = qbar
    out[3:5, 3:5] = Qbar
    return out


def h_overlap(Qbar_i, qbar_i, phi_i, Qbar_j, qbar_j, phi_j) -> float:
    """Signed overlap of the certified enclosing circles; <= 0 means clear."""
    ci = np.linalg.solve(Qbar_i, qbar_i)
    cj = np.linalg.solve(Qbar_j, qbar_j)
    return phi_i ** -0.5 + phi_j ** -0.5 - float(np.linalg.norm(ci - cj))


@dataclass
class HGradients:
    """First-order coefficients of the overlap function at an iterate."""

    value: float
    dist: float
    grad_Q_i: np.ndarray
    grad_Q_j: np.ndarray
    grad_q_i: np.ndarray
    grad_q_j: np.ndarray
    dphi_i: float
    dphi_j: float
    # center-distance gradients (the phi-free part, used for clearances)
    dist_Q_i: np.ndarray
    dist_Q_j: np.ndarray
    dist_q_i: np.ndarray
    dist_q_j: np.ndarray


def linearize_h(
    Qbar_i, qbar_i, phi_i, Qbar_j, qbar_j, phi_j,
    ids: tuple = (0, 1),
    jitter: float = 1e-6,
) -> HGradients:
    """Gradients of h_overlap at the previous iterate.

    With coincident centers the distance direction is undefined; the center
    belonging to the lower clique id is then nudged by ``jitter`` along the
    axis (lower id mod 2), keeping runs reproducible.
    """
    qi = np.linalg.inv(Qbar_i)
    qj = np.linalg.inv(Qbar_j)
    ci = qi @ qbar_i
    cj = qj @ qbar_j
    omega = ci - cj
    nrm = float(np.linalg.norm(omega))
    if nrm < 1e-9:
        lower = min(ids)
        axis = lower % 2
        shift = np.zeros(2)
        shift[axis] = jitter
        if ids[0] == lower:
            ci = ci + shift
        else:
            cj = cj + shift
        omega = ci - cj
        nrm = float(np.linalg.norm(omega))
        if nrm < 1e-12:
            raise EstimationError(ids[0], "degenerate overlap linearization")
    u = omega / nrm
    # d dist/d qbar = Qbar^-T u ; d dist/d Qbar = -Qbar^-T u (Qbar^-1 qbar)^T
    dist_q_i = qi.T @ u
    dist_q_j = -(qj.T @ u)
    dist_Q_i = -np.outer(qi.T @ u, ci)
    dist_Q_j = np.outer(qj.T @ u, cj)
    return HGradients(
        value=phi_i ** -0.5 + phi_j ** -0.5 - nrm,
        dist=nrm,
        grad_Q_i=-dist_Q_i,
        grad_Q_j=-dist_Q_j,
        grad_q_i=-dist_q_i,
        grad_q_j=-dist_q_j,
        dphi_i=-0.5 * phi_i ** -1.5,
        dphi_j=-0.5 * phi_j ** -1.5,
        dist_Q_i=dist_Q_i,
        dist_Q_j=dist_Q_j,
        dist_q_i=dist_q_i,
        dist_q_j=dist_q_j,
    )


def estimation_objective(Q: np.ndarray, q: np.ndarray, children) -> float:
    """KL-fit cost in information form, summed over the children."""
    sign, logdet = np.linalg.slogdet(Q)
    if sign <= 0:
        return math.inf
    qQq = float(q @ np.linalg.solve(Q, q))
    total = 0.0
    for mu, cov in children:
        total += (
            -logdet
            + float(np.trace(Q @ cov))
            + qQq
            - 2.0 * float(mu @ q)
            + float(mu @ Q @ mu)
        )
    return total


# ---------------------------------------------------------------------------
# conic assembly helpers


@dataclass
class _ChildData:
    mu: np.ndarray          # full-state mean
    cov: np.ndarray         # full-state covariance
    mu_bar: np.ndarray      # position mean
    cov_bar: np.ndarray     # padded position covariance (certificate side)
    si: np.ndarray          # cov_bar^-1
    simu: np.ndarray
    m22: float


def _prep_children(children: list[Gaussian], H: np.ndarray,
                   pad_factor: float = 1.0) -> list[_ChildData]:
    out = []
    for g in children:
        mu_bar = H @ g.mean
        cov_bar = symmetrize(H @ g.cov @ H.T) * pad_factor
        si = np.linalg.inv(cov_bar)
        simu = si @ mu_bar
        out.append(_ChildData(
            mu=g.mean, cov=g.cov, mu_bar=mu_bar, cov_bar=cov_bar,
            si=si, simu=simu, m22=float(mu_bar @ simu),
        ))
    return out


def _pad_factor(g: Gaussian, H: np.ndarray, r_child: float, alpha: float,
                slack: float) -> float:
    """Inflation making the child's padded ellipse cover its radius budget.

    The steering stage keeps each clique's mean inside the parent tube
    shrunk by the clique radius bound, so the estimation stage must leave
    that much slack around every child center.
    """
    lam_min = float(np.linalg.eigvalsh(symmetrize(H @ g.cov @ H.T))[0])
    return max(1.0, r_child ** 2 * (1.0 + slack) / (alpha * lam_min))


def _sym_basis_coeffs(H: np.ndarray, n: int):
    """For each packed coordinate of an n x n symmetric block, the induced
    2x2 coefficient of H Q H^T."""
    coeffs = []
    for i in range(n):
        for j in range(i + 1):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            coeffs.append(H @ e @ H.T)
    return coeffs


def _grad_Q_packed(grad: np.ndarray, H: np.ndarray, n: int) -> np.ndarray:
    """Map a gradient w.r.t. Qbar = H Q H^T to packed Q coordinates."""
    m = H.T @ grad @ H
    ms = m + m.T
    i, j = np.tril_indices(n)
    vals = ms[i, j].copy()
    vals[i == j] *= 0.5
    return vals


def _add_dual_penalty(pb, idx, weights, center, dual, rho):
    """tr-style dual term plus (rho/2) quadratic penalty toward center."""
    pb.add_lin_many(idx, weights * dual)
    pb.add_l2_penalty(idx, center, rho, weights=weights)


@dataclass
class _MemberProblem:
    """Static data for one clique's local subproblem within a group."""

    cid: int
    children: list
    neighbors: list
    r_level: float
    kl_lin_Q: np.ndarray
    kl_lin_q: np.ndarray
    n_x: int
    H: np.ndarray
    alpha: float
    hqh_coeffs: list
    clearance_rhs: float  # d_inter + 2 r for the steering clearance rows


def _member_problem(cid, children: list[_ChildData], neighbors, H, alpha,
                    r_level, d_inter) -> _MemberProblem:
    n_x = H.shape[1]
    M = np.zeros((n_x, n_x))
    mu_sum = np.zeros(n_x)
    for ch in children:
        M += ch.cov + np.outer(ch.mu, ch.mu)
        mu_sum += ch.mu
    return _MemberProblem(
        cid=cid, children=children, neighbors=list(neighbors),
        r_level=r_level,
        kl_lin_Q=conic.sym_weights(n_x) * conic.sym_pack(M),
        kl_lin_q=-2.0 * mu_sum,
        n_x=n_x, H=H, alpha=alpha,
        hqh_coeffs=_sym_basis_coeffs(H, n_x),
        clearance_rhs=d_inter + 2.0 * r_level,
    )


def _add_containment_lmis(pb, Q, q, taus, mp: _MemberProblem):
    n_x = mp.n_x
    for k, ch in enumerate(mp.children):
        lmi = pb.lmi(5)
        c = np.zeros((5, 5))
        c[2, 2] = mp.alpha
        lmi.const = c
        mt = np.zeros((5, 5))
        mt[0:2, 0:2] = ch.si
        mt[0:2, 2] = -ch.simu
        mt[2, 0:2] = -ch.simu
        mt[2, 2] = ch.m22 - mp.alpha
        lmi.add(taus.offset + k, mt)
        for p_idx, hh in enumerate(mp.hqh_coeffs):
            m = np.zeros((5, 5))
            m[0:2, 0:2] = -hh
            m[3:5, 3:5] = hh
            lmi.add(Q.offset + p_idx, m)
        for a in range(n_x):
            hv = mp.H[:, a]
            if not np.any(hv):
                continue
            m = np.zeros((5, 5))
            m[0:2, 2] += hv
            m[2, 0:2] += hv
            m[2, 3:5] += hv
            m[3:5, 2] += hv
            lmi.add(q.offset + a, m)
        pb.add_ge([taus.offset + k], [1.0], 0.0)


def _add_radius_proxy(pb, Q, phi, mp: _MemberProblem, cfg: EstimationConfig):
    # T = H Q H^T - phi*alpha*I >= 0 certifies enclosing radius phi^-1/2
    lmi = pb.lmi(2)
    for p_idx, hh in enumerate(mp.hqh_coeffs):
        lmi.add(Q.offset + p_idx, hh)
    lmi.add(phi.offset, -mp.alpha * np.eye(2))
    floor = cfg.phi_min
    if cfg.steering_clearance:
        # certified radius capped at the level budget r
        floor = max(floor, 1.0 / mp.r_level ** 2)
    pb.add_ge([phi.offset], [1.0], floor)


def _estimation_local(mp: _MemberProblem, state: EstimationLocalState,
                      glob: dict, prev: dict, cfg: EstimationConfig):
    """Build one clique's ADMM local problem around the previous iterate.

    ``glob`` maps clique ids in {cid} | neighbors to (G, g, z); ``prev``
    maps them to the previous local values used for linearization.
    """
    n_x = mp.n_x
    wsym = conic.sym_weights(n_x)

    pb = conic.ConicProblem()
    Q = pb.symmetric("Q", n_x)
    q = pb.vector("q", n_x)
    phi = pb.scalar("phi")
    taus = pb.vector("tau", max(len(mp.children), 1))
    cop = {}
    for j in mp.neighbors:
        cop[j] = (
            pb.symmetric(f"Qc{j}", n_x),
            pb.vector(f"qc{j}", n_x),
            pb.scalar(f"pc{j}"),
        )

    conic.quad_over_lin_reformulate(pb, q, Q, weight=float(len(mp.children)))
    pb.add_logdet(Q, float(len(mp.children)))
    pb.add_lin_many(Q.indices(), mp.kl_lin_Q)
    pb.add_lin_many(q.indices(), mp.kl_lin_q)

    # consensus terms for the own block and every neighbor copy
    gq, gv, gz = glob[mp.cid]
    xi_m, xi_v, xi_s = state.duals["own"]
    _add_dual_penalty(pb, Q.indices(), wsym, conic.sym_pack(gq),
                      conic.sym_pack(xi_m), cfg.rho_Q)
    _add_dual_penalty(pb, q.indices(), np.ones(n_x), gv, xi_v, cfg.rho_q)
    _add_dual_penalty(pb, phi.indices(), np.ones(1), np.array([gz]),
                      np.array([xi_s]), cfg.rho_phi)
    for j in mp.neighbors:
        gq, gv, gz = glob[j]
        xi_m, xi_v, xi_s = state.duals[j]
        Qc, qc, pc = cop[j]
        _add_dual_penalty(pb, Qc.indices(), wsym, conic.sym_pack(gq),
                          conic.sym_pack(xi_m), cfg.rho_Q)
        _add_dual_penalty(pb, qc.indices(), np.ones(n_x), gv, xi_v, cfg.rho_q)
        _add_dual_penalty(pb, pc.indices(), np.ones(1), np.array([gz]),
                          np.array([xi_s]), cfg.rho_phi)

    _add_containment_lmis(pb, Q, q, taus, mp)
    _add_radius_proxy(pb, Q, phi, mp, cfg)

    H = mp.H
    pQ, pq, pphi = prev[mp.cid]
    for j in mp.neighbors:
        jQ, jq, jphi = prev[j]
        Qc, qc, pc = cop[j]
        gr = linearize_h(
            H @ pQ @ H.T, H @ pq, pphi, H @ jQ @ H.T, H @ jq, jphi,
            ids=(mp.cid, j), jitter=cfg.jitter,
        )
        if cfg.overlap_constraints:
            cols = np.concatenate([
                Q.indices(), q.indices(), phi.indices(),
                Qc.indices(), qc.indices(), pc.indices(),
            ])
            vals = np.concatenate([
                _grad_Q_packed(gr.grad_Q_i, H, n_x),
                H.T @ gr.grad_q_i,
                [gr.dphi_i],
                _grad_Q_packed(gr.grad_Q_j, H, n_x),
                H.T @ gr.grad_q_j,
                [gr.dphi_j],
            ])
            x_prev = np.concatenate([
                conic.sym_pack(pQ), pq, [pphi],
                conic.sym_pack(jQ), jq, [jphi],
            ])
            wq = np.concatenate([wsym, np.ones(n_x), [1.0],
                                 wsym, np.ones(n_x), [1.0]])
            # h' + c^T (x - x') <= -margin, with packed off-diagonals
            # carrying weight 2 in the matrix inner products
            rhs = -cfg.separation_margin - gr.value + float(
                (wq * vals) @ x_prev
            )
            pb.add_le(cols, wq * vals, rhs)
        if cfg.steering_clearance:
            cols = np.concatenate([
                Q.indices(), q.indices(), Qc.indices(), qc.indices(),
            ])
            vals = np.concatenate([
                _grad_Q_packed(gr.dist_Q_i, H, n_x),
                H.T @ gr.dist_q_i,
                _grad_Q_packed(gr.dist_Q_j, H, n_x),
                H.T @ gr.dist_q_j,
            ])
            x_prev = np.concatenate([
                conic.sym_pack(pQ), pq, conic.sym_pack(jQ), jq,
            ])
            wq = np.concatenate([wsym, np.ones(n_x), wsym, np.ones(n_x)])
            rhs = mp.clearance_rhs + cfg.separation_margin - gr.dist + float(
                (wq * vals) @ x_prev
            )
            pb.add_ge(cols, wq * vals, rhs)
    return pb, cop


def _solve_local(mp, state, glob, prev, cfg, tol):
    def factory():
        pb, _ = _estimation_local(mp, state, glob, prev, cfg)
        return pb

    sol = conic.solve_with_relax_retry(factory, tol=tol)
    if not sol.ok:
        raise EstimationError(
            mp.cid,
            f"estimation local problem ended with status {sol.status}",
        )
    copies = {
        j: (
            symmetrize(sol[f"Qc{j}"]),
            sol[f"qc{j}"],
            max(float(sol[f"pc{j}"]), cfg.phi_min),
        )
        for j in mp.neighbors
    }
    return replace(
        state,
        Q=symmetrize(sol["Q"]),
        q=sol["q"],
        phi=max(float(sol["phi"]), cfg.phi_min),
        taus=np.atleast_1d(np.asarray(sol["tau"])),
        copies=copies,
    )


# ---------------------------------------------------------------------------
# single clique estimation (no siblings)


def single_clique_estimate(children: list[Gaussian], alpha: float,
                           tol: float = 1e-8, clique_id=None) -> Gaussian:
    """Best single Gaussian containing all children's position ellipses.

    Minimizes the summed KL divergence from the children subject to the
    certificate LMIs; with the containment constraints inactive the result
    is the moment-matched mixture fit.
    """
    if not children:
        raise ValueError("need at least one child")
    n_x = children[0].dim
    H = np.zeros((2, n_x))
    H[0, 0] = H[1, 1] = 1.0
    mp = _member_problem(
        clique_id if clique_id is not None else 0,
        _prep_children(children, H), [], H, alpha, r_level=1.0, d_inter=0.0,
    )

    def factory():
        pb = conic.ConicProblem()
        Q = pb.symmetric("Q", n_x)
        q = pb.vector("q", n_x)
        taus = pb.vector("tau", len(children))
        conic.quad_over_lin_reformulate(pb, q, Q, weight=float(len(children)))
        pb.add_logdet(Q, float(len(children)))
        pb.add_lin_many(Q.indices(), mp.kl_lin_Q)
        pb.add_lin_many(q.indices(), mp.kl_lin_q)
        _add_containment_lmis(pb, Q, q, taus, mp)
        return pb

    sol = conic.solve_with_relax_retry(factory, tol=tol)
    if not sol.ok:
        raise EstimationError(clique_id, f"solver status {sol.status}")
    Qv = symmetrize(sol["Q"])
    cov = np.linalg.inv(Qv)
    return Gaussian(mean=cov @ sol["q"], cov=cov)


# ---------------------------------------------------------------------------
# consensus updates


def global_update(values: list):
    """Arithmetic mean of own value and neighbor copies (any shape)."""
    if not values:
        raise ValueError("empty copy set")
    total = values[0]
    if isinstance(total, np.ndarray):
        total = total.copy()
    for v in values[1:]:
        total = total + v
    return total / len(values)


def dual_update(dual, local, glob, rho: float):
    """Dual ascent step dual + rho * (local - global)."""
    return dual + rho * (local - glob)


# ---------------------------------------------------------------------------
# group ADMM


def _stack_norm(state: EstimationLocalState, glob: dict, cid: int):
    dq = np.linalg.norm(state.Q - glob[cid][0], "fro")
    dv = float(np.linalg.norm(state.q - glob[cid][1]))
    dp = abs(state.phi - glob[cid][2])
    for j, (cQ, cq, cp) in state.copies.items():
        dq += np.linalg.norm(cQ - glob[j][0], "fro")
        dv += float(np.linalg.norm(cq - glob[j][1]))
        dp += abs(cp - glob[j][2])
    return dq, dv, dp


def _estimate_group(members: dict, cfg: EstimationConfig, pool: WorkerPool,
                    log_rows: list, warnings: list):
    """Run consensus ADMM for one sibling set.

    ``members`` maps clique id to its :class:`_MemberProblem`.  Returns
    {clique id: Gaussian}.
    """
    ids = sorted(members)
    coupled = any(members[c].neighbors for c in ids)
    mm = {c: moment_matched([Gaussian(ch.mu, ch.cov)
                             for ch in members[c].children]) for c in ids}

    states: dict[int, EstimationLocalState] = {}
    glob: dict[int, tuple] = {}
    for c in ids:
        Q0 = np.linalg.inv(mm[c].cov)
        q0 = Q0 @ mm[c].mean
        Qb = members[c].H @ Q0 @ members[c].H.T
        phi0 = max(float(np.linalg.eigvalsh(Qb)[0]) / members[c].alpha,
                   cfg.phi_min)
        if cfg.steering_clearance:
            phi0 = max(phi0, 1.0 / members[c].r_level ** 2)
        n_x = members[c].n_x
        duals = {"own": (np.zeros((n_x, n_x)), np.zeros(n_x), 0.0)}
        for j in members[c].neighbors:
            duals[j] = (np.zeros((n_x, n_x)), np.zeros(n_x), 0.0)
        states[c] = EstimationLocalState(
            Q=Q0, q=q0, phi=phi0, taus=np.ones(len(members[c].children)),
            copies={}, duals=duals,
        )
        glob[c] = (Q0, q0, phi0)

    mailbox = Mailbox()
    # each clique announces its initialization so neighbors can seed copies
    for c in ids:
        for j in members[c].neighbors:
            mailbox.send(j, c, "init", glob[j])
    for c in ids:
        seeds = mailbox.recv_all(c, "init")
        states[c].copies = {j: seeds[j] for j in sorted(seeds)}

    if not coupled:
        # no sibling coupling: one exact local solve per clique
        def run_one(c):
            st = states[c]
            cfg_nc = replace(cfg, rho_Q=0.0, rho_q=0.0, rho_phi=0.0)
            return _solve_local(members[c], st, glob,
                                {c: (st.Q, st.q, st.phi)}, cfg_nc,
                                cfg.solver_tol)

        results = pool.map(run_one, ids)
        states = dict(zip(ids, results))
        return {c: _to_gaussian(states[c]) for c in ids}

    prev_glob_stack = None
    best = None
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        tol = cfg.solver_tol if it <= 5 else max(cfg.solver_tol, cfg.relaxed_tol)
        prev = {c: (states[c].Q, states[c].q, states[c].phi) for c in ids}
        for c in ids:
            for j, val in states[c].copies.items():
                prev.setdefault(j, val)

        def run_one(c):
            local_prev = {c: prev[c]}
            for j in members[c].neighbors:
                local_prev[j] = states[c].copies[j]
            return _solve_local(members[c], states[c], glob, local_prev,
                                cfg, tol)

        results = pool.map(run_one, ids)
        states = dict(zip(ids, results))

        # route copies: i holds a copy of j, so j receives it
        for c in ids:
            for j, val in states[c].copies.items():
                mailbox.send(c, j, "copy", val)
        new_glob = {}
        for c in ids:
            received = mailbox.recv_all(c, "copy")
            st = states[c]
            vals = [(st.Q, st.q, st.phi)] + [received[s] for s in sorted(received)]
            new_glob[c] = (
                global_update([v[0] for v in vals]),
                global_update([v[1] for v in vals]),
                global_update([v[2] for v in vals]),
            )
        # distribute the refreshed global components to whoever needs them
        for c in ids:
            for j in members[c].neighbors:
                mailbox.send(j, c, "glob", new_glob[j])
        glob_prev = glob
        glob = {}
        for c in ids:
            glob[c] = new_glob[c]
            glob.update(mailbox.recv_all(c, "glob"))

        for c in ids:
            st = states[c]
            xi_m, xi_v, xi_s = st.duals["own"]
            st.duals["own"] = (
                dual_update(xi_m, st.Q, glob[c][0], cfg.rho_Q),
                dual_update(xi_v, st.q, glob[c][1], cfg.rho_q),
                dual_update(xi_s, st.phi, glob[c][2], cfg.rho_phi),
            )
            for j in members[c].neighbors:
                xi_m, xi_v, xi_s = st.duals[j]
                cQ, cq, cp = st.copies[j]
                st.duals[j] = (
                    dual_update(xi_m, cQ, glob[j][0], cfg.rho_Q),
                    dual_update(xi_v, cq, glob[j][1], cfg.rho_q),
                    dual_update(xi_s, cp, glob[j][2], cfg.rho_phi),
                )

        prim = sum(sum(_stack_norm(states[c], glob, c)) for c in ids)
        if prev_glob_stack is None:
            dualres = math.inf
        else:
            dualres = 0.0
            for c in ids:
                dualres += cfg.rho_Q * np.linalg.norm(
                    glob[c][0] - glob_prev[c][0], "fro")
                dualres += cfg.rho_q * float(
                    np.linalg.norm(glob[c][1] - glob_prev[c][1]))
                dualres += cfg.rho_phi * abs(glob[c][2] - glob_prev[c][2])
        prev_glob_stack = glob
        log_rows.append((it, prim, dualres, time.perf_counter() - t0))
        if best is None or prim <= best[0]:
            best = (prim, {c: _to_gaussian(states[c]) for c in ids})
        thresh = cfg.eps_primal * len(ids)
        if cfg.early_exit and prim <= thresh and dualres <= cfg.eps_dual * len(ids):
            break

    thresh = cfg.eps_primal * len(ids)
    if log_rows and log_rows[-1][1] > thresh:
        warnings.append(
            f"estimation group {ids} stopped with primal residual "
            f"{log_rows[-1][1]:.3e} above {thresh:.3e}"
        )
    return {c: _to_gaussian(states[c]) for c in ids}


def _to_gaussian(state: EstimationLocalState) -> Gaussian:
    cov = np.linalg.inv(symmetrize(state.Q))
    return Gaussian(mean=cov @ state.q, cov=cov)


# ---------------------------------------------------------------------------
# hierarchy runner


def _repair_containment(parent: Gaussian, children_pe: list[PositionEllipse],
                        H, alpha, warnings, cid, margin) -> Gaussian:
    """Inflate the parent covariance minimally until every child fits."""
    pe = position_ellipse(parent, H, alpha)
    if all(ellipse_contains(pe, ce) for ce in children_pe):
        return parent
    lo, hi = 1.0, 1.0
    for _ in range(60):
        hi *= 1.25
        pe_hi = PositionEllipse(pe.center, pe.shape * hi, alpha)
        if all(ellipse_contains(pe_hi, ce) for ce in children_pe):
            break
    else:
        raise EstimationError(cid, "containment repair failed to bracket")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pe_mid = PositionEllipse(pe.center, pe.shape * mid, alpha)
        if all(ellipse_contains(pe_mid, ce) for ce in children_pe):
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-9:
            break
    if hi - 1.0 > margin:
        warnings.append(
            f"clique {cid}: containment repaired by factor {hi:.6f} "
            f"(beyond the expected solver-tolerance margin)"
        )
    else:
        log.debug("clique %s: containment repaired by factor %.2e", cid, hi - 1.0)
    return Gaussian(mean=parent.mean, cov=parent.cov * hi)


def run_dhde(scenario: Scenario, cfg: EstimationConfig | None = None,
             pool: WorkerPool | None = None) -> EstimationOutput:
    """Estimate Gaussians for every clique at levels L-1 .. 1, bottom-up.

    The estimation runs twice, once from the initial leaf Gaussians and
    once from the targets.  Containment is certified post hoc on the true
    position ellipses and repaired by minimal inflation when solver
    tolerance left a hair of slack missing.
    """
    cfg = cfg or EstimationConfig()
    own_pool = pool is None
    pool = pool or WorkerPool()
    hier = scenario.hierarchy
    H = scenario.system.H
    alpha = scenario.alpha
    warnings: list[str] = []
    logs: dict = {}
    out_phase: dict[str, dict] = {}

    try:
        for phase in ("initial", "target"):
            leaf = (scenario.leaf_initial if phase == "initial"
                    else scenario.leaf_target)
            level_gauss: dict[int, Gaussian] = dict(leaf)
            result: dict[int, Gaussian] = {}
            for lv in range(hier.levels - 1, 0, -1):
                r_child = scenario.level_params[lv + 1].r
                members: dict[int, _MemberProblem] = {}
                groups = hier.sibling_groups(lv)
                for parent_id, group_ids in groups:
                    for cid in group_ids:
                        cl = hier.cliques[cid]
                        childs = []
                        for ch_id in sorted(cl.children):
                            g = level_gauss[ch_id]
                            pad = (_pad_factor(g, H, r_child, alpha,
                                               cfg.padding_slack)
                                   if cfg.containment_padding else 1.0)
                            childs.extend(_prep_children([g], H, pad))
                        members[cid] = _member_problem(
                            cid, childs, cl.neighbors, H, alpha,
                            scenario.level_params[lv].r,
                            scenario.level_params[lv].d_inter,
                        )
                for parent_id, group_ids in groups:
                    rows: list = []
                    got = _estimate_group(
                        {c: members[c] for c in group_ids}, cfg, pool,
                        rows, warnings,
                    )
                    logs[(phase, lv, parent_id)] = rows
                    for cid, g in got.items():
                        children_pe = [
                            PositionEllipse(ch.mu_bar, ch.cov_bar, alpha)
                            for ch in members[cid].children
                        ]
                        result[cid] = _repair_containment(
                            g, children_pe, H, alpha, warnings, cid,
                            cfg.repair_margin,
                        )
                # disjointness audit at the returned solution
                for parent_id, group_ids in groups:
                    for cid in group_ids:
                        for j in hier.cliques[cid].neighbors:
                            pe_i = position_ellipse(result[cid], H, alpha)
                            pe_j = position_ellipse(result[j], H, alpha)
                            if cfg.overlap_constraints and not \
                                    ellipse_disjoint_conservative(pe_i, pe_j):
                                warnings.append(
                                    f"{phase}: cliques {cid},{j} fail the "
                                    "conservative disjointness check"
                                )
                level_gauss.update(result)
            out_phase[phase] = result
    finally:
        if own_pool:
            pool.close()

    return EstimationOutput(
        initial=out_phase["initial"],
        target=out_phase["target"],
        warnings=warnings,
        logs=logs,
        converged=not warnings,
    )


# ---------------------------------------------------------------------------
# monolithic reference solve (oracle for the ADMM)


def solve_multi_clique_monolithic(
    children_by_clique: dict, neighbors: dict, alpha: float,
    H: np.ndarray | None = None,
    margin: float = 0.0, outer_iters: int = 40, tol: float = 1e-9,
    jitter: float = 1e-6,
) -> dict:
    """Joint estimation of one sibling set without any splitting.

    Solves the same KL-fit problem with certificate LMIs, radius proxies
    and overlap constraints handled by sequential linearization until the
    iterates stop moving.  Serves as the reference the ADMM is checked
    against.
    """
    ids = sorted(children_by_clique)
    any_children = children_by_clique[ids[0]]
    n_x = any_children[0].dim
    if H is None:
        H = np.zeros((2, n_x))
        H[0, 0] = H[1, 1] = 1.0
    cfg = EstimationConfig(separation_margin=margin, steering_clearance=False,
                           jitter=jitter)
    members = {
        c: _member_problem(c, _prep_children(children_by_clique[c], H),
                           neighbors.get(c, []), H, alpha, 1.0, 0.0)
        for c in ids
    }
    # initial linearization point: moment matched
    cur = {}
    for c in ids:
        g = moment_matched(children_by_clique[c])
        Q0 = np.linalg.inv(g.cov)
        Qb = H @ Q0 @ H.T
        phi0 = max(float(np.linalg.eigvalsh(Qb)[0]) / alpha, cfg.phi_min)
        cur[c] = (Q0, Q0 @ g.mean, phi0)

    wsym = conic.sym_weights(n_x)
    for _ in range(outer_iters):
        def factory():
            pb = conic.ConicProblem()
            blocks = {}
            for c in ids:
                Q = pb.symmetric(f"Q{c}", n_x)
                q = pb.vector(f"q{c}", n_x)
                phi = pb.scalar(f"phi{c}")
                taus = pb.vector(f"tau{c}", len(members[c].children))
                blocks[c] = (Q, q, phi, taus)
                conic.quad_over_lin_reformulate(
                    pb, q, Q, weight=float(len(members[c].children)))
                pb.add_logdet(Q, float(len(members[c].children)))
                pb.add_lin_many(Q.indices(), members[c].kl_lin_Q)
                pb.add_lin_many(q.indices(), members[c].kl_lin_q)
                _add_containment_lmis(pb, Q, q, taus, members[c])
                _add_radius_proxy(pb, Q, phi, members[c], cfg)
            for c in ids:
                for j in members[c].neighbors:
                    Qi, qi, pi, _ = blocks[c]
                    Qj, qj, pj, _ = blocks[j]
                    pQ, pq, pp = cur[c]
                    jQ, jq, jp = cur[j]
                    gr = linearize_h(
                        H @ pQ @ H.T, H @ pq, pp,
                        H @ jQ @ H.T, H @ jq, jp,
                        ids=(c, j), jitter=jitter,
                    )
                    cols = np.concatenate([
                        Qi.indices(), qi.indices(), pi.indices(),
                        Qj.indices(), qj.indices(), pj.indices(),
                    ])
                    vals = np.concatenate([
                        _grad_Q_packed(gr.grad_Q_i, H, n_x),
                        H.T @ gr.grad_q_i, [gr.dphi_i],
                        _grad_Q_packed(gr.grad_Q_j, H, n_x),
                        H.T @ gr.grad_q_j, [gr.dphi_j],
                    ])
                    x_prev = np.concatenate([
                        conic.sym_pack(pQ), pq, [pp],
                        conic.sym_pack(jQ), jq, [jp],
                    ])
                    wq = np.concatenate([wsym, np.ones(n_x), [1.0],
                                         wsym, np.ones(n_x), [1.0]])
                    rhs = -margin - gr.value + float((wq * vals) @ x_prev)
                    pb.add_le(cols, wq * vals, rhs)
            return pb, blocks

        pb, blocks = factory()
        sol = conic.solve(pb, tol=1e-8)
        if not sol.ok:
            pb2, _ = factory()
            conic.relax_rhs(pb2, 1e-6)
            sol = conic.solve(pb2, tol=1e-8)
            if not sol.ok:
                raise EstimationError(ids, f"monolithic solve {sol.status}")
        new = {}
        delta = 0.0
        for c in ids:
            Qv = symmetrize(sol[f"Q{c}"])
            qv = sol[f"q{c}"]
            pv = max(float(sol[f"phi{c}"]), cfg.phi_min)
            delta += np.linalg.norm(Qv - cur[c][0], "fro")
            delta += float(np.linalg.norm(qv - cur[c][1]))
            delta += abs(pv - cur[c][2])
            new[c] = (Qv, qv, pv)
        cur = new
        if delta < tol:
            break
    out = {}
    for c in ids:
        cov = np.linalg.inv(cur[c][0])
        out[c] = Gaussian(mean=cov @ cur[c][1], cov=cov)
    return out
