"""Solver-agnostic interface for the two convex subproblem shapes used here.

The pipeline needs (a) log-det plus linear-matrix-inequality problems and
(b) quadratic-objective problems with LMI, second-order-cone and linear
constraints.  ``ConicProblem`` is a flat-indexed intermediate representation
restricted to exactly those shapes; ``solve`` canonicalizes it to the
Clarabel interior-point solver.  No global solver state is kept, so solves
may run concurrently from independent workers.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse

_SQRT2 = math.sqrt(2.0)

STATUS_OPTIMAL = "optimal"
STATUS_NEAR_OPTIMAL = "near-optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_NUMERICAL = "numerical-failure"

_OK_STATUSES = (STATUS_OPTIMAL, STATUS_NEAR_OPTIMAL)


class ConicError(RuntimeError):
    """Raised for malformed problems or unsupported reformulations."""


def sym_size(n: int) -> int:
    return n * (n + 1) // 2


def sym_index(i: int, j: int) -> int:
    """Flat index of entry (i, j), j <= i, in packed lower-triangle order."""
    if j > i:
        i, j = j, i
    return i * (i + 1) // 2 + j


def _tril(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(n)


def sym_pack(m: np.ndarray) -> np.ndarray:
    """Pack a symmetric matrix into lower-triangle order (row by row)."""
    i, j = _tril(m.shape[0])
    return np.asarray(m, dtype=float)[i, j]


def sym_unpack(v: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((n, n))
    i, j = _tril(n)
    m[i, j] = v
    m[j, i] = v
    return m


def sym_weights(n: int) -> np.ndarray:
    """Multiplicity of each packed coordinate in the full matrix (1 or 2)."""
    i, j = _tril(n)
    return np.where(i == j, 1.0, 2.0)


def _svec(m: np.ndarray) -> np.ndarray:
    """Scaled packed form with off-diagonals multiplied by sqrt(2)."""
    i, j = _tril(m.shape[0])
    s = np.asarray(m, dtype=float)[i, j].copy()
    s[i != j] *= _SQRT2
    return s


@dataclass
class Block:
    """A named group of scalar decision variables.

    kind is one of 'scalar', 'vector', 'symmetric'; symmetric blocks store
    the packed lower triangle and unpack to full matrices in solutions.
    """

    name: str
    kind: str
    n: int
    offset: int

    @property
    def size(self) -> int:
        if self.kind == "scalar":
            return 1
        if self.kind == "vector":
            return self.n
        return sym_size(self.n)

    def indices(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.size)


@dataclass
class LinearRows:
    """Batched rows  a^T x (sense) b  with sense in {'eq', 'ge', 'le'}."""

    sense: str
    cols: list[np.ndarray] = field(default_factory=list)
    vals: list[np.ndarray] = field(default_factory=list)
    rhs: list[float] = field(default_factory=list)

    def add(self, cols: np.ndarray, vals: np.ndarray, rhs: float) -> None:
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.asarray(vals, dtype=float))
        self.rhs.append(float(rhs))

    @property
    def nrows(self) -> int:
        return len(self.rhs)


@dataclass
class SocConstraint:
    """||F x + g||_2 <= a^T x + b."""

    f_cols: list[np.ndarray]
    f_vals: list[np.ndarray]
    g: np.ndarray
    a_cols: np.ndarray
    a_vals: np.ndarray
    b: float


@dataclass
class LmiConstraint:
    """C + sum_k x_{idx[k]} * M[k]  is positive semidefinite."""

    size: int
    const: np.ndarray
    idx: list[int] = field(default_factory=list)
    mats: list[np.ndarray] = field(default_factory=list)

    def add(self, var_index: int, coeff: np.ndarray) -> None:
        self.idx.append(int(var_index))
        self.mats.append(np.asarray(coeff, dtype=float))


@dataclass
class LogEpigraph:
    """t <= log(a^T x + b), modeled with one exponential cone."""

    t_index: int
    a_cols: np.ndarray
    a_vals: np.ndarray
    b: float


class ConicProblem:
    """Convex program over named blocks, restricted to the admitted shapes.

    Objective terms: quadratic form, linear, constant, and at most one
    negative-log-det of a symmetric block.  Constraints: LMI, second-order
    cone, linear equalities and inequalities, and (internally) logarithm
    epigraphs produced by ``logdet_reformulate``.
    """

    def __init__(self):
        self.blocks: dict[str, Block] = {}
        self.nvar = 0
        self._quad: dict[tuple[int, int], float] = {}
        self._lin = {}
        self.obj_const = 0.0
        self.logdet_terms: list[tuple[str, float]] = []
        self.eq = LinearRows("eq")
        self.ineq = LinearRows("ge")
        self.socs: list[SocConstraint] = []
        self.lmis: list[LmiConstraint] = []
        self.logs: list[LogEpigraph] = []

    # -- variables ---------------------------------------------------------

    def _add_block(self, name: str, kind: str, n: int) -> Block:
        if name in self.blocks:
            raise ConicError(f"duplicate block name {name!r}")
        b = Block(name=name, kind=kind, n=n, offset=self.nvar)
        self.blocks[name] = b
        self.nvar += b.size
        return b

    def scalar(self, name: str) -> Block:
        return self._add_block(name, "scalar", 1)

    def vector(self, name: str, n: int) -> Block:
        return self._add_block(name, "vector", n)

    def symmetric(self, name: str, n: int) -> Block:
        return self._add_block(name, "symmetric", n)

    # -- objective ---------------------------------------------------------

    def add_quad(self, i: int, j: int, coeff: float) -> None:
        """Add coeff * x_i * x_j to the objective."""
        if j > i:
            i, j = j, i
        key = (i, j)
        self._quad[key] = self._quad.get(key, 0.0) + float(coeff)

    def add_lin(self, i: int, coeff: float) -> None:
        self._lin[i] = self._lin.get(i, 0.0) + float(coeff)

    def add_lin_many(self, idx: np.ndarray, coeffs: np.ndarray) -> None:
        for i, c in zip(np.asarray(idx).ravel(), np.asarray(coeffs).ravel()):
            self.add_lin(int(i), float(c))

    def add_const(self, c: float) -> None:
        self.obj_const += float(c)

    def add_logdet(self, block: Block, weight: float) -> None:
        """Add -weight * log det(block) to the objective (weight > 0)."""
        if block.kind != "symmetric":
            raise ConicError("log-det needs a symmetric block")
        if weight <= 0:
            raise ConicError("log-det weight must be positive")
        self.logdet_terms.append((block.name, float(weight)))

    def add_l2_penalty(self, idx: np.ndarray, center: np.ndarray, rho: float,
                       weights: np.ndarray | None = None) -> None:
        """Add (rho/2) * sum_k w_k (x_k - center_k)^2 to the objective."""
        idx = np.asarray(idx).ravel()
        center = np.asarray(center, dtype=float).ravel()
        w = np.ones(idx.size) if weights is None else np.asarray(weights, float)
        for i, c, wk in zip(idx, center, w):
            self.add_quad(int(i), int(i), 0.5 * rho * wk)
            self.add_lin(int(i), -rho * wk * c)
            self.add_const(0.5 * rho * wk * c * c)

    # -- constraints -------------------------------------------------------

    def add_eq(self, cols, vals, rhs: float) -> None:
        self.eq.add(cols, vals, rhs)

    def add_ge(self, cols, vals, rhs: float) -> None:
        """a^T x >= rhs."""
        self.ineq.add(cols, vals, rhs)

    def add_le(self, cols, vals, rhs: float) -> None:
        self.ineq.add(cols, -np.asarray(vals, dtype=float), -float(rhs))

    def add_soc(self, f_cols, f_vals, g, a_cols, a_vals, b: float) -> None:
        self.socs.append(SocConstraint(
            f_cols=[np.asarray(c, dtype=np.int64) for c in f_cols],
            f_vals=[np.asarray(v, dtype=float) for v in f_vals],
            g=np.asarray(g, dtype=float),
            a_cols=np.asarray(a_cols, dtype=np.int64),
            a_vals=np.asarray(a_vals, dtype=float),
            b=float(b),
        ))

    def lmi(self, size: int, const: np.ndarray | None = None) -> LmiConstraint:
        c = np.zeros((size, size)) if const is None else np.asarray(const, float)
        con = LmiConstraint(size=size, const=0.5 * (c + c.T))
        self.lmis.append(con)
        return con

    def add_log_epigraph(self, t_index: int, a_cols, a_vals, b: float) -> None:
        self.logs.append(LogEpigraph(
            t_index=int(t_index),
            a_cols=np.asarray(a_cols, dtype=np.int64),
            a_vals=np.asarray(a_vals, dtype=float),
            b=float(b),
        ))

    # -- misc ----------------------------------------------------------

    def validate(self) -> None:
        def chk(idx):
            a = np.asarray(idx)
            if a.size and (a.min() < 0 or a.max() >= self.nvar):
                raise ConicError("constraint references undeclared variable")

        for rows in (self.eq, self.ineq):
            for c in rows.cols:
                chk(c)
        for s in self.socs:
            for c in s.f_cols:
                chk(c)
            chk(s.a_cols)
        for l in self.lmis:
            chk(l.idx)
        for g in self.logs:
            chk([g.t_index])
            chk(g.a_cols)

    def canonical_dict(self) -> dict:
        """Stable, JSON-serializable description used for golden tests."""

        def arr(a):
            return np.asarray(a, dtype=float).tolist()

        return {
            "blocks": [
                {"name": b.name, "kind": b.kind, "n": b.n, "offset": b.offset}
                for b in sorted(self.blocks.values(), key=lambda b: b.offset)
            ],
            "objective": {
                "quad": [[i, j, v] for (i, j), v in sorted(self._quad.items())],
                "lin": [[i, v] for i, v in sorted(self._lin.items())],
                "const": self.obj_const,
                "logdet": [[name, w] for name, w in self.logdet_terms],
            },
            "eq": [
                [c.tolist(), arr(v), r]
                for c, v, r in zip(self.eq.cols, self.eq.vals, self.eq.rhs)
            ],
            "ge": [
                [c.tolist(), arr(v), r]
                for c, v, r in zip(self.ineq.cols, self.ineq.vals, self.ineq.rhs)
            ],
            "soc": [
                {
                    "f": [[c.tolist(), arr(v)] for c, v in zip(s.f_cols, s.f_vals)],
                    "g": arr(s.g),
                    "a": [s.a_cols.tolist(), arr(s.a_vals)],
                    "b": s.b,
                }
                for s in self.socs
            ],
            "lmi": [
                {
                    "size": l.size,
                    "const": arr(l.const),
                    "terms": [[int(i), arr(m)] for i, m in zip(l.idx, l.mats)],
                }
                for l in self.lmis
            ],
            "log": [
                {"t": g.t_index, "a": [g.a_cols.tolist(), arr(g.a_vals)], "b": g.b}
                for g in self.logs
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True)


@dataclass
class ConicSolution:
    """Solver outcome; ``values`` maps block names to unpacked values."""

    status: str
    values: dict | None
    objective_value: float
    solve_time: float

    @property
    def ok(self) -> bool:
        return self.status in _OK_STATUSES

    def __getitem__(self, name: str):
        if self.values is None:
            raise KeyError(f"no values available (status {self.status})")
        return self.values[name]


def quad_over_lin_reformulate(
    p: ConicProblem, q_block: Block, Q_block: Block, weight: float = 1.0,
    name: str | None = None,
) -> Block:
    """Add an epigraph scalar t with  [[Q, q], [q^T, t]] >= 0  to ``p``.

    By the Schur complement t >= q^T Q^{-1} q whenever Q is positive
    definite, so adding weight * t to the objective models the
    quad-over-lin term exactly.  Returns the epigraph block.
    """
    if Q_block.kind != "symmetric" or q_block.kind != "vector":
        raise ConicError("quad-over-lin needs a vector and a symmetric block")
    n = Q_block.n
    if q_block.n != n:
        raise ConicError("dimension mismatch between q and Q")
    t = p.scalar(name or f"__qol_{q_block.name}")
    lmi = p.lmi(n + 1)
    for i in range(n):
        for j in range(i + 1):
            m = np.zeros((n + 1, n + 1))
            m[i, j] = m[j, i] = 1.0
            lmi.add(Q_block.offset + sym_index(i, j), m)
    for i in range(n):
        m = np.zeros((n + 1, n + 1))
        m[i, n] = m[n, i] = 1.0
        lmi.add(q_block.offset + i, m)
    m = np.zeros((n + 1, n + 1))
    m[n, n] = 1.0
    lmi.add(t.offset, m)
    p.add_lin(t.offset, weight)
    return t


def _reformulate_logdet_term(p: ConicProblem, name: str, weight: float) -> None:
    blk = p.blocks[name]
    n = blk.n
    z = p.vector(f"__ld_z_{name}", sym_size(n))
    u = p.vector(f"__ld_u_{name}", n)
    m2 = 2 * n
    lmi = p.lmi(m2)
    for i in range(n):
        for j in range(i + 1):
            m = np.zeros((m2, m2))
            m[i, j] = m[j, i] = 1.0
            lmi.add(blk.offset + sym_index(i, j), m)
    for i in range(n):
        for j in range(i + 1):
            m = np.zeros((m2, m2))
            m[i, n + j] = m[n + j, i] = 1.0
            if i == j:
                m[n + i, n + i] = 1.0
            lmi.add(z.offset + sym_index(i, j), m)
    for k in range(n):
        p.add_log_epigraph(
            u.offset + k,
            a_cols=[z.offset + sym_index(k, k)],
            a_vals=[1.0],
            b=0.0,
        )
        p.add_lin(u.offset + k, -weight)


def logdet_reformulate(p: ConicProblem) -> ConicProblem:
    """Replace a negative-log-det objective term with conic constraints.

    Uses the standard construction: -log det Q <= -sum_k log D_kk with the
    block matrix [[Q, Z], [Z^T, D]] PSD, Z lower triangular and D = diag(Z),
    each logarithm modeled by one exponential-cone epigraph scalar.  A
    problem without a log-det term is returned unchanged; more than one
    term is unsupported here (``solve`` handles several internally).
    """
    if not p.logdet_terms:
        return p
    if len(p.logdet_terms) > 1:
        raise ConicError("at most one log-det term is supported")
    name, weight = p.logdet_terms.pop()
    _reformulate_logdet_term(p, name, weight)
    return p


def relax_rhs(p: ConicProblem, delta: float) -> None:
    """Loosen all inequality-like constraints in place by ``delta``.

    Linearized constraints inside ADMM can be transiently inconsistent;
    a single retry with slightly relaxed right-hand sides recovers them.
    Equalities are left untouched.
    """
    p.ineq.rhs = [r - delta for r in p.ineq.rhs]
    for s in p.socs:
        s.b += delta
    for l in p.lmis:
        l.const = l.const + delta * np.eye(l.size)


def _canonicalize(p: ConicProblem):
    """Assemble Clarabel (P, q, A, b, cones) from the IR."""
    p.validate()
    n = p.nvar

    rows_i: list[np.ndarray] = []
    cols_i: list[np.ndarray] = []
    vals_i: list[np.ndarray] = []
    b_parts: list[np.ndarray] = []
    cones = []
    nrow = 0

    def emit(cols, vals, bval):
        nonlocal nrow
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        rows_i.append(np.full(cols.size, nrow, dtype=np.int64))
        cols_i.append(cols)
        vals_i.append(vals)
        b_parts.append(np.array([bval]))
        nrow += 1

    # zero cone: a^T x = rhs  ->  s = rhs - a^T x = 0
    for c, v, r in zip(p.eq.cols, p.eq.vals, p.eq.rhs):
        emit(c, v, r)
    if p.eq.nrows:
        cones.append(clarabel.ZeroConeT(p.eq.nrows))

    # nonnegative cone: a^T x >= rhs  ->  s = a^T x - rhs >= 0
    for c, v, r in zip(p.ineq.cols, p.ineq.vals, p.ineq.rhs):
        emit(c, -np.asarray(v, dtype=float), -r)
    if p.ineq.nrows:
        cones.append(clarabel.NonnegativeConeT(p.ineq.nrows))

    # second-order cones: s = (a^T x + b, F x + g)
    for s in p.socs:
        if len(s.f_cols) != len(s.g):
            raise ConicError("SOC needs one g entry per F row")
        emit(s.a_cols, -s.a_vals, s.b)
        for c, v, gk in zip(s.f_cols, s.f_vals, s.g):
            emit(c, -v, gk)
        cones.append(clarabel.SecondOrderConeT(1 + len(s.g)))

    # exponential cones: s = (t, 1, a^T x + b) with exp(t) <= s3
    for g in p.logs:
        emit([g.t_index], [-1.0], 0.0)
        emit([], [], 1.0)
        emit(g.a_cols, -g.a_vals, g.b)
        cones.append(clarabel.ExponentialConeT())

    # PSD cones: s = svec(C + sum x_k M_k)
    for l in p.lmis:
        d = sym_size(l.size)
        if l.mats:
            ssv = np.stack([_svec(0.5 * (m + m.T)) for m in l.mats])
            kk, rr = np.nonzero(ssv)
            rows_i.append((nrow + rr).astype(np.int64))
            cols_i.append(np.asarray(l.idx, dtype=np.int64)[kk])
            vals_i.append(-ssv[kk, rr])
        b_parts.append(_svec(l.const))
        nrow += d
        cones.append(clarabel.PSDTriangleConeT(l.size))

    if nrow == 0:
        # Clarabel requires at least one constraint row
        emit([], [], 1.0)
        cones.append(clarabel.NonnegativeConeT(1))

    A = sparse.coo_matrix(
        (np.concatenate(vals_i) if vals_i else np.zeros(0),
         (np.concatenate(rows_i) if rows_i else np.zeros(0, dtype=np.int64),
          np.concatenate(cols_i) if cols_i else np.zeros(0, dtype=np.int64))),
        shape=(nrow, n),
    ).tocsc()
    b = np.concatenate(b_parts)

    # objective 0.5 x^T P x + q^T x with P upper-triangular
    pi, pj, pv = [], [], []
    for (i, j), v in sorted(p._quad.items()):
        if i == j:
            pi.append(i); pj.append(j); pv.append(2.0 * v)
        else:
            pi.append(j); pj.append(i); pv.append(v)
    P = sparse.coo_matrix((pv, (pi, pj)), shape=(n, n)).tocsc()
    q = np.zeros(n)
    for i, v in p._lin.items():
        q[i] += v
    return P, q, A, b, cones


_STATUS_MAP = {
    "Solved": STATUS_OPTIMAL,
    "AlmostSolved": STATUS_NEAR_OPTIMAL,
    "PrimalInfeasible": STATUS_INFEASIBLE,
    "AlmostPrimalInfeasible": STATUS_INFEASIBLE,
    "DualInfeasible": STATUS_UNBOUNDED,
    "AlmostDualInfeasible": STATUS_UNBOUNDED,
}


def solve(p: ConicProblem, tol: float = 1e-8, max_iter: int = 200) -> ConicSolution:
    """Solve the problem; deterministic given identical inputs.

    Infeasibility and unboundedness are reported through the status field,
    never by raising.  Log-det terms are reformulated internally.
    """
    if not 1e-10 <= tol <= 1e-4:
        raise ValueError("tol must lie in [1e-10, 1e-4]")
    while p.logdet_terms:
        name, weight = p.logdet_terms.pop(0)
        _reformulate_logdet_term(p, name, weight)
    P, q, A, b, cones = _canonicalize(p)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.max_iter = max_iter
    t0 = time.perf_counter()
    try:
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        sol = solver.solve()
    except BaseException:
        return ConicSolution(STATUS_NUMERICAL, None, math.nan,
                             time.perf_counter() - t0)
    elapsed = time.perf_counter() - t0
    status = _STATUS_MAP.get(str(sol.status), STATUS_NUMERICAL)
    if status not in _OK_STATUSES:
        return ConicSolution(status, None, math.nan, elapsed)
    x = np.asarray(sol.x, dtype=float)
    values = {}
    for blk in p.blocks.values():
        seg = x[blk.offset:blk.offset + blk.size]
        if blk.kind == "scalar":
            values[blk.name] = float(seg[0])
        elif blk.kind == "vector":
            values[blk.name] = seg.copy()
        else:
            values[blk.name] = sym_unpack(seg, blk.n)
    return ConicSolution(status, values, float(sol.obj_val) + p.obj_const, elapsed)


def solve_with_relax_retry(
    p_factory, tol: float = 1e-8, delta: float = 1e-6
) -> ConicSolution:
    """Solve; on infeasibility rebuild, relax inequality RHS once, retry.

    ``p_factory`` produces a fresh problem each call (the reformulations
    mutate problems in place).
    """
    sol = solve(p_factory(), tol=tol)
    if sol.status == STATUS_INFEASIBLE:
        p2 = p_factory()
        relax_rhs(p2, delta)
        sol = solve(p2, tol=tol)
    return sol
