"""Dense/sparse linear programs solved by a bounded-variable revised simplex.

Problems are maximizations ``max c.z`` subject to ``A_eq z = b_eq``,
``A_ub z <= b_ub`` and ``lb <= z <= ub``. Internally every row becomes an
equality (inequality rows get a nonnegative slack), the columns are
equilibrated, a triangular crash basis is built from the structural
columns, and a composite phase 1 (minimize the sum of bound violations of
the basic variables) is followed by phase 2 on the true objective.

Pricing is Dantzig's rule with lowest-index tie-breaking; after a run of
non-improving (degenerate) pivots it switches to Bland's rule until the
objective moves again, which rules out cycling. Given identical input the
pivot sequence, and hence the result, is bitwise reproducible.
"""

from __future__ import annotations

import enum
import heapq
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

FEAS_TOL = 1e-9
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-9
_DENSE_MAX = 150
_DEGENERATE_RUN = 25


class LpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


class NumericalFailure(RuntimeError):
    """Basis factorization or pivoting broke down."""


def _as_csr(A, n):
    if A is None:
        return sp.csr_matrix((0, n))
    if sp.issparse(A):
        return sp.csr_matrix(A, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return sp.csr_matrix((0, n))
    return sp.csr_matrix(A)


@dataclass
class LpProblem:
    c: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_ub: object = None
    b_ub: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    names: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if not np.all(np.isfinite(self.c)):
            raise ValueError("objective coefficients must be finite")
        self.A_eq = _as_csr(self.A_eq, n)
        self.A_ub = _as_csr(self.A_ub, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, dtype=float).ravel()
        self.lb = np.zeros(n) if self.lb is None else np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if self.A_eq.shape != (self.b_eq.size, n) or self.A_ub.shape != (self.b_ub.size, n):
            raise ValueError("constraint matrix and right-hand side dimensions disagree")
        if np.any(self.lb > self.ub):
            raise ValueError("lb must not exceed ub")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("bounds must not be NaN")
        if self.names is not None and len(self.names) != n:
            raise ValueError("names must have one entry per variable")

    @property
    def n_vars(self) -> int:
        return self.c.size

    def max_violation(self, z) -> float:
        """Largest absolute constraint or bound violation of `z`."""
        z = np.asarray(z, dtype=float)
        v = [0.0]
        if self.b_eq.size:
            v.append(np.max(np.abs(self.A_eq @ z - self.b_eq)))
        if self.b_ub.size:
            v.append(np.max(self.A_ub @ z - self.b_ub))
        v.append(np.max(self.lb - z, initial=0.0))
        v.append(np.max(z - self.ub, initial=0.0))
        return float(max(v))

    def to_mps(self) -> str:
        """Free-format MPS text (with OBJSENSE MAX) for external cross-checks."""
        n = self.n_vars
        names = self.names or [f"x{j}" for j in range(n)]
        out = io.StringIO()
        out.write("NAME          LPDUMP\nOBJSENSE\n    MAX\nROWS\n N  OBJ\n")
        for i in range(self.b_eq.size):
            out.write(f" E  EQ{i}\n")
        for i in range(self.b_ub.size):
            out.write(f" L  UB{i}\n")
        out.write("COLUMNS\n")
        Aeq = self.A_eq.tocsc()
        Aub = self.A_ub.tocsc()
        for j in range(n):
            if self.c[j] != 0:
                out.write(f"    {names[j]}  OBJ  {self.c[j]:.17g}\n")
            for k in range(Aeq.indptr[j], Aeq.indptr[j + 1]):
                out.write(f"    {names[j]}  EQ{Aeq.indices[k]}  {Aeq.data[k]:.17g}\n")
            for k in range(Aub.indptr[j], Aub.indptr[j + 1]):
                out.write(f"    {names[j]}  UB{Aub.indices[k]}  {Aub.data[k]:.17g}\n")
        out.write("RHS\n")
        for i, v in enumerate(self.b_eq):
            if v != 0:
                out.write(f"    RHS  EQ{i}  {v:.17g}\n")
        for i, v in enumerate(self.b_ub):
            if v != 0:
                out.write(f"    RHS  UB{i}  {v:.17g}\n")
        out.write("BOUNDS\n")
        for j in range(n):
            lo, hi = self.lb[j], self.ub[j]
            if lo == hi:
                out.write(f" FX BND  {names[j]}  {lo:.17g}\n")
                continue
            if np.isneginf(lo) and np.isposinf(hi):
                out.write(f" FR BND  {names[j]}\n")
                continue
            if np.isneginf(lo):
                out.write(f" MI BND  {names[j]}\n")
            elif lo != 0:
                out.write(f" LO BND  {names[j]}  {lo:.17g}\n")
            if np.isfinite(hi):
                out.write(f" UP BND  {names[j]}  {hi:.17g}\n")
        out.write("ENDATA\n")
        return out.getvalue()


@dataclass
class LpSolution:
    z_star: np.ndarray | None
    obj: float
    status: LpStatus
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == LpStatus.OPTIMAL


class _Factor:
    def __init__(self, B):
        m = B.shape[0]
        self.dense = m <= _DENSE_MAX
        try:
            if self.dense:
                Bd = B.toarray()
                self.lu = sla.lu_factor(Bd, check_finite=False)
                d = np.abs(np.diag(self.lu[0]))
                if d.size and d.min() <= 1e-13 * max(1.0, d.max()):
                    raise NumericalFailure("singular basis")
            else:
                self.lu = spla.splu(B.tocsc(), permc_spec="COLAMD")
        except (RuntimeError, ValueError) as exc:
            if isinstance(exc, NumericalFailure):
                raise
            raise NumericalFailure(f"basis factorization failed: {exc}") from exc

    def solve(self, b, trans=False):
        if self.dense:
            return sla.lu_solve(self.lu, b, trans=1 if trans else 0, check_finite=False)
        return self.lu.solve(b, trans="T" if trans else "N")


def _crash(A_eq_csr, lb, ub, n_struct):
    """Greedy triangular crash: map equality rows to structural columns.

    A column is eligible once it has a single nonzero among the unassigned
    rows. Columns with room to move are preferred; fixed columns are taken
    only when nothing else is eligible, so long chains broken by a pinned
    entry still crash completely. Ties go to the lowest column index.
    """
    m = A_eq_csr.shape[0]
    A = A_eq_csr.tocsc()
    A.eliminate_zeros()
    Ar = A.tocsr()
    rowmax = np.zeros(m)
    if A.nnz:
        coo = A.tocoo()
        np.maximum.at(rowmax, coo.row, np.abs(coo.data))
    count = np.diff(A.indptr).astype(np.int64)
    assigned_row = np.zeros(m, dtype=bool)
    used = np.zeros(n_struct, dtype=bool)
    rank = (lb[:n_struct] == ub[:n_struct]).astype(np.int64)
    heap = [(int(rank[j]), j) for j in range(n_struct) if count[j] == 1]
    heapq.heapify(heap)
    row_of = {}
    while heap:
        _, j = heapq.heappop(heap)
        if used[j] or count[j] != 1:
            continue
        rows = A.indices[A.indptr[j]:A.indptr[j + 1]]
        vals = A.data[A.indptr[j]:A.indptr[j + 1]]
        live = ~assigned_row[rows]
        i = int(rows[live][0])
        if abs(vals[live][0]) < 1e-3 * rowmax[i]:
            continue
        used[j] = True
        assigned_row[i] = True
        row_of[i] = j
        for k in Ar.indices[Ar.indptr[i]:Ar.indptr[i + 1]]:
            count[k] -= 1
            if count[k] == 1 and not used[k]:
                heapq.heappush(heap, (int(rank[k]), int(k)))
    return row_of


def solve_lp(p: LpProblem, max_iter: int | None = None) -> LpSolution:
    """Solve `p` to optimality, or report infeasibility/unboundedness."""
    n = p.n_vars
    m_eq, m_ub = p.b_eq.size, p.b_ub.size
    m = m_eq + m_ub
    if m == 0:
        return _solve_box(p)

    # --- standard form: [z | slacks | artificials], minimize
    A_struct = sp.vstack([p.A_eq, p.A_ub]).tocsr()
    b = np.concatenate([p.b_eq, p.b_ub])
    rs = np.ones(m)
    absA = abs(A_struct)
    rmax = absA.max(axis=1).toarray().ravel()
    rs[rmax > 0] = 1.0 / rmax[rmax > 0]
    A_rs = sp.diags(rs) @ A_struct
    cmax = abs(A_rs).max(axis=0).toarray().ravel()
    cs = np.ones(n)
    cs[cmax > 0] = 1.0 / cmax[cmax > 0]
    A_s = (A_rs @ sp.diags(cs)).tocsr()
    b_s = b * rs
    lb = np.concatenate([p.lb / cs, np.zeros(m_ub)])
    ub = np.concatenate([p.ub / cs, np.full(m_ub, np.inf)])
    cost = np.concatenate([-p.c * cs, np.zeros(m_ub)])
    slack = sp.vstack([sp.csr_matrix((m_eq, m_ub)), sp.identity(m_ub, format="csr")]) if m_ub else None

    row_of = _crash(A_s[:m_eq], lb, ub, n) if m_eq else {}
    art_rows = [i for i in range(m_eq) if i not in row_of]
    n_art = len(art_rows)
    cols = [A_s] + ([slack] if m_ub else [])
    if n_art:
        cols.append(sp.csr_matrix((np.ones(n_art), (art_rows, np.arange(n_art))), shape=(m, n_art)))
    A = sp.hstack(cols).tocsc()
    N = A.shape[1]
    lb = np.concatenate([lb, np.zeros(n_art)])
    ub = np.concatenate([ub, np.zeros(n_art)])
    cost = np.concatenate([cost, np.zeros(n_art)])

    basis = np.empty(m, dtype=np.int64)
    for i in range(m_eq):
        basis[i] = row_of[i] if i in row_of else n + m_ub + art_rows.index(i)
    for i in range(m_ub):
        basis[m_eq + i] = n + i
    x = np.where(np.isfinite(lb), lb, np.where(np.isfinite(ub), ub, 0.0))
    is_basic = np.zeros(N, dtype=bool)
    is_basic[basis] = True
    fixed = lb == ub

    if max_iter is None:
        max_iter = 50 * (m + N) + 1000
    it = 0
    bland = False
    stall = 0
    best = np.inf
    last_phase = None
    while True:
        B = A[:, basis]
        fac = _Factor(B)
        xN_contrib = A @ np.where(is_basic, 0.0, x)
        xB = fac.solve(b_s - xN_contrib)
        x[basis] = xB
        lbB, ubB = lb[basis], ub[basis]
        below = xB < lbB - FEAS_TOL
        above = xB > ubB + FEAS_TOL
        phase1 = bool(below.any() or above.any())
        if phase1:
            cB = np.where(below, -1.0, np.where(above, 1.0, 0.0))
            cN = np.zeros(N)
            objval = float(np.sum(lbB[below] - xB[below]) + np.sum(xB[above] - ubB[above]))
        else:
            cB = cost[basis]
            cN = cost
            objval = float(cost @ x)
        phase = 1 if phase1 else 2
        if phase != last_phase:
            best = np.inf
            stall = 0
            bland = False
            last_phase = phase
        if objval < best - 1e-12 * max(1.0, abs(best) if np.isfinite(best) else 1.0):
            best = objval
            stall = 0
            bland = False
        else:
            stall += 1
            if stall >= _DEGENERATE_RUN:
                bland = True

        y = fac.solve(cB, trans=True)
        d = cN - A.T @ y
        d[is_basic] = 0.0
        d[fixed] = 0.0
        at_lb = np.isfinite(lb) & (x <= lb)
        at_ub = np.isfinite(ub) & (x >= ub)
        free = ~at_lb & ~at_ub
        up = (d < -DUAL_TOL) & (at_lb | free) & ~is_basic
        dn = (d > DUAL_TOL) & (at_ub | free) & ~is_basic
        cand = np.flatnonzero(up | dn)
        if cand.size == 0:
            if phase1:
                return LpSolution(None, float("nan"), LpStatus.INFEASIBLE, it)
            break
        if it >= max_iter:
            raise NumericalFailure(f"simplex did not terminate within {max_iter} iterations")
        it += 1
        if bland:
            q = int(cand[0])
        else:
            q = int(cand[np.argmax(np.abs(d[cand]))])
        direction = 1.0 if up[q] else -1.0

        aq = A[:, q].toarray().ravel()
        w = fac.solve(aq)
        rate = -direction * w
        t_best = ub[q] - lb[q]
        leave = -1
        leave_to = 0.0
        nz = np.abs(w) > PIVOT_TOL
        if nz.any():
            idx = np.flatnonzero(nz)
            r = rate[idx]
            xb = xB[idx]
            lo_b = lbB[idx]
            hi_b = ubB[idx]
            feas = ~(below[idx] | above[idx])
            lim = np.full(idx.size, np.inf)
            tgt = np.zeros(idx.size)
            # feasible basics travel to the bound they approach
            m1 = feas & (r < 0) & np.isfinite(lo_b)
            lim[m1] = (xb[m1] - lo_b[m1]) / -r[m1]
            tgt[m1] = lo_b[m1]
            m2 = feas & (r > 0) & np.isfinite(hi_b)
            lim[m2] = (hi_b[m2] - xb[m2]) / r[m2]
            tgt[m2] = hi_b[m2]
            # infeasible basics stop where they become feasible
            m3 = below[idx] & (r > 0)
            lim[m3] = (lo_b[m3] - xb[m3]) / r[m3]
            tgt[m3] = lo_b[m3]
            m4 = above[idx] & (r < 0)
            lim[m4] = (xb[m4] - hi_b[m4]) / -r[m4]
            tgt[m4] = hi_b[m4]
            lim = np.maximum(lim, 0.0)
            tmin = lim.min()
            if np.isfinite(tmin) and tmin < t_best:
                ties = np.flatnonzero(lim <= tmin + 1e-12 * max(1.0, tmin))
                if bland:
                    k = ties[np.argmin(basis[idx[ties]])]
                else:
                    k = ties[np.argmax(np.abs(w[idx[ties]]))]
                leave = int(idx[k])
                leave_to = float(tgt[k])
                t_best = float(lim[k])
        if not np.isfinite(t_best):
            if phase1:
                raise NumericalFailure("phase 1 ray without blocking variable")
            return LpSolution(None, float("inf"), LpStatus.UNBOUNDED, it)
        x[basis] = xB + rate * t_best
        x[q] = x[q] + direction * t_best
        if leave < 0:
            x[q] = ub[q] if direction > 0 else lb[q]
            continue
        out = basis[leave]
        x[out] = leave_to
        is_basic[out] = False
        basis[leave] = q
        is_basic[q] = True

    z = x[:n] * cs
    z = np.clip(z, p.lb, p.ub)
    return LpSolution(z, float(p.c @ z), LpStatus.OPTIMAL, it)


def _solve_box(p: LpProblem) -> LpSolution:
    z = np.zeros(p.n_vars)
    for j, cj in enumerate(p.c):
        if cj > 0:
            z[j] = p.ub[j]
        elif cj < 0:
            z[j] = p.lb[j]
        else:
            z[j] = p.lb[j] if np.isfinite(p.lb[j]) else (p.ub[j] if np.isfinite(p.ub[j]) else 0.0)
        if not np.isfinite(z[j]):
            return LpSolution(None, float("inf"), LpStatus.UNBOUNDED, 0)
    return LpSolution(z, float(p.c @ z), LpStatus.OPTIMAL, 0)
