"""Linear programming.

``solve_lp`` solves

    minimize    c^T x
    subject to  A_i x <= b_i   (sense "<")
                A_i x  = b_i   (sense "=")
                lo <= x <= hi

with a bounded-variable revised simplex method (two-phase start without a
big-M term, Dantzig pricing that falls back to Bland's rule on degenerate
stalls). ``method="highs"`` delegates to scipy's HiGHS interface for
one-shot problems, and ``IncrementalLP`` keeps a warm-started highspy model
to which rows can be added; the synthesis loop uses the latter for its large
subproblems.

Dual values follow the marginal convention ``d objective / d b``: they are
non-positive for ``<`` rows of a minimization problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

logger = logging.getLogger(__name__)

HIGHS_VARIANTS = ("highs", "highs-ds", "highs-ipm")
PRIMAL_TOL = 1e-9
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-11


class LPError(RuntimeError):
    """Numerical failure inside the LP solver."""


class _SingularBasis(Exception):
    pass


@dataclass
class LinearProgram:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    sense: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A is None or np.shape(self.A)[0] == 0:
            self.A = sp.csr_matrix((0, n))
        else:
            self.A = sp.csr_matrix(self.A, dtype=float)
        self.sense = np.asarray(self.sense, dtype="<U1").ravel()
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        m = self.A.shape[0]
        if self.A.shape[1] != n or self.b.size != m or self.sense.size != m:
            raise ValueError("inconsistent LP dimensions")
        if not set(self.sense.tolist()) <= {"<", "="}:
            raise ValueError("row sense must be '<' or '='")
        for arr in (self.c, self.A.data, self.b):
            if np.isnan(arr).any():
                raise ValueError("LP data contains NaN")
        if np.isnan(self.lo).any() or np.isnan(self.hi).any() or np.any(self.lo > self.hi):
            raise ValueError("invalid variable bounds")

    @property
    def n(self):
        return self.c.size

    @property
    def m(self):
        return self.A.shape[0]

    @classmethod
    def from_inequalities(cls, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lo=0.0, hi=np.inf):
        c = np.asarray(c, dtype=float).ravel()
        n = c.size
        blocks, rhs, sense = [], [], []
        if A_ub is not None and np.shape(A_ub)[0] > 0:
            blocks.append(sp.csr_matrix(A_ub))
            rhs.append(np.asarray(b_ub, dtype=float).ravel())
            sense.append(np.full(blocks[-1].shape[0], "<"))
        if A_eq is not None and np.shape(A_eq)[0] > 0:
            blocks.append(sp.csr_matrix(A_eq))
            rhs.append(np.asarray(b_eq, dtype=float).ravel())
            sense.append(np.full(blocks[-1].shape[0], "="))
        if blocks:
            A = sp.vstack(blocks).tocsr()
            b = np.concatenate(rhs)
            s = np.concatenate(sense)
        else:
            A = sp.csr_matrix((0, n))
            b = np.zeros(0)
            s = np.zeros(0, dtype="<U1")
        return cls(c=c, A=A, b=b, sense=s, lo=lo, hi=hi)


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    iterations: int = 0
    pivots: list = field(default_factory=list)
    method: str = "simplex"


# ---------------------------------------------------------------------------
# plain-text dump


def write_lp(lp, path):
    """Write ``lp`` in CPLEX LP text format for external cross-checking."""

    def term(coef, j):
        return f"{'+' if coef >= 0 else '-'} {abs(coef):.17g} x{j}"

    lines = ["\\ written by pwaclf", "Minimize", " obj: " +
             (" ".join(term(c, j) for j, c in enumerate(lp.c) if c != 0) or "0 x0"),
             "Subject To"]
    A = lp.A.tocsr()
    for i in range(lp.m):
        row = A.getrow(i)
        expr = " ".join(term(v, j) for j, v in zip(row.indices, row.data)) or "0 x0"
        op = "<=" if lp.sense[i] == "<" else "="
        lines.append(f" r{i}: {expr} {op} {lp.b[i]:.17g}")
    lines.append("Bounds")
    for j in range(lp.n):
        lo, hi = lp.lo[j], lp.hi[j]
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" x{j} free")
        else:
            los = "-inf" if np.isinf(lo) else f"{lo:.17g}"
            his = "+inf" if np.isinf(hi) else f"{hi:.17g}"
            lines.append(f" {los} <= x{j} <= {his}")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# simplex


def _equilibrate(M, passes=8):
    """Geometric-mean row/column scaling factors (powers of two)."""
    m, n = M.shape
    r = np.ones(m)
    s = np.ones(n)
    absM = np.abs(M)
    for _ in range(passes):
        S = absM * r[:, None] * s[None, :]
        with np.errstate(divide="ignore"):
            logS = np.where(S > 0, np.log2(np.where(S > 0, S, 1.0)), np.nan)
        rmax = np.nanmax(np.where(np.isnan(logS), -np.inf, logS), axis=1)
        rmin = np.nanmin(np.where(np.isnan(logS), np.inf, logS), axis=1)
        ok = np.isfinite(rmax)
        r[ok] *= 2.0 ** (-np.round((rmax[ok] + rmin[ok]) / 2))
        S = absM * r[:, None] * s[None, :]
        with np.errstate(divide="ignore"):
            logS = np.where(S > 0, np.log2(np.where(S > 0, S, 1.0)), np.nan)
        cmax = np.nanmax(np.where(np.isnan(logS), -np.inf, logS), axis=0)
        cmin = np.nanmin(np.where(np.isnan(logS), np.inf, logS), axis=0)
        ok = np.isfinite(cmax)
        s[ok] *= 2.0 ** (-np.round((cmax[ok] + cmin[ok]) / 2))
    return r, s


class _Simplex:
    """Bounded-variable revised simplex on ``M x = b, l <= x <= u``."""

    def __init__(self, M, b, c, l, u, basis, x, bland=False, max_iter=None):
        self.M = M
        self.b = b
        self.c = c
        self.l = l
        self.u = u
        self.basis = list(basis)
        self.x = x
        self.bland = bland
        m, n = M.shape
        self.max_iter = max_iter or 50 * (m + n) + 1000
        self.pivots = []
        self.iterations = 0

    def _factor(self):
        B = self.M[:, self.basis]
        lu, piv = sla.lu_factor(B, check_finite=False)
        d = np.abs(np.diag(lu))
        if d.size and (d.min() <= 1e-13 * max(1.0, d.max())):
            raise _SingularBasis()
        return lu, piv

    def run(self, cost):
        m, n = self.M.shape
        degenerate_run = 0
        use_bland = self.bland
        is_basic = np.zeros(n, dtype=bool)
        is_basic[self.basis] = True
        while True:
            if self.iterations >= self.max_iter:
                raise LPError("iteration limit reached")
            self.iterations += 1
            fac = self._factor()
            xn = np.where(is_basic, 0.0, self.x)
            xB = sla.lu_solve(fac, self.b - self.M @ xn, check_finite=False)
            self.x[self.basis] = xB
            pi = sla.lu_solve(fac, cost[self.basis], trans=1, check_finite=False)
            d = cost - self.M.T @ pi
            free = np.isinf(self.l) & np.isinf(self.u)
            at_lo = ~is_basic & ~free & (self.x <= self.l + PRIMAL_TOL) & (self.l < self.u)
            at_hi = ~is_basic & ~free & (self.x >= self.u - PRIMAL_TOL) & (self.l < self.u)
            elig_up = (at_lo | (~is_basic & free)) & (d < -DUAL_TOL)
            elig_dn = (at_hi | (~is_basic & free)) & (d > DUAL_TOL)
            elig = elig_up | elig_dn
            if not elig.any():
                return "optimal"
            cand = np.flatnonzero(elig)
            if use_bland:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if elig_up[j] else -1.0
            w = sla.lu_solve(fac, self.M[:, j], check_finite=False)
            delta = -direction * w
            lB = self.l[self.basis]
            uB = self.u[self.basis]
            ratios = np.full(m, np.inf)
            dec = delta < -PIVOT_TOL
            inc = delta > PIVOT_TOL
            ratios[dec] = (xB[dec] - lB[dec]) / -delta[dec]
            ratios[inc] = (uB[inc] - xB[inc]) / delta[inc]
            ratios = np.maximum(ratios, 0.0)
            t_flip = self.u[j] - self.l[j]
            t_basic = ratios.min() if m else np.inf
            if not np.isfinite(t_basic) and not np.isfinite(t_flip):
                return "unbounded"
            if t_flip <= t_basic:
                self.x[j] += direction * t_flip
                self.x[self.basis] = xB + delta * t_flip
                self.pivots.append((j, -1))
                degenerate_run = 0
                continue
            t = t_basic
            ties = np.flatnonzero(ratios <= t + 1e-12 * max(1.0, t))
            if use_bland:
                r = int(ties[np.argmin(np.asarray(self.basis)[ties])])
            else:
                r = int(ties[np.argmax(np.abs(delta[ties]))])
            leaving = self.basis[r]
            self.x[j] += direction * t
            self.x[self.basis] = xB + delta * t
            self.x[leaving] = self.l[leaving] if delta[r] < 0 else self.u[leaving]
            self.basis[r] = j
            is_basic[j] = True
            is_basic[leaving] = False
            self.pivots.append((j, leaving))
            if t <= 1e-12:
                degenerate_run += 1
                if degenerate_run > 20:
                    use_bland = True
            else:
                degenerate_run = 0


def _solve_unconstrained(lp):
    x = np.zeros(lp.n)
    for j, cj in enumerate(lp.c):
        if cj > 0:
            x[j] = lp.lo[j]
        elif cj < 0:
            x[j] = lp.hi[j]
        else:
            x[j] = np.clip(0.0, lp.lo[j], lp.hi[j])
    if not np.all(np.isfinite(x)):
        return LPResult(status="unbounded")
    return LPResult(status="optimal", x=x, objective=float(lp.c @ x), duals=np.zeros(0),
                    reduced_costs=lp.c.copy())


def _solve_simplex(lp, scale=True, bland=False):
    A = lp.A.toarray()
    m, n = A.shape
    if m == 0:
        return _solve_unconstrained(lp)
    ub_rows = np.flatnonzero(lp.sense == "<")
    k = ub_rows.size
    S = np.zeros((m, k))
    S[ub_rows, np.arange(k)] = 1.0
    M = np.hstack([A, S])
    l = np.concatenate([lp.lo, np.zeros(k)])
    u = np.concatenate([lp.hi, np.full(k, np.inf)])
    c = np.concatenate([lp.c, np.zeros(k)])
    b = lp.b.copy()

    if scale and m > 0:
        r, s = _equilibrate(M)
    else:
        r, s = np.ones(m), np.ones(n + k)
    Ms = M * r[:, None] * s[None, :]
    bs = b * r
    cs = c * s
    ls = l / s
    us = u / s

    x = np.where(np.isfinite(ls), ls, np.where(np.isfinite(us), us, 0.0))
    slack_of_row = {row: n + i for i, row in enumerate(ub_rows)}
    basis = []
    art_cols = []
    resid = bs - Ms @ np.where(np.arange(n + k) >= n, 0.0, x)
    x[n:] = 0.0
    for i in range(m):
        j = slack_of_row.get(i)
        if j is not None and resid[i] >= 0:
            basis.append(j)
            x[j] = resid[i] / Ms[i, j]
        else:
            art_cols.append((i, 1.0 if resid[i] >= 0 else -1.0))
    na = len(art_cols)
    Mart = np.zeros((m, na))
    for a, (i, sign) in enumerate(art_cols):
        Mart[i, a] = sign
    Mfull = np.hstack([Ms, Mart])
    lfull = np.concatenate([ls, np.zeros(na)])
    ufull = np.concatenate([us, np.full(na, np.inf)])
    xfull = np.concatenate([x, np.abs(resid[[i for i, _ in art_cols]]) if na else np.zeros(0)])
    basis_full = list(basis)
    # artificials fill the remaining rows in row order
    row_basic = {}
    for j in basis:
        row_basic[int(np.flatnonzero(Ms[:, j])[0])] = j
    for a, (i, _) in enumerate(art_cols):
        row_basic[i] = n + k + a
    basis_full = [row_basic[i] for i in range(m)]

    solver = _Simplex(Mfull, bs, None, lfull, ufull, basis_full, xfull, bland=bland)
    if na:
        c1 = np.concatenate([np.zeros(n + k), np.ones(na)])
        solver.run(c1)
        infeas = xfull[n + k:].sum()
        if infeas > 1e-9 * (1.0 + np.abs(bs).max()):
            return LPResult(status="infeasible", iterations=solver.iterations,
                            pivots=solver.pivots)
        solver.u[n + k:] = 0.0
        solver.x[n + k:] = np.minimum(solver.x[n + k:], 0.0)
    c2 = np.concatenate([cs, np.zeros(na)])
    status = solver.run(c2)
    if status == "unbounded":
        return LPResult(status="unbounded", iterations=solver.iterations, pivots=solver.pivots)

    # refine on the unscaled data with the optimal basis
    basis = solver.basis
    xs = solver.x * np.concatenate([s, np.ones(na)])
    Mu = np.hstack([M, Mart / r[:, None] if na else np.zeros((m, 0))])
    cu = np.concatenate([c, np.zeros(na)])
    is_basic = np.zeros(Mu.shape[1], dtype=bool)
    is_basic[basis] = True
    xn = np.where(is_basic, 0.0, xs)
    lu_u = np.concatenate([l, np.zeros(na)])
    uu = np.concatenate([u, np.zeros(na)])
    xn = np.clip(xn, lu_u, uu)
    xn[is_basic] = 0.0
    if m:
        Bu = Mu[:, basis]
        try:
            fac = sla.lu_factor(Bu, check_finite=False)
            xs_b = sla.lu_solve(fac, lp.b - Mu @ xn, check_finite=False)
            pi = sla.lu_solve(fac, cu[basis], trans=1, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise _SingularBasis() from exc
        if not (np.all(np.isfinite(xs_b)) and np.all(np.isfinite(pi))):
            raise _SingularBasis()
        xfinal = xn.copy()
        xfinal[basis] = xs_b
    else:
        pi = np.zeros(0)
        xfinal = xn
    xstruct = xfinal[:n]
    reduced = lp.c - A.T @ pi
    return LPResult(status="optimal", x=xstruct, objective=float(lp.c @ xstruct), duals=pi,
                    reduced_costs=reduced, iterations=solver.iterations, pivots=solver.pivots)


def _solve_highs(lp, variant="highs"):
    from scipy.optimize import linprog

    ub = lp.sense == "<"
    eq = ~ub
    A = lp.A.tocsr()
    kwargs = {}
    if ub.any():
        kwargs.update(A_ub=A[ub], b_ub=lp.b[ub])
    if eq.any():
        kwargs.update(A_eq=A[eq], b_eq=lp.b[eq])
    bounds = np.column_stack([np.where(np.isinf(lp.lo), None, lp.lo),
                              np.where(np.isinf(lp.hi), None, lp.hi)])
    res = linprog(lp.c, bounds=bounds, method=variant, **kwargs)
    if res.status == 2:
        return LPResult(status="infeasible", method="highs")
    if res.status == 3:
        return LPResult(status="unbounded", method="highs")
    if res.status != 0:
        raise LPError(f"HiGHS failed: {res.message}")
    duals = np.zeros(lp.m)
    if ub.any():
        duals[ub] = res.ineqlin.marginals
    if eq.any():
        duals[eq] = res.eqlin.marginals
    reduced = lp.c - A.T @ duals
    return LPResult(status="optimal", x=res.x, objective=float(res.fun), duals=duals,
                    reduced_costs=reduced, iterations=int(res.nit), method="highs")


def solve_lp(lp, method="simplex", dump=None):
    """Solve ``lp``; returns an ``LPResult`` with status optimal/infeasible/unbounded.

    A numerically singular basis triggers one restart from scratch without
    scaling and with Bland's rule throughout; a second failure raises
    ``LPError("basis singular")``.
    """
    if dump is not None:
        write_lp(lp, dump)
    if method in HIGHS_VARIANTS:
        return _solve_highs(lp, method)
    if method != "simplex":
        raise ValueError(f"unknown LP method {method!r}")
    try:
        return _solve_simplex(lp)
    except _SingularBasis:
        logger.info("singular basis; restarting without scaling under Bland's rule")
    try:
        return _solve_simplex(lp, scale=False, bland=True)
    except _SingularBasis:
        raise LPError("basis singular") from None


def kkt_residuals(lp, res):
    """Primal feasibility, dual feasibility and complementarity of a solution."""
    x, y = res.x, res.duals
    Ax = lp.A @ x
    ub = lp.sense == "<"
    primal = max(
        float(np.max(Ax[ub] - lp.b[ub], initial=0.0)),
        float(np.max(np.abs(Ax[~ub] - lp.b[~ub]), initial=0.0)),
        float(np.max(lp.lo - x, initial=0.0)),
        float(np.max(x - lp.hi, initial=0.0)),
    )
    r = lp.c - lp.A.T @ y
    at_lo = np.isfinite(lp.lo) & (x <= lp.lo + 1e-9)
    at_hi = np.isfinite(lp.hi) & (x >= lp.hi - 1e-9)
    dual_viol = np.zeros_like(r)
    dual_viol = np.where(at_lo & at_hi, 0.0, dual_viol)
    dual_viol = np.where(at_lo & ~at_hi, np.maximum(-r, 0.0), dual_viol)
    dual_viol = np.where(at_hi & ~at_lo, np.maximum(r, 0.0), dual_viol)
    dual_viol = np.where(~at_lo & ~at_hi, np.abs(r), dual_viol)
    dual = max(float(dual_viol.max(initial=0.0)), float(np.max(y[ub], initial=0.0)))
    comp = float(np.max(np.abs(y[ub] * (Ax[ub] - lp.b[ub])), initial=0.0))
    dual_obj = float(lp.b @ y + np.sum(np.where(r > 0, r * np.where(np.isfinite(lp.lo), lp.lo, 0), 0))
                     + np.sum(np.where(r < 0, r * np.where(np.isfinite(lp.hi), lp.hi, 0), 0)))
    return {"primal": primal, "dual": dual, "complementarity": comp,
            "gap": abs(dual_obj - float(lp.c @ x))}


class IncrementalLP:
    """``min c^T x`` s.t. ``A x <= b``, ``lo <= x <= hi`` with rows added over time.

    Backed by the ``highspy`` interface to HiGHS so that each re-solve after
    :meth:`add_rows` warm-starts the dual simplex from the previous basis.
    This is what constraint generation inside the synthesis loop needs;
    one-shot problems go through :func:`solve_lp`.
    """

    def __init__(self, c, lo, hi):
        import highspy

        self._hs = highspy
        self.h = highspy.Highs()
        self.h.setOptionValue("output_flag", False)
        c = np.asarray(c, dtype=float)
        self.n = len(c)
        self.m = 0
        inf = highspy.kHighsInf
        lo = np.where(np.isfinite(lo), lo, -inf).astype(float)
        hi = np.where(np.isfinite(hi), hi, inf).astype(float)
        self.h.addCols(self.n, c, lo, hi, 0, np.zeros(0, np.int32), np.zeros(0, np.int32),
                       np.zeros(0))

    def add_rows(self, A, b):
        A = sp.csr_matrix(A)
        if A.shape[0] == 0:
            return
        if A.shape[1] != self.n:
            raise ValueError("row width does not match the column count")
        b = np.asarray(b, dtype=float)
        lower = np.full(len(b), -self._hs.kHighsInf)
        self.h.addRows(A.shape[0], lower, b, A.nnz, A.indptr[:-1].astype(np.int32),
                       A.indices.astype(np.int32), A.data.astype(float))
        self.m += A.shape[0]

    def solve(self):
        self.h.run()
        status = self.h.getModelStatus()
        MS = self._hs.HighsModelStatus
        if status == MS.kOptimal:
            x = np.array(self.h.getSolution().col_value)
            return LPResult(status="optimal", x=x, objective=float(self.h.getInfo().objective_function_value),
                            method="highs-incremental")
        if status == MS.kInfeasible:
            return LPResult(status="infeasible", method="highs-incremental")
        if status in (MS.kUnbounded, MS.kUnboundedOrInfeasible):
            return LPResult(status="unbounded", method="highs-incremental")
        raise LPError(f"HiGHS failed: {self.h.modelStatusToString(status)}")
