"""Design of a configuration-constrained PWA control Lyapunov function.

The decision vector stacks ``(d, u_1..u_v, y_1..y_v, z, lambda_1..lambda_v,
kappa_1..kappa_v)``. All nonlinear constraint rows are written as
``c(xi) <= 0`` and grouped into families:

``cost``
    ``L(V_i z, u_i) + kappa_i - d + y_i - s_i^T z``
``invariance``
    ``G_j f(V_i z, u_i) + h_j y_i + wbar_j + lambda_i g_j - z_j`` for every facet ``j``
``lambda`` / ``kappa``
    ``gamma |[(V_i - V_j) z; u_i - u_j]|^alpha - lambda_i`` for every ``j`` in ``N_i``
    (and the same with ``sigma``, ``beta``)
``state``
    ``V_i z in X``

The configuration rows ``E z <= 0`` and the control box are linear and kept
exact in every subproblem. The program is solved by a trust-region
sequential linear programming method with an exact ``l1`` penalty.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import __version__
from .geometry import Template
from .lp import IncrementalLP, LinearProgram, solve_lp
from .model import BallSet, model_from_config, row_gain, support_W

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FAMILIES = ("cost", "invariance", "lambda", "kappa", "state")


class SynthesisError(RuntimeError):
    """Raised when the design problem cannot be solved.

    ``best`` carries the best point found so far (or ``None``).
    """

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace or []


def _norm_power(D, coef, power, smooth=1e-9):
    """``coef * |D|^power`` with gradient; smoothed below ``power = 2``."""
    sq = np.sum(D * D, axis=-1)
    if coef == 0.0 or power == 0.0:
        val = np.full(sq.shape, coef if power == 0.0 else 0.0)
        return val, np.zeros_like(D)
    eps = 0.0 if power >= 2.0 else smooth
    base = sq + eps
    val = coef * base ** (0.5 * power)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = coef * power * np.where(base > 0, base ** (0.5 * power - 1.0), 0.0)
    return val, scale[..., None] * D


class SynthesisProblem:
    """Residuals and sparse Jacobian of the design program.

    Parameters
    ----------
    template, model
        Configuration template and system model with matching ``n_x``.
    objective : {"drift", "domain", "combined"}
        ``rho = d``, ``rho = -sum(z_1)`` or ``rho = d - omega * sum(z_1)``.
    omega : float, optional
        Weight of the combined objective; required for ``"combined"``.
    d_max : float, optional
        Upper bound on ``d`` (keeps the domain stage bounded).
    fixed_z1 : array, optional
        Freeze the domain offsets ``z_1``.
    margin : float
        Tightening added to the domain-invariance and state rows while
        solving, so that converged points satisfy them strictly.
    """

    def __init__(self, template, model, objective="drift", omega=None, d_max=None,
                 fixed_z1=None, margin=1e-7):
        if template.n_x != model.n_x:
            raise ValueError("template/model dimension mismatch")
        if objective not in ("drift", "domain", "combined"):
            raise ValueError(f"unknown objective {objective!r}")
        if objective == "combined" and omega is None:
            raise ValueError("combined objective requires omega")
        self.T = template
        self.model = model
        self.objective = objective
        self.omega = 0.0 if omega is None else float(omega)
        self.d_max = d_max
        self.margin = float(margin)
        T = template
        self.v, self.f, self.f1 = T.v, T.f, T.f1
        self.n_x, self.n_u, self.n = T.n_x, model.n_u, T.n
        self.G = T.G
        self.h = T.h
        self.g = row_gain(self.G)
        self.wbar = support_W(self.G, model.W)
        self.pairs = T.lower_adjacency_pairs()
        self.P = np.ascontiguousarray(T.Ainv[:, : self.n_x, :])
        self.srow = np.ascontiguousarray(T.Ainv[:, self.n_x, :])
        self.active = T.active
        self.E = T.E.tocsr()

        v, n_u, f = self.v, self.n_u, self.f
        self.i_d = 0
        self.s_u = slice(1, 1 + v * n_u)
        self.s_y = slice(self.s_u.stop, self.s_u.stop + v)
        self.s_z = slice(self.s_y.stop, self.s_y.stop + f)
        self.s_l = slice(self.s_z.stop, self.s_z.stop + v)
        self.s_k = slice(self.s_l.stop, self.s_l.stop + v)
        self.n_var = self.s_k.stop

        self.n_X = model.X.n_constraints
        npair = len(self.pairs)
        sizes = {"cost": v, "invariance": v * f, "lambda": npair, "kappa": npair,
                 "state": v * self.n_X}
        self.families = {}
        start = 0
        for name in FAMILIES:
            self.families[name] = slice(start, start + sizes[name])
            start += sizes[name]
        self.n_rows = start
        self.tight = np.zeros(self.n_rows)
        inv = self.families["invariance"]
        dom = np.zeros((v, f))
        dom[:, : self.f1] = 1.0
        self.tight[inv] = self.margin * dom.ravel()
        self.tight[self.families["state"]] = self.margin

        lo = np.full(self.n_var, -np.inf)
        hi = np.full(self.n_var, np.inf)
        lo[self.s_u] = np.tile(model.U.lo, v)
        hi[self.s_u] = np.tile(model.U.hi, v)
        lo[self.s_l] = 0.0
        lo[self.s_k] = 0.0
        if d_max is not None:
            hi[self.i_d] = d_max
        if fixed_z1 is not None:
            idx = np.arange(self.s_z.start, self.s_z.start + self.f1)
            lo[idx] = hi[idx] = np.asarray(fixed_z1, dtype=float)
        self.lo, self.hi = lo, hi
        self._pattern()
        nx = self.n_x
        rows = np.repeat(np.arange(v * nx), self.n)
        cols = np.repeat(self.s_z.start + self.active, nx, axis=0).ravel()
        self.vertex_map = sp.csr_matrix((self.P.reshape(-1), (rows, cols)),
                                        shape=(v * nx, self.n_var))
        Ec = self.E.tocoo()
        self.E_full = sp.csr_matrix((Ec.data, (Ec.row, Ec.col + self.s_z.start)),
                                    shape=(self.E.shape[0], self.n_var))

    # -- bookkeeping -------------------------------------------------------

    @property
    def variable_count(self):
        return self.n_var

    def constraint_count(self):
        """Row counts: the closed-form accounting and the expanded rows."""
        v, f, e = self.v, self.f, self.T.e
        n_U = 2 * self.n_u
        return {"formula": v * (3 + f + self.n_X + n_U) + e,
                "expanded": self.n_rows + e + v * n_U}

    def split(self, xi):
        return (xi[self.i_d], xi[self.s_u].reshape(self.v, self.n_u), xi[self.s_y],
                xi[self.s_z], xi[self.s_l], xi[self.s_k])

    def pack(self, d, u, y, z, lam, kap):
        return np.concatenate([[d], np.ravel(u), y, z, lam, kap]).astype(float)

    def objective_value(self, xi):
        return float(self.objective_grad() @ xi)

    def objective_grad(self):
        c = np.zeros(self.n_var)
        if self.objective in ("drift", "combined"):
            c[self.i_d] = 1.0
        if self.objective == "domain":
            c[self.s_z.start: self.s_z.start + self.f1] = -1.0
        elif self.objective == "combined":
            c[self.s_z.start: self.s_z.start + self.f1] = -self.omega
        return c

    def vertex_positions(self, z):
        return np.einsum("ikj,ij->ik", self.P, z[self.active])

    # -- residuals ---------------------------------------------------------

    def _evaluate(self, xi, jac):
        m = self.model
        d, u, y, z, lam, kap = self.split(xi)
        v, f, n, n_x, n_u = self.v, self.f, self.n, self.n_x, self.n_u
        za = z[self.active]
        x = np.einsum("ikj,ij->ik", self.P, za)
        hgt = np.einsum("ij,ij->i", self.srow, za)
        F = m.step(x, u)
        Lval = m.stage_cost(x, u)
        res = np.empty(self.n_rows)
        res[self.families["cost"]] = Lval + kap - d + y - hgt
        inv = F @ self.G.T + self.h[None, :] * y[:, None] + self.wbar[None, :] \
            + lam[:, None] * self.g[None, :] - z[None, :]
        res[self.families["invariance"]] = inv.ravel()
        pi, pj = self.pairs[:, 0], self.pairs[:, 1]
        D = np.hstack([x[pi] - x[pj], u[pi] - u[pj]])
        lv, lg = _norm_power(D, m.gamma, m.alpha)
        kv, kg = _norm_power(D, m.sigma, m.beta)
        res[self.families["lambda"]] = lv - lam[pi]
        res[self.families["kappa"]] = kv - kap[pi]
        if isinstance(m.X, BallSet):
            res[self.families["state"]] = np.sum(x * x, axis=1) - m.X.radius**2
        else:
            res[self.families["state"]] = m.X.residual(x).ravel()
        if not jac:
            return res, None

        Jx, Ju = m.step_jacobians(x, u)
        gLx, gLu = m.stage_cost_gradients(x, u)
        vals = []
        # cost rows
        vals.append(np.einsum("ik,ikj->ij", gLx, self.P) - self.srow)
        vals.append(gLu)
        vals.append(np.full(v, -1.0))
        vals.append(np.ones(v))
        vals.append(np.ones(v))
        # invariance rows
        GJx = np.einsum("jk,ikl->ijl", self.G, Jx)
        vals.append(np.einsum("ijl,ilc->ijc", GJx, self.P))
        vals.append(np.einsum("jk,ikl->ijl", self.G, Ju))
        vals.append(np.broadcast_to(self.h, (v, f)))
        vals.append(np.broadcast_to(self.g, (v, f)))
        vals.append(np.full((v, f), -1.0))
        # pair rows
        for grad in (lg, kg):
            gx, gu = grad[:, :n_x], grad[:, n_x:]
            vals.append(np.einsum("pk,pkc->pc", gx, self.P[pi]))
            vals.append(-np.einsum("pk,pkc->pc", gx, self.P[pj]))
            vals.append(gu)
            vals.append(-gu)
            vals.append(np.full(len(pi), -1.0))
        # state rows
        if isinstance(m.X, BallSet):
            vals.append(np.einsum("ik,ikc->ic", 2 * x, self.P))
        else:
            vals.append(np.einsum("rk,ikc->irc", m.X.A, self.P))
        data = np.concatenate([np.ravel(a) for a in vals])
        J = sp.csr_matrix((data, (self._rows, self._cols)), shape=(self.n_rows, self.n_var))
        return res, J

    def _pattern(self):
        v, f, n, n_u = self.v, self.f, self.n, self.n_u
        zi = self.s_z.start + self.active  # (v, n)
        ui = (self.s_u.start + np.arange(v * n_u)).reshape(v, n_u)
        yi = self.s_y.start + np.arange(v)
        li = self.s_l.start + np.arange(v)
        ki = self.s_k.start + np.arange(v)
        rows, cols = [], []

        def add(r, c):
            r, c = np.broadcast_arrays(r, c)
            rows.append(r.ravel())
            cols.append(c.ravel())

        rc = self.families["cost"].start + np.arange(v)
        add(rc[:, None], zi)
        add(rc[:, None], ui)
        add(rc, np.zeros(v, dtype=int))
        add(rc, yi)
        add(rc, ki)
        ri = (self.families["invariance"].start + np.arange(v * f)).reshape(v, f)
        add(ri[:, :, None], zi[:, None, :])
        add(ri[:, :, None], ui[:, None, :])
        add(ri, yi[:, None])
        add(ri, li[:, None])
        add(ri, self.s_z.start + np.arange(f)[None, :])
        pi, pj = self.pairs[:, 0], self.pairs[:, 1]
        for fam, var in (("lambda", li), ("kappa", ki)):
            rp = self.families[fam].start + np.arange(len(pi))
            add(rp[:, None], zi[pi])
            add(rp[:, None], zi[pj])
            add(rp[:, None], ui[pi])
            add(rp[:, None], ui[pj])
            add(rp, var[pi])
        rs = (self.families["state"].start + np.arange(v * self.n_X)).reshape(v, self.n_X)
        add(rs[:, :, None], zi[:, None, :])
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)

    def residuals(self, xi, tightened=False):
        """Residual vector of all nonlinear rows (``<= 0`` means satisfied)."""
        res, _ = self._evaluate(np.asarray(xi, dtype=float), jac=False)
        return res + self.tight if tightened else res

    def residuals_and_jacobian(self, xi, tightened=False):
        res, J = self._evaluate(np.asarray(xi, dtype=float), jac=True)
        return (res + self.tight if tightened else res), J

    def linear_residuals(self, xi):
        """``E z`` followed by the violation of the variable bounds."""
        z = xi[self.s_z]
        bound = np.maximum(self.lo - xi, xi - self.hi)
        return np.concatenate([self.E @ z, bound])

    def residual_report(self, xi):
        res = self.residuals(xi)
        out = {name: float(np.max(res[s], initial=-np.inf)) for name, s in self.families.items()}
        Ez = self.E @ xi[self.s_z]
        out["configuration"] = float(Ez.max()) if Ez.size else 0.0
        out["bounds"] = float(np.max(np.maximum(self.lo - xi, xi - self.hi)))
        out["max"] = max(0.0, max(out.values()))
        return out


# ---------------------------------------------------------------------------
# starting point


def _vertices_in_X(model, x, margin=0.0):
    return bool(np.all(model.X.residual(x) <= -margin))


def initial_guess(template, model, shrink=0.9, problem=None, method="quadratic",
                  control_weight=0.05, u_grid=41):
    """Starting point for the design program.

    ``method="reference"`` scales ``z_ref`` until every vertex lies in
    ``X`` (``shrink`` is halved while that fails) and starts all controls
    at the projection of 0 onto ``U``.

    ``method="quadratic"`` (default) targets a quadratic shape: with ``P``
    the Riccati solution of the linearization at the origin, the domain
    offsets are the support function of the ellipse ``x^T P x <= r`` that
    fits into ``shrink * X`` and the lower offsets are the tangent planes
    of ``c x^T P x`` with the template's fixed slopes, ``c`` chosen so that
    the steepest slope of the template is reached near the boundary. The
    target is projected onto ``E z <= 0`` in the ``l1`` norm. Every vertex
    control is the minimizer over a ``u_grid`` of ``U`` of
    ``M(f(x_i, u)) + control_weight * |u|^2 * scale`` (greedy one-step
    descent of the starting ``M``).

    In both cases ``y``, ``lambda``, ``kappa`` and ``d`` are set to their
    least feasible values.
    """
    prob = problem or SynthesisProblem(template, model)
    if method == "reference":
        z = _reference_offsets(template, model, shrink)
        u = np.tile(model.U.project(np.zeros(model.n_u)), (template.v, 1))
    elif method == "quadratic":
        z = _quadratic_offsets(template, model, shrink)
        u = _greedy_controls(template, model, z, control_weight, u_grid)
    else:
        raise ValueError(f"unknown initialization {method!r}")
    xi = prob.pack(0.0, u, np.zeros(template.v), z, np.zeros(template.v), np.zeros(template.v))
    return _polish(prob, xi, normalize=False)


def _fit_into_X(template, model, z):
    """Largest factor ``s <= 1`` with every vertex of ``s z`` inside ``X``."""
    x = template.vertex_positions(z)
    if isinstance(model.X, BallSet):
        r = np.max(np.linalg.norm(x, axis=1))
        return min(1.0, model.X.radius / r) if r > 0 else 1.0
    A, b = np.asarray(model.X.A), np.asarray(model.X.b)
    Ax = x @ A.T
    with np.errstate(divide="ignore"):
        ratios = np.where(Ax > 0, b[None, :] / Ax, np.inf)
    return float(min(1.0, ratios.min()))


def _reference_offsets(template, model, shrink):
    zr = template.z_ref
    fit = _fit_into_X(template, model, zr * 1e6) * 1e6
    if not np.isfinite(fit) or fit <= 0:
        raise SynthesisError("domain infeasible")
    s = float(shrink)
    while True:
        z = s * fit * zr
        if _vertices_in_X(model, template.vertex_positions(z), margin=1e-9):
            return z
        logger.info("vertices leave X at shrink %.4g; halving", s)
        s *= 0.5
        if s <= 1e-3:
            raise SynthesisError("domain infeasible")


def _quadratic_shape(model):
    """Riccati matrix of the linearization at the origin (identity on failure)."""
    n_x = model.n_x
    u0 = model.U.project(np.zeros(model.n_u))
    A, B = model.step_jacobians(np.zeros((1, n_x)), u0[None, :])
    try:
        P = sla.solve_discrete_are(A[0], B[0], np.eye(n_x), np.eye(model.n_u))
    except (np.linalg.LinAlgError, ValueError):
        P = np.eye(n_x)
    if not np.all(np.isfinite(P)) or np.linalg.eigvalsh(P).min() <= 0:
        P = np.eye(n_x)
    return 0.5 * (P + P.T) / np.linalg.eigvalsh(P).max()


def _quadratic_offsets(template, model, shrink):
    T = template
    P = _quadratic_shape(model)
    Pinv = np.linalg.inv(P)
    ev = np.linalg.eigvalsh(P)
    if isinstance(model.X, BallSet):
        r = (shrink * model.X.radius) ** 2 * ev[0]
    else:
        A, b = np.asarray(model.X.A), np.asarray(model.X.b)
        r = float(np.min((shrink * b) ** 2 / np.einsum("ij,jk,ik->i", A, Pinv, A)))
    slopes = -T.G2 / T.h2[:, None]
    c = 0.9 * np.linalg.norm(slopes, axis=1).max() / (2.0 * np.sqrt(r * ev[-1]))
    if c <= 0.0:
        c = 1.0  # all lower facets flat: every tangent offset is 0 for any c
    target = np.empty(T.f)
    target[: T.f1] = np.sqrt(r * np.einsum("ij,jk,ik->i", T.G1, Pinv, T.G1))
    target[T.f1:] = -T.h2 * np.einsum("ij,jk,ik->i", slopes, Pinv / c, slopes) / 4.0
    # l1 projection onto the configuration cone: min sum(t), -t <= z - target <= t
    f = T.f
    E = T.E.tocsr()
    I = sp.identity(f, format="csr")
    A_ub = sp.vstack([sp.hstack([E, sp.csr_matrix((E.shape[0], f))]),
                      sp.hstack([I, -I]), sp.hstack([-I, -I])]).tocsr()
    b_ub = np.concatenate([np.zeros(E.shape[0]), target, -target])
    lp = LinearProgram(c=np.concatenate([np.zeros(f), np.ones(f)]), A=A_ub, b=b_ub,
                       sense=np.full(A_ub.shape[0], "<"),
                       lo=np.concatenate([np.full(f, -np.inf), np.zeros(f)]),
                       hi=np.full(2 * f, np.inf))
    out = solve_lp(lp, method="highs")
    if out.status != "optimal":
        raise SynthesisError("domain infeasible")
    z = out.x[:f]
    z = z * _fit_into_X(T, model, z) * (1.0 - 1e-9)
    logger.info("quadratic start: l1 projection distance %.4g", float(np.abs(z - target).sum()))
    return z


def _greedy_controls(template, model, z, weight, u_grid):
    """Per-vertex greedy control for the starting ``M`` (see ``initial_guess``)."""
    T = template
    x = T.vertex_positions(z)
    axes = [np.linspace(lo, hi, u_grid) for lo, hi in zip(model.U.lo, model.U.hi)]
    cands = np.array(np.meshgrid(*axes, indexing="ij")).reshape(model.n_u, -1).T
    f1 = T.f1
    Mv = np.max((z[f1:] - x @ T.G2.T) / T.h2, axis=1)
    scale = float(Mv.max() - Mv.min()) or 1.0
    umax = float(np.max(np.abs(np.concatenate([model.U.lo, model.U.hi])))) or 1.0
    best = np.full(T.v, np.inf)
    u = np.zeros((T.v, model.n_u))
    for cand in cands:
        F = model.step(x, np.tile(cand, (T.v, 1)))
        M = np.max((z[f1:] - F @ T.G2.T) / T.h2, axis=1)
        leave = np.maximum(np.max(F @ T.G1.T - z[:f1], axis=1), 0.0)
        val = M + 100.0 * scale * leave + weight * scale * float(cand @ cand) / umax**2
        better = val < best
        best[better] = val[better]
        u[better] = cand
    return u


def _polish(prob, xi, normalize=True):
    """Set ``lambda``, ``kappa``, ``y`` and ``d`` to their least feasible values.

    With ``normalize`` the lower facets are shifted so that the minimum of
    ``M`` (attained at a vertex) is 0.
    """
    d, u, y, z, lam, kap = (np.array(a, copy=True) for a in prob.split(xi))
    m = prob.model
    x = prob.vertex_positions(z)
    pi, pj = prob.pairs[:, 0], prob.pairs[:, 1]
    D = np.hstack([x[pi] - x[pj], u[pi] - u[pj]])
    lv, _ = _norm_power(D, m.gamma, m.alpha)
    kv, _ = _norm_power(D, m.sigma, m.beta)
    lam = np.zeros(prob.v)
    kap = np.zeros(prob.v)
    np.maximum.at(lam, pi, lv)
    np.maximum.at(kap, pi, kv)
    F = m.step(x, u)
    low = slice(prob.f1, prob.f)
    need = (F @ prob.G[low].T + prob.wbar[low] + lam[:, None] * prob.g[low] - z[low]) / (-prob.h[low])
    y = need.max(axis=1)
    hgt = np.einsum("ij,ij->i", prob.srow, z[prob.active])
    if normalize:
        shift = float(hgt.min())
        z[low] = z[low] - shift * prob.h[low]
        y = y - shift
        hgt = hgt - shift
    d = float(np.max(m.stage_cost(x, u) + kap + y - hgt))
    if prob.hi[prob.i_d] < d:
        d = float(prob.hi[prob.i_d])
    return prob.pack(d, u, y, z, lam, kap)


# ---------------------------------------------------------------------------
# sequential linear programming


@dataclass
class SLPOptions:
    """Settings of :func:`solve_slp`.

    Radii are relative to ``scale``, the largest vertex coordinate or
    control magnitude of the starting point: the first trust radius is
    ``radius0_factor * scale`` (unless ``radius0`` is given) and growth stops
    at ``radius_cap_factor * scale``. Once the objective moves by less than
    ``restore_tol`` (relative) over ``stall_window`` accepted steps while the
    iterate is still infeasible, the objective is dropped and the remaining
    steps only reduce the violation. ``max_seconds`` triggers the same switch;
    the hard stop comes at twice that budget.
    """

    max_iter: int = 500
    tol_step: float = 1e-8
    tol_viol: float = 1e-6
    tol_pred: float = 1e-8
    penalty0: float = 10.0
    penalty_max: float = 1e8
    radius0: float | None = None
    radius0_factor: float = 0.01
    radius_cap_factor: float = 0.05
    radius_min: float = 1e-10
    radius_max: float = 1e3
    select_radius: float = 0.05
    z_box_factor: float = 20.0
    rows_per_vertex: int = 3
    correction: bool = True
    stall_window: int = 8
    stall_tol: float = 1e-7
    restore_tol: float = 1e-3
    lp_method: str = "highs-incremental"
    max_seconds: float | None = None

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _violation(res):
    return float(np.sum(np.maximum(res, 0.0)))


def _tr_bounds(prob, xi, radius, opts):
    """Box part of the trust region.

    Controls move by at most ``radius``; ``z`` gets a wide box (its effect on
    the vertices is limited by explicit rows); the variables entering every
    row linearly (``d``, ``y``, ``lambda``, ``kappa``) get ``radius_max``.
    """
    N = prob.n_var
    r = np.full(N, opts.radius_max)
    r[prob.s_u] = radius
    r[prob.s_z] = min(opts.z_box_factor * radius, opts.radius_max)
    lo = np.maximum(-r, prob.lo - xi)
    hi = np.minimum(r, prob.hi - xi)
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def step_measure(prob, p):
    """Trust-region norm: largest vertex displacement or control change."""
    dz = p[prob.s_z]
    dx = np.einsum("ikj,ij->ik", prob.P, dz[prob.active])
    du = p[prob.s_u]
    return max(float(np.abs(dx).max(initial=0.0)), float(np.abs(du).max(initial=0.0)))


def _generation_rows(prob, lin, missing, per_vertex):
    """Rows to add in a constraint-generation round.

    Invariance rows are added only for the ``per_vertex`` most violated
    facets of each vertex (a vertex typically needs one or two); the
    remaining families are small and added whole.
    """
    add = missing.copy()
    inv = prob.families["invariance"]
    block = np.where(missing[inv], lin[inv], -np.inf).reshape(prob.v, prob.f)
    if per_vertex < prob.f:
        top = np.argpartition(-block, per_vertex - 1, axis=1)[:, :per_vertex]
        keep = np.zeros_like(block, dtype=bool)
        np.put_along_axis(keep, top, True, axis=1)
        add[inv] = (keep & np.isfinite(block)).ravel()
    return add


def _lp_step(prob, xi, res, J, grad, mu, radius, opts):
    """Solve the penalized linearization; returns ``(step, linear_res, rows)``."""
    N = prob.n_var
    lo, hi = _tr_bounds(prob, xi, radius, opts)
    rownorm = np.asarray(abs(J).sum(axis=1)).ravel()
    sel = (res + rownorm * min(radius, opts.select_radius) > 0) | (res > 0)
    # facet rows: the most nearly active facets of every vertex, the rest
    # enter through constraint generation
    inv = prob.families["invariance"]
    sel[inv] = _generation_rows(prob, res, np.ones(prob.n_rows, dtype=bool),
                                opts.rows_per_vertex)[inv] | (res[inv] > -1e-3 * radius)
    Vm = prob.vertex_map
    hard = sp.vstack([prob.E_full, Vm, -Vm]).tocsr()
    hard_rhs = np.concatenate([-(prob.E @ xi[prob.s_z]), np.full(2 * Vm.shape[0], radius)])
    # rows violated at the iterate (all selected) carry one elastic column each
    viol = np.flatnonzero(res > 0)
    nv = len(viol)
    elastic = np.full(prob.n_rows, -1)
    elastic[viol] = np.arange(nv)
    c = np.concatenate([grad, mu * np.ones(nv)])
    lo_all = np.concatenate([lo, np.zeros(nv)])
    hi_all = np.concatenate([hi, np.full(nv, np.inf)])

    def block(rows):
        e = elastic[rows]
        k = np.flatnonzero(e >= 0)
        S = sp.csr_matrix((-np.ones(len(k)), (k, e[k])), shape=(len(rows), nv))
        return sp.hstack([J[rows], S]).tocsr(), -res[rows]

    incremental = opts.lp_method == "highs-incremental"
    if incremental:
        lp = IncrementalLP(c, lo_all, hi_all)
        lp.add_rows(sp.hstack([hard, sp.csr_matrix((hard.shape[0], nv))]), hard_rhs)
        lp.add_rows(*block(np.flatnonzero(sel)))
    for _ in range(500):
        if incremental:
            out = lp.solve()
        else:
            rows = np.flatnonzero(sel)
            Ab, bb = block(rows)
            A = sp.vstack([Ab, sp.hstack([hard, sp.csr_matrix((hard.shape[0], nv))])]).tocsr()
            out = solve_lp(LinearProgram(c=c, A=A, b=np.concatenate([bb, hard_rhs]),
                                         sense=np.full(A.shape[0], "<"), lo=lo_all, hi=hi_all),
                           method=opts.lp_method)
        if out.status != "optimal":
            raise SynthesisError("restoration failed")
        p = out.x[:N]
        lin = res + J @ p
        missing = (~sel) & (lin > 1e-9)
        if not missing.any():
            break
        new = _generation_rows(prob, lin, missing, opts.rows_per_vertex)
        if incremental:
            lp.add_rows(*block(np.flatnonzero(new)))
        sel |= new
    return p, lin, int(sel.sum())


def solve_slp(problem, start, options=None):
    """Trust-region SLP with an exact ``l1`` penalty on the nonlinear rows.

    Returns ``(xi, info)``. Rows that are satisfied at the iterate enter
    the subproblem as hard linearized constraints; violated rows get an
    elastic variable priced at the penalty weight. The merit function is
    ``rho + mu * sum(max(c, 0))``.

    Raises
    ------
    SynthesisError
        ``"no convergence"`` when the iteration cap is hit (``best`` holds
        the least-violated point seen) or ``"restoration failed"`` when the
        penalty reaches its cap without reducing the violation.
    """
    opts = options or SLPOptions()
    prob = problem
    xi = np.clip(np.asarray(start, dtype=float), prob.lo, prob.hi)
    if np.any(prob.E @ xi[prob.s_z] > 1e-7 * (1.0 + np.abs(xi[prob.s_z]).max())):
        raise SynthesisError("start violates the configuration constraints", best=xi)
    grad0 = grad = prob.objective_grad()
    mu = opts.penalty0
    scale = max(float(np.abs(prob.vertex_positions(xi[prob.s_z])).max()),
                float(np.abs(xi[prob.s_u]).max(initial=0.0)), 1e-3)
    radius_cap = opts.radius_cap_factor * scale
    if opts.radius0 is not None:
        radius = opts.radius0
    else:
        radius = opts.radius0_factor * scale
    radius = float(np.clip(radius, opts.radius_min, opts.radius_max))
    res, J = prob.residuals_and_jacobian(xi, tightened=True)
    viol = _violation(res)
    trace = []
    best = (viol, xi.copy())
    history = []
    t0 = time.perf_counter()
    status = "no convergence"
    restoring = False
    zero = np.zeros_like(grad)
    for it in range(opts.max_iter):
        elapsed = time.perf_counter() - t0
        if opts.max_seconds is not None and elapsed > opts.max_seconds:
            if viol <= opts.tol_viol:
                status = "converged"
                logger.info("slp time budget reached at a feasible point")
                break
            if elapsed > 2.0 * opts.max_seconds:
                status = "time limit"
                break
            if not restoring:
                restoring = True
                logger.info("slp time budget reached; restoring feasibility")
        grad = zero if restoring else grad0
        rho = float(grad @ xi)
        merit = rho + mu * viol
        p, lin, nsel = _lp_step(prob, xi, res, J, grad, mu, radius, opts)
        lin_viol = _violation(lin)
        # penalty steering: when the step barely reduces the linearized
        # violation, probe a ten times larger penalty and keep it only if it
        # buys a real reduction
        for _ in range(6):
            if not (viol > opts.tol_viol and lin_viol > 0.9 * viol and mu < opts.penalty_max):
                break
            mu_try = min(mu * 10.0, opts.penalty_max)
            p2, lin2, nsel2 = _lp_step(prob, xi, res, J, grad, mu_try, radius, opts)
            lin_viol2 = _violation(lin2)
            if lin_viol2 > 0.9 * lin_viol:
                break
            mu, p, lin, nsel, lin_viol = mu_try, p2, lin2, nsel2, lin_viol2
        merit = rho + mu * viol
        step = float(np.abs(p).max()) if p.size else 0.0
        tr_step = step_measure(prob, p)
        pred_obj = -float(grad @ p)
        pred = merit - (rho - pred_obj + mu * lin_viol)
        if viol <= opts.tol_viol and (step <= opts.tol_step or pred_obj <= opts.tol_pred):
            status = "converged"
            break
        if step <= opts.tol_step:
            status = "converged" if viol <= opts.tol_viol else "stalled"
            break
        if pred <= 1e-12 * (1.0 + abs(merit)):
            if viol <= opts.tol_viol:
                status = "converged"
                break
            if mu >= opts.penalty_max:
                raise SynthesisError("restoration failed", best=best[1], trace=trace)
            mu = min(mu * 10.0, opts.penalty_max)
            continue
        trial = xi + p
        try:
            if opts.correction:
                trial = _polish(prob, trial, normalize=False)
            res_t = prob.residuals(trial, tightened=True)
        except Exception:  # overflow in the dynamics: treat as a rejected step
            res_t = None
        if res_t is not None and np.all(np.isfinite(res_t)):
            viol_t = _violation(res_t)
            ared = merit - (float(grad @ trial) + mu * viol_t)
            ratio = ared / pred
        else:
            ratio = -np.inf
        accepted = ratio >= 1e-4
        trace.append({"iter": it, "merit": merit, "objective": float(grad0 @ xi), "violation": viol,
                      "radius": radius, "penalty": mu, "step": step, "tr_step": tr_step, "ratio": float(ratio),
                      "rows": nsel, "accepted": bool(accepted), "restoring": restoring})
        logger.debug("slp %3d obj %.6g viol %.3e step %.2e radius %.2e mu %.0e ratio %.3f rows %d%s",
                     it, float(grad0 @ xi), viol, step, radius, mu, ratio, nsel,
                     " (restoring)" if restoring else "")
        if accepted:
            xi = trial
            res, J = prob.residuals_and_jacobian(xi, tightened=True)
            viol = _violation(res)
            if viol < best[0] or (viol <= opts.tol_viol and float(grad0 @ xi) <= float(grad0 @ best[1])):
                best = (viol, xi.copy())
            history.append(float(grad0 @ xi))
            if restoring and viol <= opts.tol_viol:
                status = "converged"
                break
            if len(history) > opts.stall_window:
                progress = history[-opts.stall_window - 1] - history[-1]
                size = 1.0 + abs(history[-1])
                if viol <= opts.tol_viol and progress <= opts.stall_tol * size:
                    status = "converged"
                    break
                if not restoring and viol > opts.tol_viol and progress <= opts.restore_tol * size:
                    restoring = True
                    logger.info("slp objective stalled at %.6g; restoring feasibility (violation %.2e)",
                                history[-1], viol)
            if ratio > 0.5 and tr_step >= 0.99 * radius:
                radius = min(2.0 * radius, radius_cap)
            elif ratio < 0.25:
                radius = max(0.5 * tr_step, opts.radius_min)
        else:
            radius = max(0.25 * tr_step, opts.radius_min)
        if radius <= opts.radius_min:
            status = "converged" if viol <= opts.tol_viol else "stalled"
            break
    info = {"status": status, "iterations": len(trace), "penalty": mu, "radius": radius,
            "violation": viol, "objective": float(grad0 @ xi), "restored": restoring, "seconds": time.perf_counter() - t0,
            "trace": trace}
    logger.info("slp %s after %d iterations: objective %.6g violation %.2e (%.1fs)",
                status, len(trace), info["objective"], viol, info["seconds"])
    if status != "converged":
        raise SynthesisError("no convergence", best=best[1], trace=trace)
    return xi, info


# ---------------------------------------------------------------------------
# artifact


@dataclass
class CLFArtifact:
    """Solution of the design program together with its template and model."""

    template: Template
    model: object
    z: np.ndarray
    d: float
    u: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    kap: np.ndarray
    residuals: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    certified: bool = False

    @property
    def fingerprints(self):
        return {"template": self.template.fingerprint(), "model": self.model.fingerprint()}

    def vertex_positions(self):
        return self.template.vertex_positions(self.z)

    def point(self, problem):
        return problem.pack(self.d, self.u, self.y, self.z, self.lam, self.kap)

    def with_drift(self, d):
        """Copy with ``d`` replaced (used by perturbation probes)."""
        out = CLFArtifact(**{**self.__dict__})
        out.d = float(d)
        out.certified = False
        return out

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "package_version": __version__,
            "status": "CERTIFIED" if self.certified else "UNCERTIFIED",
            "d_star": self.d,
            "z_star": self.z.tolist(),
            "u_star": self.u.tolist(),
            "y_star": self.y.tolist(),
            "lambda_star": self.lam.tolist(),
            "kappa_star": self.kap.tolist(),
            "fingerprints": self.fingerprints,
            "residuals": self.residuals,
            "solver": self.solver,
            "template": self.template.to_dict(),
            "model": self.model.to_config(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data, model=None):
        if data.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported version {data.get('version')!r}")
        tmpl = Template.from_dict(data["template"])
        model = model or model_from_config(data["model"])
        art = cls(template=tmpl, model=model, z=np.array(data["z_star"], dtype=float),
                  d=float(data["d_star"]), u=np.array(data["u_star"], dtype=float).reshape(tmpl.v, -1),
                  y=np.array(data["y_star"], dtype=float), lam=np.array(data["lambda_star"], dtype=float),
                  kap=np.array(data["kappa_star"], dtype=float), residuals=data.get("residuals", {}),
                  solver=data.get("solver", {}), certified=data.get("status") == "CERTIFIED")
        if data.get("fingerprints") and data["fingerprints"] != art.fingerprints:
            raise ValueError("incompatible artifact")
        return art

    @classmethod
    def load(cls, path, model=None):
        return cls.from_dict(json.loads(Path(path).read_text()), model=model)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def make_artifact(problem, xi, solver_info=None, tol=1e-6):
    """Polish ``xi``, evaluate residuals and wrap the result."""
    xi = _polish(problem, xi, normalize=True)
    report = problem.residual_report(xi)
    d, u, y, z, lam, kap = problem.split(xi)
    info = dict(solver_info or {})
    info.pop("seconds", None)
    trace = info.pop("trace", None)
    if trace is not None:
        info["trace_tail"] = trace[-5:]
    certified = report["max"] <= tol and report["configuration"] <= 1e-8
    return CLFArtifact(template=problem.T, model=problem.model, z=z.copy(), d=float(d),
                       u=u.copy(), y=y.copy(), lam=lam.copy(), kap=kap.copy(),
                       residuals=report, solver=info, certified=bool(certified))


def default_d_max(model):
    return 10.0 * model.max_stage_cost()


def _run(prob, x0, opts):
    try:
        return solve_slp(prob, x0, opts)
    except SynthesisError as exc:
        exc.problem = prob
        raise


def two_stage_solve(template, model, omega=None, options=None, shrink=0.9, stage="both",
                    start=None, init="quadratic", control_weight=0.1):
    """Domain maximization followed by drift minimization on the fixed domain.

    With ``omega`` a single combined run ``rho = d - omega * sum(z_1)``
    replaces both stages. ``stage`` may be ``1`` or ``2`` to stop after, or
    start from, the given stage (``start`` then supplies the stage-1 point).
    Returns the final ``CLFArtifact``; ``artifact.solver["stages"]`` records
    each stage's summary. A ``SynthesisError`` carries the failing problem
    as ``exc.problem`` next to the best point ``exc.best``.
    """
    opts = options or SLPOptions()
    d_max = default_d_max(model)
    stages = []

    def first_point(prob):
        if start is not None:
            return np.asarray(start, dtype=float)
        return initial_guess(template, model, shrink, prob, method=init,
                             control_weight=control_weight)

    if omega is not None:
        prob = SynthesisProblem(template, model, objective="combined", omega=omega, d_max=d_max)
        xi, info = _run(prob, first_point(prob), opts)
        stages.append(_stage_summary("combined", info))
        return make_artifact(prob, xi, {**info, "stages": stages})
    stage = str(stage)
    if stage in ("1", "both"):
        prob1 = SynthesisProblem(template, model, objective="domain", d_max=d_max)
        xi, info = _run(prob1, first_point(prob1), opts)
        xi = _polish(prob1, xi, normalize=True)
        stages.append(_stage_summary("domain", info))
        if stage == "1":
            return make_artifact(prob1, xi, {**info, "stages": stages})
    elif stage == "2":
        if start is None:
            raise ValueError("stage 2 needs a stage-1 starting point")
        xi = np.asarray(start, dtype=float)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    prob0 = SynthesisProblem(template, model)
    z1 = xi[prob0.s_z][: template.f1].copy()
    prob2 = SynthesisProblem(template, model, objective="drift", fixed_z1=z1)
    xi2, info2 = _run(prob2, xi, opts)
    stages.append(_stage_summary("drift", info2))
    return make_artifact(prob2, xi2, {**info2, "stages": stages})


def _stage_summary(name, info):
    return {"stage": name, "status": info["status"], "iterations": info["iterations"],
            "objective": info["objective"], "violation": info["violation"]}
