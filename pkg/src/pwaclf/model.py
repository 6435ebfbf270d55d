"""Discrete-time system models ``x+ = f(x, u) + w`` with stage cost and sets.

All evaluation routines are batched: ``x`` has shape ``(..., n_x)`` and ``u``
shape ``(..., n_u)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sets


@dataclass(frozen=True)
class BallSet:
    """``{x : x^T x <= radius^2}``; counted as a single constraint."""

    radius: float

    n_constraints = 1

    def residual(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(x**2, axis=-1, keepdims=True) - self.radius**2

    def contains(self, x, tol=1e-9):
        return np.all(self.residual(x) <= tol * max(1.0, self.radius**2), axis=-1)

    def bounding_box(self, n):
        return -self.radius * np.ones(n), self.radius * np.ones(n)

    def to_config(self):
        return {"ball": self.radius}


@dataclass(frozen=True, eq=False)
class PolytopeSet:
    """``{x : A x <= b}``."""

    A: np.ndarray
    b: np.ndarray

    @property
    def n_constraints(self):
        return len(self.b)

    def residual(self, x):
        return np.asarray(x, dtype=float) @ np.asarray(self.A).T - np.asarray(self.b)

    def contains(self, x, tol=1e-9):
        return np.all(self.residual(x) <= tol, axis=-1)

    def bounding_box(self, n):
        from .lp import LinearProgram, solve_lp

        lo, hi = np.zeros(n), np.zeros(n)
        for k in range(n):
            for sign, out in ((1.0, lo), (-1.0, hi)):
                c = np.zeros(n)
                c[k] = sign
                res = solve_lp(LinearProgram.from_inequalities(c, self.A, self.b, lo=-np.inf))
                if res.status != "optimal":
                    raise ModelError("state set is unbounded")
                out[k] = res.x[k]
        return lo, hi

    def to_config(self):
        return {"A": np.asarray(self.A).tolist(), "b": np.asarray(self.b).tolist()}


@dataclass(frozen=True, eq=False)
class BoxSet:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n_constraints(self):
        return 2 * len(self.lo)

    def vertices(self):
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def residual(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x - self.hi, self.lo - x], axis=-1)

    def project(self, x):
        return np.clip(x, self.lo, self.hi)

    def bounding_box(self, n):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def to_config(self):
        return {"lo": np.asarray(self.lo).tolist(), "hi": np.asarray(self.hi).tolist()}


def box(lo, hi):
    return BoxSet(np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float)))


def _set_from_config(cfg, kind):
    if "ball" in cfg:
        return BallSet(float(cfg["ball"]))
    if "lo" in cfg:
        return box(cfg["lo"], cfg["hi"])
    if "A" in cfg:
        if kind == "W":
            raise ModelError("disturbance set must be a box")
        return PolytopeSet(np.array(cfg["A"], dtype=float), np.array(cfg["b"], dtype=float))
    raise ModelError(f"cannot parse set {cfg!r}")


# ---------------------------------------------------------------------------
# dynamics


class PolynomialField:
    """Polynomial vector field with analytic Jacobians.

    ``terms[k]`` lists ``(coefficient, exponents)`` pairs of the ``k``-th
    component, exponents ranging over the stacked vector ``(x, u)``.
    """

    def __init__(self, n_x, n_u, terms):
        self.n_x = n_x
        self.n_u = n_u
        if len(terms) != n_x:
            raise ModelError("one term list per state component required")
        self.terms = [[(float(c), tuple(int(e) for e in ex)) for c, ex in comp] for comp in terms]
        for comp in self.terms:
            for _, ex in comp:
                if len(ex) != n_x + n_u or min(ex) < 0:
                    raise ModelError("bad monomial exponents")
                if sum(ex) > 3:
                    raise ModelError("polynomial fields are limited to degree 3")

    def __call__(self, x, u):
        p = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
        out = np.zeros(p.shape[:-1] + (self.n_x,))
        for k, comp in enumerate(self.terms):
            for c, ex in comp:
                out[..., k] += c * np.prod(p ** np.array(ex), axis=-1)
        return out

    def jacobian(self, x, u):
        p = np.concatenate([np.asarray(x, float), np.asarray(u, float)], axis=-1)
        m = self.n_x + self.n_u
        J = np.zeros(p.shape[:-1] + (self.n_x, m))
        for k, comp in enumerate(self.terms):
            for c, ex in comp:
                ex = np.array(ex)
                for a in range(m):
                    if ex[a] == 0:
                        continue
                    e2 = ex.copy()
                    e2[a] -= 1
                    J[..., k, a] += c * ex[a] * np.prod(p**e2, axis=-1)
        return J[..., : self.n_x], J[..., self.n_x:]

    def to_config(self):
        return [[[c, list(ex)] for c, ex in comp] for comp in self.terms]


def vanderpol_field():
    """``x1' = x2``, ``x2' = -x1 - x2 (1 - x1^2) / 2 + x1 u``."""
    return PolynomialField(2, 1, [
        [(1.0, (0, 1, 0))],
        [(-1.0, (1, 0, 0)), (-0.5, (0, 1, 0)), (0.5, (2, 1, 0)), (1.0, (1, 0, 1))],
    ])


def rk4_step(vector_field, x, u, tau):
    """One classical Runge-Kutta step with ``u`` held constant."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="raise", invalid="raise"):
        try:
            k1 = vector_field(x, u)
            k2 = vector_field(x + 0.5 * tau * k1, u)
            k3 = vector_field(x + 0.5 * tau * k2, u)
            k4 = vector_field(x + tau * k3, u)
            out = x + tau / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except FloatingPointError as exc:
            raise ModelError("dynamics overflow") from exc
    if not np.all(np.isfinite(out)):
        raise ModelError("dynamics overflow")
    return out


class RK4Dynamics:
    """Sampled continuous-time field; Jacobians by differentiating the stages."""

    affine = False

    def __init__(self, field, tau):
        self.field = field
        self.tau = float(tau)
        self.n_x = field.n_x
        self.n_u = field.n_u

    def step(self, x, u):
        return rk4_step(self.field, x, u, self.tau)

    def jacobians(self, x, u):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        h = self.tau
        eye = np.broadcast_to(np.eye(self.n_x), x.shape[:-1] + (self.n_x, self.n_x))
        k1 = self.field(x, u)
        A1, B1 = self.field.jacobian(x, u)
        x2 = x + 0.5 * h * k1
        k2 = self.field(x2, u)
        A2, B2 = self.field.jacobian(x2, u)
        dk2x = A2 @ (eye + 0.5 * h * A1)
        dk2u = A2 @ (0.5 * h * B1) + B2
        x3 = x + 0.5 * h * k2
        k3 = self.field(x3, u)
        A3, B3 = self.field.jacobian(x3, u)
        dk3x = A3 @ (eye + 0.5 * h * dk2x)
        dk3u = A3 @ (0.5 * h * dk2u) + B3
        x4 = x + h * k3
        A4, B4 = self.field.jacobian(x4, u)
        dk4x = A4 @ (eye + h * dk3x)
        dk4u = A4 @ (h * dk3u) + B4
        Jx = eye + h / 6.0 * (A1 + 2 * dk2x + 2 * dk3x + dk4x)
        Ju = h / 6.0 * (B1 + 2 * dk2u + 2 * dk3u + dk4u)
        return Jx, Ju

    def to_config(self):
        return {"type": "polynomial", "rk4_tau": self.tau, "terms": self.field.to_config()}


class AffineDynamics:
    """``x+ = A x + B u + c``."""

    affine = True

    def __init__(self, A, B, c=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=float)
        self.n_x, self.n_u = self.B.shape

    def step(self, x, u):
        return np.asarray(x, float) @ self.A.T + np.asarray(u, float) @ self.B.T + self.c

    def jacobians(self, x, u):
        shape = np.shape(x)[:-1]
        return (np.broadcast_to(self.A, shape + self.A.shape).copy(),
                np.broadcast_to(self.B, shape + self.B.shape).copy())

    def to_config(self):
        return {"type": "affine", "A": self.A.tolist(), "B": self.B.tolist(), "c": self.c.tolist()}


class CallableDynamics:
    """Arbitrary map; Jacobians by central differences with step ``1e-6 (1 + |x|)``."""

    affine = False

    def __init__(self, fun, n_x, n_u):
        self.fun = fun
        self.n_x = n_x
        self.n_u = n_u

    def step(self, x, u):
        return self.fun(np.asarray(x, float), np.asarray(u, float))

    def jacobians(self, x, u):
        return _fd_jacobians(self.fun, np.asarray(x, float), np.asarray(u, float), self.n_x)

    def to_config(self):
        raise ModelError("callable dynamics cannot be serialized")


def _fd_jacobians(fun, x, u, n_out):
    def partials(arg, which):
        out = np.zeros(arg.shape[:-1] + (n_out, arg.shape[-1]))
        for a in range(arg.shape[-1]):
            h = 1e-6 * (1.0 + np.abs(arg[..., a]))
            dp = arg.copy()
            dm = arg.copy()
            dp[..., a] += h
            dm[..., a] -= h
            if which == 0:
                fp, fm = fun(dp, u), fun(dm, u)
            else:
                fp, fm = fun(x, dp), fun(x, dm)
            out[..., :, a] = (np.reshape(fp, out.shape[:-1]) - np.reshape(fm, out.shape[:-1])) / (2 * h[..., None])
        return out

    return partials(x, 0), partials(u, 1)


# ---------------------------------------------------------------------------
# stage costs


class QuadraticCost:
    """``L(x, u) = x^T Q x + u^T R u``."""

    def __init__(self, Q, R):
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))

    @property
    def convex(self):
        return bool(np.linalg.eigvalsh(self.Q).min() >= -1e-14 and np.linalg.eigvalsh(self.R).min() >= -1e-14)

    @property
    def is_zero(self):
        return not self.Q.any() and not self.R.any()

    def __call__(self, x, u):
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + np.einsum("...i,ij,...j->...", u, self.R, u)

    def gradients(self, x, u):
        return np.asarray(x, float) @ (self.Q + self.Q.T), np.asarray(u, float) @ (self.R + self.R.T)

    def to_config(self):
        return {"Q": self.Q.tolist(), "R": self.R.tolist()}


class CallableCost:
    def __init__(self, fun, convex=False):
        self.fun = fun
        self.convex = convex
        self.is_zero = False

    def __call__(self, x, u):
        return self.fun(np.asarray(x, float), np.asarray(u, float))

    def gradients(self, x, u):
        gx, gu = _fd_jacobians(lambda a, b: self.fun(a, b)[..., None], np.asarray(x, float),
                               np.asarray(u, float), 1)
        return gx[..., 0, :], gu[..., 0, :]

    def to_config(self):
        raise ModelError("callable costs cannot be serialized")


# ---------------------------------------------------------------------------
# the model


@dataclass(eq=False)
class SystemModel:
    """Dynamics, stage cost, sets and the nonlinearity constants.

    ``gamma``/``alpha`` bound the interpolation error of ``f`` on simplices,
    ``sigma``/``beta`` the non-convexity of ``L``. Zero constants are accepted
    only when ``f`` is affine (for ``gamma``) or ``L`` convex (for ``sigma``).
    """

    dynamics: object
    cost: object
    X: object
    U: BoxSet
    W: BoxSet
    gamma: float
    alpha: float
    sigma: float
    beta: float
    tau: float = 1.0
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma < 0 or self.alpha < 0 or self.sigma < 0 or self.beta < 1:
            raise ModelError("invalid nonlinearity constants")
        if self.gamma == 0 and not getattr(self.dynamics, "affine", False):
            raise ModelError("gamma = 0 requires affine dynamics")
        if self.sigma == 0 and not getattr(self.cost, "convex", False):
            raise ModelError("sigma = 0 requires a convex stage cost")
        if not self.W.contains(np.zeros(self.n_x)):
            raise ModelError("disturbance set must contain the origin")

    @property
    def n_x(self):
        return self.dynamics.n_x

    @property
    def n_u(self):
        return self.dynamics.n_u

    def step(self, x, u):
        return self.dynamics.step(x, u)

    def step_jacobians(self, x, u):
        return self.dynamics.jacobians(x, u)

    def stage_cost(self, x, u):
        return self.cost(x, u)

    def stage_cost_gradients(self, x, u):
        return self.cost.gradients(x, u)

    def state_box(self):
        return self.X.bounding_box(self.n_x)

    def max_stage_cost(self, n_samples=4096, seed=0):
        x, u = sample_state_control(self, n_samples, seed=seed)
        return float(np.max(self.stage_cost(x, u)))

    def to_config(self):
        if self.name == "vanderpol" and not self.meta.get("overrides"):
            return {"preset": "vanderpol"}
        return {
            "name": self.name,
            "dynamics": self.dynamics.to_config(),
            "cost": self.cost.to_config(),
            "X": self.X.to_config(),
            "U": self.U.to_config(),
            "W": self.W.to_config(),
            "gamma": self.gamma, "alpha": self.alpha, "sigma": self.sigma, "beta": self.beta,
            "tau": self.tau,
            "declarations": {"f_affine": bool(getattr(self.dynamics, "affine", False)),
                             "L_convex": bool(getattr(self.cost, "convex", False))},
        }

    def fingerprint(self):
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def vdp_preset():
    """Van der Pol oscillator sampled by RK4 with ``tau = 0.05``."""
    tau = 0.05
    return SystemModel(
        dynamics=RK4Dynamics(vanderpol_field(), tau),
        cost=QuadraticCost(np.diag([0.0, tau / 2]), [[tau / 2]]),
        X=BallSet(3.0),
        U=box([-2.0], [2.0]),
        W=box([-0.005, -0.005], [0.005, 0.005]),
        gamma=0.05, alpha=2.0, sigma=0.0, beta=2.0, tau=tau, name="vanderpol",
    )


def affine_demo(W_radius=0.002, cost_weight=0.0):
    """Sampled double integrator on the box ``[-1, 1]^2`` with ``|u| <= 1``."""
    A = [[1.0, 0.1], [0.0, 1.0]]
    B = [[0.005], [0.1]]
    Xa = np.vstack([np.eye(2), -np.eye(2)])
    return SystemModel(
        dynamics=AffineDynamics(A, B),
        cost=QuadraticCost(cost_weight * np.eye(2), cost_weight * np.eye(1)),
        X=PolytopeSet(Xa, np.ones(4)),
        U=box([-1.0], [1.0]),
        W=box([-W_radius] * 2, [W_radius] * 2),
        gamma=0.0, alpha=2.0, sigma=0.0, beta=2.0, tau=0.1, name="affine-demo",
    )


PRESETS = {"vanderpol": vdp_preset, "affine": affine_demo}


def model_from_config(cfg):
    """Build a model from a JSON-style dict (preset name or explicit fields)."""
    cfg = dict(cfg)
    if "preset" in cfg:
        name = cfg.pop("preset")
        if name not in PRESETS:
            raise ModelError(f"unknown preset {name!r}")
        model = PRESETS[name]()
        if cfg:
            for key in ("gamma", "alpha", "sigma", "beta"):
                if key in cfg:
                    setattr(model, key, float(cfg[key]))
            model.meta["overrides"] = cfg
            model.__post_init__()
        return model
    dyn = cfg["dynamics"]
    if dyn["type"] == "affine":
        dynamics = AffineDynamics(dyn["A"], dyn["B"], dyn.get("c"))
    elif dyn["type"] == "polynomial":
        terms = dyn["terms"]
        n_x = len(terms)
        n_u = len(terms[0][0][1]) - n_x
        dynamics = RK4Dynamics(PolynomialField(n_x, n_u, terms), dyn["rk4_tau"])
    else:
        raise ModelError(f"unknown dynamics type {dyn['type']!r}")
    cost = QuadraticCost(cfg["cost"]["Q"], cfg["cost"]["R"])
    decl = cfg.get("declarations", {})
    if decl.get("f_affine") and not dynamics.affine:
        raise ModelError("declared affine dynamics are not affine")
    return SystemModel(
        dynamics=dynamics, cost=cost,
        X=_set_from_config(cfg["X"], "X"), U=_set_from_config(cfg["U"], "U"),
        W=_set_from_config(cfg["W"], "W"),
        gamma=float(cfg["gamma"]), alpha=float(cfg["alpha"]),
        sigma=float(cfg["sigma"]), beta=float(cfg["beta"]),
        tau=float(cfg.get("tau", 1.0)), name=cfg.get("name", "custom"),
    )


# ---------------------------------------------------------------------------
# constants


def row_gain(G):
    """``g_j = max_{|n|_inf <= 1} G_j n``, i.e. the 1-norm of each row."""
    return np.abs(np.atleast_2d(G)).sum(axis=1)


def support_W(G, W):
    """``wbar_j = max_{w in W} G_j w`` for a box ``W``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return np.sum(np.maximum(G * W.lo, G * W.hi), axis=1)


def sample_state_control(model, n, seed=0):
    """Halton points on ``X x U`` (rejection from the bounding box)."""
    xlo, xhi = model.state_box()
    lo = np.concatenate([xlo, model.U.lo])
    hi = np.concatenate([xhi, model.U.hi])
    sampler = qmc.Halton(d=len(lo), scramble=False)
    pts = np.zeros((0, len(lo)))
    while len(pts) < n:
        cand = qmc.scale(sampler.random(2 * n), lo, hi)
        keep = model.X.contains(cand[:, : model.n_x]) & model.U.contains(cand[:, model.n_x:])
        pts = np.vstack([pts, cand[keep]])
    pts = pts[:n]
    return pts[:, : model.n_x], pts[:, model.n_x:]


def _hessians(fun, p, n_x, h=1e-4):
    """Central second differences of ``fun`` (vector-valued) at points ``p``."""
    m = p.shape[1]
    out = None
    for a in range(m):
        for b in range(a, m):
            ea = np.zeros(m)
            eb = np.zeros(m)
            ea[a] = h
            eb[b] = h
            val = (fun(p + ea + eb) - fun(p + ea - eb) - fun(p - ea + eb) + fun(p - ea - eb)) / (4 * h * h)
            if out is None:
                out = np.zeros(val.shape + (m, m))
            out[..., a, b] = val
            out[..., b, a] = val
    return out


def estimate_nonlinearity(model, n_samples=10_000, seed=0):
    """Sampled estimates of the constants in the interpolation bounds.

    For a twice differentiable map the interpolation error on a simplex with
    vertices ``p_i`` and weights ``theta`` is
    ``0.5 * sum_i theta_i (p_i - pbar)^T H (p_i - pbar)``, and
    ``sum_i theta_i |p_i - pbar|^2 <= 0.5 max_ij |p_i - p_j|^2``. Hence
    ``gamma_hat = max |H| / 4`` over the samples and components (spectral
    norm), and ``sigma_hat = max(-lambda_min(H_L), 0) / 4``.
    """
    x, u = sample_state_control(model, n_samples, seed=seed)
    p = np.hstack([x, u])
    n_x = model.n_x

    def f(q):
        return model.step(q[:, :n_x], q[:, n_x:])

    def L(q):
        return model.stage_cost(q[:, :n_x], q[:, n_x:])

    Hf = _hessians(f, p, n_x)  # (N, n_x, m, m)
    gamma_hat = 0.25 * float(np.max(np.linalg.norm(Hf, ord=2, axis=(-2, -1))))
    HL = _hessians(L, p, n_x)  # (N, m, m)
    lam_min = np.linalg.eigvalsh(HL).min(axis=-1)
    sigma_hat = 0.25 * float(max(0.0, -lam_min.min()))
    if sigma_hat < 1e-6:
        sigma_hat = 0.0
    if gamma_hat < 1e-8:
        gamma_hat = 0.0
    return gamma_hat, sigma_hat
