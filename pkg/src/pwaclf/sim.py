"""Closed-loop simulation under the explicit feedback law.

Rollouts are advanced in lock-step as a batch. A rollout that leaves the
domain of ``M`` is truncated at that step and flagged; it is never continued.
Randomness comes from a counter-based Philox generator seeded by the user.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .policy import PolicyError

logger = logging.getLogger(__name__)

MODES = ("vertex-random", "box-uniform", "greedy-adversarial")
MEMBERSHIP_TOL = 1e-7


def make_rng(seed):
    """Philox-based generator (64-bit counter RNG) for reproducible runs."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class Trajectory:
    """One closed-loop trajectory of length ``K`` (``K + 1`` states)."""

    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    cost: np.ndarray
    M: np.ndarray
    region: np.ndarray
    violation: bool = False
    violation_step: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def length(self):
        return len(self.u)

    @property
    def average_cost(self):
        return float(self.cost.mean()) if len(self.cost) else 0.0

    def write_csv(self, path, header_comment=None):
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            wr = csv.writer(fh)
            n_x, n_u = self.x.shape[1], self.u.shape[1] if self.u.ndim == 2 else 1
            wr.writerow(["k"] + [f"x{i + 1}" for i in range(n_x)]
                        + (["u"] if n_u == 1 else [f"u{i + 1}" for i in range(n_u)])
                        + [f"w{i + 1}" for i in range(n_x)] + ["L", "M", "region"])
            for k in range(len(self.x)):
                if k < self.length:
                    row = [k, *self.x[k], *self.u[k], *self.w[k], self.cost[k], self.M[k],
                           int(self.region[k])]
                else:
                    row = [k, *self.x[k]] + [""] * (n_u + n_x + 1) + [self.M[k], int(self.region[k])]
                wr.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _disturbances(model, policy, F, mode, rng):
    """Disturbance for each row of the nominal successor states ``F``."""
    W = model.W
    n = len(F)
    if mode == "vertex-random":
        verts = W.vertices()
        return verts[rng.integers(0, len(verts), size=n)]
    if mode == "box-uniform":
        return rng.uniform(W.lo, W.hi, size=(n, len(W.lo)))
    if mode == "greedy-adversarial":
        verts = W.vertices()
        vals = np.stack([policy.M(F + w) for w in verts], axis=1)
        return verts[np.argmax(vals, axis=1)]
    raise ValueError(f"unknown disturbance mode {mode!r}")


def batch_rollout(model, policy, starts, horizon, mode="vertex-random", seed=0):
    """Simulate all ``starts`` for ``horizon`` steps.

    Returns ``(summary, trajectories)``. The summary aggregates the average
    costs and violation counts; an empty start list yields an empty summary.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, model.n_x)
    B = len(starts)
    if B == 0:
        return {"rollouts": 0, "violations": 0, "mode": mode, "horizon": int(horizon)}, []
    if not np.all(policy.in_domain(starts, tol=MEMBERSHIP_TOL)):
        raise PolicyError("out of domain")
    rng = make_rng(seed)
    K = int(horizon)
    n_x, n_u = model.n_x, model.n_u
    X = np.full((B, K + 1, n_x), np.nan)
    U = np.full((B, K, n_u), np.nan)
    Wd = np.full((B, K, n_x), np.nan)
    Lc = np.full((B, K), np.nan)
    Mv = np.full((B, K + 1), np.nan)
    R = np.full((B, K + 1), -1, dtype=np.intp)
    alive = np.ones(B, dtype=bool)
    stop = np.full(B, K)
    viol_step = np.full(B, -1)
    X[:, 0] = starts
    for k in range(K + 1):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        x = X[idx, k]
        R[idx, k] = policy.locate_regions(x)
        Mv[idx, k] = policy.M(x)
        if k == K:
            break
        u = policy.feedback_batch(x)
        F = model.step(x, u)
        w = _disturbances(model, policy, F, mode, rng)
        xn = F + w
        U[idx, k] = u
        Wd[idx, k] = w
        Lc[idx, k] = model.stage_cost(x, u)
        X[idx, k + 1] = xn
        bad = ~(policy.in_domain(xn, tol=MEMBERSHIP_TOL) & model.X.contains(xn, tol=MEMBERSHIP_TOL))
        if bad.any():
            b = idx[bad]
            R[b, k + 1] = -1
            Mv[b, k + 1] = policy.M(xn[bad])
            alive[b] = False
            stop[b] = k + 1
            viol_step[b] = k + 1
    trajs = []
    for b in range(B):
        s = stop[b]
        trajs.append(Trajectory(x=X[b, : s + 1], u=U[b, :s], w=Wd[b, :s], cost=Lc[b, :s],
                                M=Mv[b, : s + 1], region=R[b, : s + 1],
                                violation=bool(viol_step[b] >= 0),
                                violation_step=int(viol_step[b]) if viol_step[b] >= 0 else None,
                                meta={"mode": mode, "seed": int(seed), "index": b}))
    avg = np.array([t.average_cost for t in trajs])
    summary = {
        "rollouts": B, "horizon": K, "mode": mode, "seed": int(seed),
        "violations": int(sum(t.violation for t in trajs)),
        "average_cost_max": float(avg.max()), "average_cost_mean": float(avg.mean()),
        "control_in_U": bool(np.all(model.U.contains(U[~np.isnan(U[..., 0])]))),
    }
    logger.info("batch rollout %s: %d rollouts, %d violations, max average cost %.4g",
                mode, B, summary["violations"], summary["average_cost_max"])
    return summary, trajs


def rollout(model, policy, x0, horizon, disturbance_mode="vertex-random", seed=0):
    """Single closed-loop trajectory from ``x0`` (must lie in the domain)."""
    _, trajs = batch_rollout(model, policy, np.asarray(x0, dtype=float)[None, :], horizon,
                             disturbance_mode, seed)
    return trajs[0]
