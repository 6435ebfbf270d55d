"""Independent certification of synthesized CLF artifacts.

Nothing here reads the solver's auxiliary variables (``y``, ``lambda``,
``kappa``): every quantity is recomputed from the template, the parameter
``z``, the vertex controls and the model.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import BallSet
from .policy import DOMAIN_TOL, Policy, eval_M_raw
from .sim import batch_rollout

logger = logging.getLogger(__name__)

SURROGATE = 1e9
SLACK_TOL = 1e-6


def _box_vertices(lo, hi):
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def _M_of(artifact):
    T, z = artifact.template, np.asarray(artifact.z, dtype=float)
    return lambda x, tol=DOMAIN_TOL: eval_M_raw(T.G1, T.G2, T.h2, z, x, tol)


def _indicator_X(model, x, tol=1e-9):
    return np.where(model.X.contains(x, tol=tol), 0.0, np.inf)


# ---------------------------------------------------------------------------
# vertex conditions


def check_vertex_conditions(artifact, d=None):
    """Slack of the per-vertex sufficient condition at every template vertex.

    For vertex ``i`` with position ``v_i`` and control ``u_i`` the slack is
    ``M(v_i) + d - L(v_i, u_i) - kappa_i - I_X(v_i) - max_{delta in D_i} M(f(v_i, u_i) + delta)``
    where ``kappa_i`` and the half-width ``lambda_i`` of the box
    ``D_i = W + [-lambda_i, lambda_i]^n`` are recomputed from the constants
    of the model. The maximum over ``D_i`` is attained at a box vertex since
    ``M`` is convex.

    The two indicator terms are measured instead of being set to infinity:
    the dissipation part uses the affine extension of ``M`` beyond its
    domain, and the domain part is the distance by which the worst successor
    leaves ``{G1 x <= z1}`` (or the vertex leaves ``X``). The reported slack
    is the smaller of the two, so a successor outside the domain by ``1e-7``
    shows up as a slack of about ``-1e-7`` rather than ``-inf``.
    """
    model = artifact.model
    T = artifact.template
    d = artifact.d if d is None else float(d)
    z = np.asarray(artifact.z, dtype=float)
    M = _M_of(artifact)
    x = T.vertex_positions(z)
    u = np.asarray(artifact.u, dtype=float).reshape(T.v, -1)
    lam = np.zeros(T.v)
    kap = np.zeros(T.v)
    for i, nb in enumerate(T.adjacency):
        if len(nb) == 0:
            continue
        dist = np.sqrt(np.sum((x[nb] - x[i]) ** 2, axis=1) + np.sum((u[nb] - u[i]) ** 2, axis=1))
        lam[i] = model.gamma * np.max(dist ** model.alpha) if model.gamma else 0.0
        kap[i] = model.sigma * np.max(dist ** model.beta) if model.sigma else 0.0
    F = model.step(x, u)
    Lv = model.stage_cost(x, u)
    worst = np.full(T.v, -np.inf)
    leave = np.full(T.v, -np.inf)
    signs = _box_vertices(-np.ones(T.n_x), np.ones(T.n_x))
    for s in signs:
        # vertex of W + [-lam, lam]^n in orthant s
        delta = np.where(s > 0, model.W.hi, model.W.lo)[None, :] + lam[:, None] * s[None, :]
        y = F + delta
        worst = np.maximum(worst, M(y, np.inf))
        leave = np.maximum(leave, np.max(y @ T.G1.T - z[: T.f1], axis=1))
    x_excess = np.max(np.atleast_2d(model.X.residual(x)).reshape(T.v, -1), axis=1)
    dissipation = M(x, np.inf) + d - Lv - kap - worst
    domain = -np.maximum(leave, x_excess)
    slack = np.minimum(dissipation, domain)
    slack = np.where(np.isnan(slack), -np.inf, slack)
    in_X = bool(np.all(x_excess <= SLACK_TOL))
    in_U = bool(np.all(model.U.contains(u)))
    k = int(np.argmin(slack))
    report = {
        "min_slack": float(slack[k]), "argmin_vertex": k, "d": d,
        "min_dissipation_slack": float(dissipation.min()), "min_domain_slack": float(domain.min()),
        "negative": int(np.sum(slack < -SLACK_TOL)),
        "vertices_in_X": in_X, "controls_in_U": in_U,
        "lambda_max": float(lam.max()), "kappa_max": float(kap.max()),
        "passed": bool(slack[k] >= -SLACK_TOL and in_X and in_U),
        "slacks": slack,
    }
    logger.info("vertex conditions: min slack %.3e at vertex %d (%s)", slack[k], k,
                "pass" if report["passed"] else "FAIL")
    return report


# ---------------------------------------------------------------------------
# sampled dissipation inequality


def check_dissipation_sampled(artifact, n_samples=10_000, u_grid=21, seed=0, policy=None,
                              chunk=2000):
    """Sufficient sampled certificate of the dissipation inequality.

    At each sampled ``x`` in the domain the inequality
    ``M(x) + d >= L(x, u) + I_X(x) + max_{w in W} M(f(x, u) + w)`` is tested
    for every ``u`` on a uniform grid of ``U`` and for ``u = mu(x)``. The
    maximum over ``W`` is exact (box vertices, ``M`` convex). A point is
    certified if some candidate satisfies the inequality within ``1e-6``.
    """
    if u_grid < 2:
        raise ValueError("u_grid needs at least two points per axis")
    model = artifact.model
    pol = policy or Policy.from_artifact(artifact)
    rng = np.random.Generator(np.random.Philox(seed))
    xs = pol.sample_domain(n_samples, rng)
    axes = [np.linspace(lo, hi, u_grid) for lo, hi in zip(model.U.lo, model.U.hi)]
    ugrid = np.array(list(itertools.product(*axes)))
    Wv = model.W.vertices()
    M = _M_of(artifact)
    certified = np.zeros(len(xs), dtype=bool)
    by_mu = np.zeros(len(xs), dtype=bool)
    best_gap = np.full(len(xs), -np.inf)
    for s in range(0, len(xs), chunk):
        x = xs[s: s + chunk]
        mu = pol.feedback_batch(x)
        cands = np.concatenate([mu[:, None, :], np.broadcast_to(ugrid, (len(x),) + ugrid.shape)], axis=1)
        nc = cands.shape[1]
        xr = np.repeat(x, nc, axis=0)
        ur = cands.reshape(-1, model.n_u)
        F = model.step(xr, ur)
        # successors may sit outside the domain by the synthesis tolerance
        worst = np.max(np.stack([M(F + w, SLACK_TOL) for w in Wv], axis=1), axis=1)
        rhs = model.stage_cost(xr, ur) + _indicator_X(model, xr, SLACK_TOL) + worst
        gap = (M(xr) + artifact.d - rhs).reshape(len(x), nc)
        best_gap[s: s + chunk] = gap.max(axis=1)
        certified[s: s + chunk] = best_gap[s: s + chunk] >= -SLACK_TOL
        by_mu[s: s + chunk] = gap[:, 0] >= -SLACK_TOL
    report = {
        "samples": len(xs), "certified": int(certified.sum()),
        "certified_fraction": float(certified.mean()),
        "certified_by_mu": int(by_mu.sum()), "worst_gap": float(best_gap.min()),
        "semantics": "sufficient certificate (min over u sampled)",
        "passed": bool(certified.all()),
    }
    logger.info("sampled dissipation: %d/%d certified", report["certified"], report["samples"])
    return report


# ---------------------------------------------------------------------------
# value iteration


@dataclass
class ValueGrid:
    """Value-iteration stack ``J_0..J_K`` on a regular grid."""

    axes: list
    J: np.ndarray
    u_grid: int
    w_mode: str = "box vertices"
    surrogate: float = SURROGATE
    inside_X: np.ndarray | None = None
    queries: dict = field(default_factory=dict, repr=False)

    @property
    def K(self):
        return self.J.shape[0] - 1

    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def spacing(self):
        return np.array([a[1] - a[0] for a in self.axes])

    def write_csv(self, path, stride=1, header_comment=None):
        nodes = self.nodes()
        ks = list(range(0, self.K + 1, stride))
        if ks[-1] != self.K:
            ks.append(self.K)
        with open(path, "w") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join([f"x{i + 1}" for i in range(nodes.shape[1])] + [f"J{k}" for k in ks]) + "\n")
            vals = self.J.reshape(self.K + 1, -1)
            for j, x in enumerate(nodes):
                fh.write(",".join([repr(float(c)) for c in x] + [repr(float(vals[k, j])) for k in ks]) + "\n")


def _bilinear_setup(axes, pts):
    """Cell indices and weights for multilinear interpolation; ``outside`` mask."""
    n = len(axes)
    lo = np.array([a[0] for a in axes])
    h = np.array([a[1] - a[0] for a in axes])
    sizes = np.array([len(a) for a in axes])
    t = (pts - lo) / h
    outside = np.any((t < -1e-12) | (t > sizes - 1 + 1e-12), axis=1)
    t = np.clip(t, 0, sizes - 1)
    i0 = np.minimum(np.floor(t).astype(int), sizes - 2)
    frac = t - i0
    corners = []
    weights = []
    for bits in itertools.product((0, 1), repeat=n):
        bits = np.array(bits)
        idx = i0 + bits
        flat = np.ravel_multi_index(tuple(idx.T), tuple(sizes))
        wgt = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=1)
        corners.append(flat)
        weights.append(wgt)
    return np.stack(corners, axis=1), np.stack(weights, axis=1), outside


def value_iteration(model, grid_spec=None, K=50, u_grid=41, surrogate=SURROGATE):
    """Min-max value iteration on a regular grid.

    ``J_{k+1}(x) = min_u max_w L(x, u) + I_X(x) + J_k(f(x, u) + w)`` with
    ``u`` on a uniform grid of ``U``, ``w`` over the vertices of ``W`` and
    ``J_k`` interpolated bilinearly. Nodes outside ``X`` and queries outside
    the grid take the value ``surrogate``. ``grid_spec`` is
    ``{"lo": ..., "hi": ..., "n": ...}``; by default it is the bounding box
    of ``X`` with 41 points per axis.
    """
    xlo, xhi = model.state_box()
    spec = dict(grid_spec or {})
    lo = np.asarray(spec.get("lo", xlo), dtype=float)
    hi = np.asarray(spec.get("hi", xhi), dtype=float)
    npts = spec.get("n", 41)
    npts = np.broadcast_to(np.asarray(npts, dtype=int), lo.shape)
    if np.any(lo > xlo + 1e-12) or np.any(hi < xhi - 1e-12):
        raise ValueError("grid too small")
    if K < 1:
        raise ValueError("K must be at least 1")
    axes = [np.linspace(a, b, int(m)) for a, b, m in zip(lo, hi, npts)]
    vg = ValueGrid(axes=axes, J=np.zeros((0,)), u_grid=u_grid, surrogate=surrogate)
    nodes = vg.nodes()
    N = len(nodes)
    uaxes = [np.linspace(a, b, u_grid) for a, b in zip(model.U.lo, model.U.hi)]
    ug = np.array(list(itertools.product(*uaxes)))
    Wv = model.W.vertices()
    nu, nw = len(ug), len(Wv)
    xr = np.repeat(nodes, nu, axis=0)
    ur = np.tile(ug, (N, 1))
    F = model.step(xr, ur)
    stage = model.stage_cost(xr, ur).reshape(N, nu)
    inside = model.X.contains(nodes, tol=1e-12)
    q = (F[:, None, :] + Wv[None, :, :]).reshape(-1, model.n_x)
    corners, weights, outside = _bilinear_setup(axes, q)
    vg.queries = {"points": q, "corners": corners, "weights": weights, "outside": outside,
                  "n_u": nu, "n_w": nw, "u_values": ug, "stage": stage}
    J = np.zeros((K + 1, N))
    J[0] = np.where(inside, 0.0, surrogate)
    penalty = np.where(inside, 0.0, surrogate)
    for k in range(K):
        interp = np.sum(J[k][corners] * weights, axis=1)
        interp = np.where(outside, surrogate, interp)
        worst = interp.reshape(N, nu, nw).max(axis=2)
        val = np.min(stage + worst, axis=1) + penalty
        J[k + 1] = np.minimum(val, surrogate)
    vg.J = J.reshape((K + 1,) + tuple(int(m) for m in npts))
    vg.inside_X = inside.reshape(tuple(int(m) for m in npts))
    logger.info("value iteration: %d nodes, %d controls, K = %d", N, nu, K)
    return vg


def check_ergodic_bound(valuegrid, artifact, model=None, reference=None):
    """Grid check of ``J_k(x) - k d <= M(x) + eps_grid(k)`` and of ``J_K / K``.

    The allowance is ``eps_grid(k) = k * eps_step`` where ``eps_step`` adds

    * the largest bilinear interpolation defect of ``M`` over the queries
      ``f(x, u) + w`` issued from domain nodes whose cells lie in the domain
      (``M`` is convex, so interpolation over-estimates it), and
    * ``c_u * du / 2`` for the control grid, with ``c_u`` an upper bound on
      ``|d/du (L + M(f + w))|``.

    Nodes whose values depend on the infinity surrogate (detected by
    recomputing with a doubled surrogate, ``reference``) are excluded and
    counted.
    """
    vg = valuegrid
    model = model or artifact.model
    d = artifact.d
    M = _M_of(artifact)
    nodes = vg.nodes()
    N = len(nodes)
    K = vg.K
    J = vg.J.reshape(K + 1, N)
    Mn = M(nodes)
    in_dom = np.isfinite(Mn)
    if reference is None:
        spec = {"lo": [a[0] for a in vg.axes], "hi": [a[-1] for a in vg.axes],
                "n": [len(a) for a in vg.axes]}
        reference = value_iteration(model, spec, K, vg.u_grid, surrogate=2.0 * vg.surrogate)
    Jr = reference.J.reshape(K + 1, N)
    contaminated = np.any(J != Jr, axis=0) | np.any(J >= 0.5 * vg.surrogate, axis=0)
    valid = in_dom & ~contaminated

    # interpolation defect of M over queries from domain nodes
    qd = vg.queries
    q = qd["points"]
    corner_nodes_in = in_dom[qd["corners"]].all(axis=1) & ~qd["outside"]
    src = np.repeat(np.arange(N), qd["n_u"] * qd["n_w"])
    use = corner_nodes_in & in_dom[src]
    Mc = np.where(in_dom, Mn, 0.0)
    interp_M = np.sum(Mc[qd["corners"]] * qd["weights"], axis=1)
    Mq = M(q)
    defect = np.where(use & np.isfinite(Mq), interp_M - Mq, 0.0)
    eps_interp = float(max(defect.max(initial=0.0), 0.0))

    # control-grid allowance
    T = artifact.template
    slope_M = float(np.max(np.linalg.norm(T.G2 / T.h2[:, None], axis=1)))
    nu = qd["n_u"]
    ug = qd["u_values"]
    du = (model.U.hi - model.U.lo) / max(vg.u_grid - 1, 1)
    xr = np.repeat(nodes[in_dom], nu, axis=0)
    ur = np.tile(ug, (int(in_dom.sum()), 1))
    _, Ju = model.step_jacobians(xr, ur)
    _, gLu = model.stage_cost_gradients(xr, ur)
    c_u = float(np.max(np.linalg.norm(gLu, axis=1) + slope_M * np.linalg.norm(Ju, axis=(1, 2)))) \
        if len(xr) else 0.0
    eps_u = 0.5 * c_u * float(np.linalg.norm(du))
    eps_step = eps_interp + eps_u

    ks = np.arange(K + 1)
    excess = J[:, valid] - ks[:, None] * d - Mn[valid][None, :]
    allowance = ks * eps_step
    margin = excess - allowance[:, None]
    raw_max = float(excess.max(initial=-np.inf))
    bound_ok = bool(np.all(margin <= 1e-9)) if valid.any() else True
    ratio = J[K, valid] / K
    dinf_max = float(ratio.max(initial=-np.inf))
    eps_K = K * eps_step
    average_form = bool(np.all(ratio <= d + (Mn[valid] + eps_K) / K + 1e-12)) if valid.any() else True
    report = {
        "K": int(K), "nodes": int(N), "domain_nodes": int(in_dom.sum()),
        "checked_nodes": int(valid.sum()), "contaminated_nodes": int((in_dom & contaminated).sum()),
        "eps_interp": eps_interp, "eps_u": eps_u, "c_u": c_u, "eps_step": eps_step,
        "eps_grid_K": eps_K,
        "max_excess": raw_max, "max_margin": float(margin.max(initial=-np.inf)),
        "bound_holds": bound_ok,
        "dinf_estimate_max": dinf_max, "d_star": float(d),
        "dinf_within": bool(dinf_max <= d + eps_K),
        "average_bound_holds": average_form,
        "passed": bool(bound_ok and dinf_max <= d + eps_K),
    }
    logger.info("ergodic check: %d nodes checked, max excess %.4g, eps_step %.4g, J_K/K max %.4g",
                report["checked_nodes"], raw_max, eps_step, dinf_max)
    return report


# ---------------------------------------------------------------------------
# invariance by simulation


def check_invariance(artifact, policy=None, n_rollouts=100, horizon=2000, seed=0,
                     modes=("vertex-random", "greedy-adversarial")):
    """Closed-loop rollouts from random domain starts; counts domain/X exits."""
    pol = policy or Policy.from_artifact(artifact)
    model = artifact.model
    rng = np.random.Generator(np.random.Philox(seed))
    starts = pol.sample_domain(n_rollouts, rng)
    out = {"rollouts": n_rollouts, "horizon": horizon, "modes": {}}
    total = 0
    for k, mode in enumerate(modes):
        summary, trajs = batch_rollout(model, pol, starts, horizon, mode, seed + k + 1)
        total += summary["violations"]
        summary["terminal_radius_max"] = float(max(
            (np.linalg.norm(t.x[-min(500, len(t.x)):], axis=1).max() for t in trajs), default=0.0))
        out["modes"][mode] = summary
    out["violations"] = total
    out["passed"] = total == 0
    return out


def shrink_domain(artifact, factor=0.5):
    """Counterexample probe: the policy with its domain offsets ``z_1`` scaled.

    The lower offsets and the vertex controls are kept (nothing is
    re-solved), so the closed loop is the certified one restricted to a
    smaller set, which it need not leave invariant.
    """
    return Policy.from_artifact(artifact).with_domain_scaled(factor)


def domain_area_fraction(policy, model, n=200_000, seed=0):
    """Monte-Carlo ratio ``area(dom M) / area(X)`` over ``X``'s bounding box."""
    rng = np.random.Generator(np.random.Philox(seed))
    lo, hi = model.state_box()
    pts = rng.uniform(lo, hi, size=(n, len(lo)))
    inX = model.X.contains(pts, tol=0.0)
    inD = policy.in_domain(pts, tol=0.0) & inX
    return float(inD.sum() / max(inX.sum(), 1))


def convexity_violation(policy, n=100_000, seed=0):
    """Largest ``M(t a + (1-t) b) - t M(a) - (1-t) M(b)`` over random triples."""
    rng = np.random.Generator(np.random.Philox(seed))
    a = policy.sample_domain(n, rng)
    b = policy.sample_domain(n, rng)
    t = rng.uniform(size=(n, 1))
    mid = t * a + (1 - t) * b
    gap = policy.M(mid) - (t[:, 0] * policy.M(a) + (1 - t[:, 0]) * policy.M(b))
    return float(gap.max())


def boundary_continuity(policy, n_boundaries=100, seed=0, offset=1e-12):
    """Two-sided evaluation of ``mu`` across shared region edges.

    Picks up to ``n_boundaries`` pairs of regions sharing two vertices and
    compares ``mu`` just inside each region at random points of the shared
    edge. Returns the largest discrepancy and the number of edges tested.
    The probes sit ``offset`` away from the edge, so a steep but continuous
    law contributes about ``offset * |grad mu|`` to the discrepancy.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    T = policy.T
    owners = {}
    for r, reg in enumerate(policy.regions):
        m = len(reg)
        for k in range(m):
            a, b = int(reg[k]), int(reg[(k + 1) % m])
            owners.setdefault((min(a, b), max(a, b)), []).append(r)
    shared = [(e, rs) for e, rs in sorted(owners.items()) if len(rs) == 2]
    if len(shared) > n_boundaries:
        pick = rng.choice(len(shared), n_boundaries, replace=False)
        shared = [shared[i] for i in sorted(pick)]
    worst = 0.0
    tested = 0
    for (a, b), (r1, r2) in shared:
        pa, pb = policy.positions[a], policy.positions[b]
        if np.linalg.norm(pb - pa) < 1e-9:
            continue
        t = rng.uniform(0.05, 0.95)
        p = (1 - t) * pa + t * pb
        vals = []
        for r in (r1, r2):
            c = policy.positions[policy.regions[r]].mean(axis=0)
            x = p + offset * (c - p) / max(np.linalg.norm(c - p), 1e-300)
            th = policy._weights_batch(r, x[None, :])[0]
            vals.append(th @ policy.u[policy.regions[r]])
        worst = max(worst, float(np.abs(vals[0] - vals[1]).max()))
        tested += 1
    return worst, tested
