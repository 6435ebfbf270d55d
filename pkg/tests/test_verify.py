import dataclasses

import numpy as np
import pytest

from pwaclf import geometry as g
from pwaclf import model as m
from pwaclf import synthesis as S
from pwaclf import verify as V
from pwaclf.policy import Policy


def _still_model(rate=0.5):
    """Contracting linear map with zero cost and no disturbance."""
    Xa = np.vstack([np.eye(2), -np.eye(2)])
    return m.SystemModel(
        dynamics=m.AffineDynamics(rate * np.eye(2), np.zeros((2, 1))),
        cost=m.QuadraticCost(np.zeros((2, 2)), np.zeros((1, 1))),
        X=m.PolytopeSet(Xa, np.ones(4)), U=m.box([-1.0], [1.0]), W=m.box([0.0, 0.0], [0.0, 0.0]),
        gamma=0.0, alpha=2.0, sigma=0.0, beta=2.0,
    )


@pytest.fixture(scope="module")
def quiet_artifact(desk):
    """Affine demo without cost or disturbance: zero drift is attainable."""
    return S.two_stage_solve(desk, m.affine_demo(W_radius=0.0, cost_weight=0.0))


# ---------------------------------------------------------------------------
# vertex conditions


def test_vertex_slacks_nonnegative_without_cost_or_noise(quiet_artifact):
    rep = V.check_vertex_conditions(quiet_artifact)
    assert quiet_artifact.d <= 1e-6
    assert rep["min_slack"] >= -1e-6
    assert rep["passed"] and rep["negative"] == 0
    assert rep["lambda_max"] == 0.0 and rep["kappa_max"] == 0.0


def test_vertex_check_desk(desk_artifact):
    rep = V.check_vertex_conditions(desk_artifact)
    assert rep["passed"]
    assert len(rep["slacks"]) == desk_artifact.template.v
    assert rep["min_slack"] == pytest.approx(min(rep["min_dissipation_slack"], rep["min_domain_slack"]))


def test_lowering_drift_breaks_vertex_condition(desk_artifact):
    rep = V.check_vertex_conditions(desk_artifact, d=desk_artifact.d - 0.05)
    assert rep["min_slack"] < 0
    assert not rep["passed"]


def test_zeroed_controls_fail(desk):
    art = S.two_stage_solve(desk, m.affine_demo())
    bare = dataclasses.replace(art, u=np.zeros_like(np.asarray(art.u)))
    assert V.check_vertex_conditions(bare)["min_slack"] < -1e-6
    rep = V.check_dissipation_sampled(bare, 2000, u_grid=5, seed=3)
    assert rep["certified_by_mu"] < rep["samples"]


# ---------------------------------------------------------------------------
# sampled dissipation


def test_sampled_dissipation_desk(desk_artifact):
    rep = V.check_dissipation_sampled(desk_artifact, 3000, u_grid=11, seed=1)
    assert rep["samples"] == 3000
    assert rep["passed"] and rep["certified_fraction"] == 1.0


def test_feedback_matches_controls_at_distinct_vertices(desk_artifact):
    # the synthesis may collapse edges to zero length; coincident vertices
    # carry different controls and are skipped
    art = desk_artifact
    pol = Policy.from_artifact(art)
    x = art.vertex_positions()
    u = np.clip(np.asarray(art.u).reshape(x.shape[0], -1), art.model.U.lo, art.model.U.hi)
    gaps = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2) + np.eye(len(x))
    lone = gaps.min(axis=1) > 1e-6
    assert lone.sum() >= len(x) // 2
    np.testing.assert_allclose(pol.feedback_batch(x[lone]), u[lone], atol=1e-9)


def test_sampled_dissipation_rejects_tiny_grid(desk_artifact):
    with pytest.raises(ValueError, match="two points"):
        V.check_dissipation_sampled(desk_artifact, 10, u_grid=1)


# ---------------------------------------------------------------------------
# value iteration


def test_value_iteration_zero_cost_is_zero():
    vg = V.value_iteration(_still_model(), {"n": 11}, K=5, u_grid=3)
    assert vg.J.shape == (6, 11, 11)
    assert np.all(vg.J == 0.0)


def test_value_iteration_monotone(vdp):
    vg = V.value_iteration(vdp, {"n": 21}, K=6, u_grid=9)
    J = vg.J.reshape(vg.K + 1, -1)
    assert np.all(np.diff(J, axis=0) >= -1e-12)


def test_value_iteration_first_step_closed_form(vdp, rng):
    # far inside X every successor cell has its corners in X, so
    # J_1(x) = min_u L(x, u) = tau / 2 * x2^2 (u = 0 is on the grid)
    vg = V.value_iteration(vdp, {"n": 41}, K=1, u_grid=41)
    nodes = vg.nodes()
    inner = np.flatnonzero(np.linalg.norm(nodes, axis=1) <= 2.0)
    pick = rng.choice(inner, 50, replace=False)
    expected = 0.5 * vdp.tau * nodes[pick, 1] ** 2
    np.testing.assert_allclose(vg.J[1].ravel()[pick], expected, rtol=1e-12, atol=1e-14)


def test_value_iteration_outside_nodes_get_surrogate(vdp):
    vg = V.value_iteration(vdp, {"n": 11}, K=1, u_grid=3)
    outside = ~vg.inside_X.ravel()
    assert outside.any()
    assert np.all(vg.J[1].ravel()[outside] == V.SURROGATE)


def test_value_iteration_errors(vdp):
    with pytest.raises(ValueError, match="grid too small"):
        V.value_iteration(vdp, {"lo": [-1, -1], "hi": [1, 1], "n": 5}, K=1)
    with pytest.raises(ValueError, match="K must be at least 1"):
        V.value_iteration(vdp, {"n": 5}, K=0)


# ---------------------------------------------------------------------------
# ergodic bound


def test_ergodic_bound_zero_cost(quiet_artifact):
    vg = V.value_iteration(quiet_artifact.model, {"n": 21}, K=10, u_grid=5)
    rep = V.check_ergodic_bound(vg, quiet_artifact)
    assert rep["checked_nodes"] > 0
    assert rep["passed"] and rep["bound_holds"]


def test_ergodic_bound_desk(desk_artifact):
    vg = V.value_iteration(desk_artifact.model, {"n": 41}, K=20, u_grid=21)
    rep = V.check_ergodic_bound(vg, desk_artifact)
    assert rep["checked_nodes"] > 0
    assert rep["bound_holds"]
    assert rep["dinf_estimate_max"] <= desk_artifact.d + rep["eps_grid_K"]


# ---------------------------------------------------------------------------
# invariance, shrinking, area, convexity


def test_invariance_desk(desk_artifact):
    rep = V.check_invariance(desk_artifact, n_rollouts=10, horizon=300, seed=2)
    assert rep["violations"] == 0 and rep["passed"]
    assert set(rep["modes"]) == {"vertex-random", "greedy-adversarial"}


def test_shrink_domain_keeps_law(quiet_artifact, rng):
    pol = Policy.from_artifact(quiet_artifact)
    small = V.shrink_domain(quiet_artifact, 0.5)
    x = pol.sample_domain(2000, rng)
    inner = small.in_domain(x)
    assert 0 < inner.sum() < len(x)
    assert np.all(pol.in_domain(x[inner]))
    np.testing.assert_array_equal(small.M(x[inner]), pol.M(x[inner]))
    np.testing.assert_array_equal(small.feedback_batch(x[inner]), pol.feedback_batch(x[inner]))
    assert np.all(np.isinf(small.M(x[~inner])))
    assert small.fingerprint() != pol.fingerprint()


def test_invariance_accepts_explicit_policy(quiet_artifact):
    small = V.shrink_domain(quiet_artifact, 0.5)
    rep = V.check_invariance(quiet_artifact, small, n_rollouts=5, horizon=50, seed=3)
    assert rep["rollouts"] == 5 and set(rep["modes"]) == {"vertex-random", "greedy-adversarial"}


class _SquarePolicy:
    """Stand-in exposing only the domain test: the box |x|_inf <= 1."""

    def in_domain(self, x, tol=0.0):
        return np.max(np.abs(x), axis=1) <= 1.0 + tol


def test_area_fraction_square_in_disc(vdp):
    frac = V.domain_area_fraction(_SquarePolicy(), vdp, n=200_000, seed=4)
    assert frac == pytest.approx(4.0 / (9.0 * np.pi), abs=3e-3)


def test_convexity_desk(desk_artifact):
    pol = Policy.from_artifact(desk_artifact)
    assert V.convexity_violation(pol, n=20_000, seed=5) <= 1e-8


class _ConcavePolicy:
    def sample_domain(self, n, rng):
        return rng.uniform(-1, 1, size=(n, 2))

    def M(self, x):
        return -np.sum(x ** 2, axis=1)


def test_convexity_detects_concave_function():
    assert V.convexity_violation(_ConcavePolicy(), n=1000, seed=6) > 0.1


def test_boundary_continuity_desk(desk_artifact):
    pol = Policy.from_artifact(desk_artifact)
    worst, tested = V.boundary_continuity(pol, seed=7)
    # zero-length edges of the synthesized parameter are not probed
    assert 12 <= tested <= 24
    assert worst <= 1e-7

