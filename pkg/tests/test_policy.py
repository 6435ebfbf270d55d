import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.path import Path as MplPath

from pwaclf import geometry as g
from pwaclf import policy as pl
from pwaclf.verify import boundary_continuity, convexity_violation


@pytest.fixture(scope="module")
def pol():
    T = g.ring_template("desk")
    u = np.random.default_rng(0).uniform(-2, 2, size=(T.v, 1))
    return pl.Policy(T, T.z_ref, u, [-2.0], [2.0])


def test_flat_single_facet_function():
    T = g.template_from_facets(g.polygon_directions(4), [[0.0, 0.0]], [-1.0], [1, 1, 1, 1, 0.0])
    x = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    np.testing.assert_array_equal(pl.eval_M((T, T.z_ref), x), 0.0)


def test_outside_domain_is_infinite(pol):
    assert pl.eval_M((pol.T, pol.z), [[5.0, 0.0]])[0] == np.inf
    with pytest.raises(pl.PolicyError, match="out of domain"):
        pol.feedback(np.array([5.0, 0.0]))
    with pytest.raises(pl.PolicyError, match="out of domain"):
        pol.locate_region(np.array([0.0, 5.0]))


def test_convexity_midpoints(pol):
    assert convexity_violation(pol, n=10_000) <= 1e-12


def test_vertex_reproduces_control(pol):
    for k in range(pol.T.v):
        np.testing.assert_allclose(pol.feedback(pol.positions[k]), pol.u[k], atol=1e-9)


def test_vertex_membership(pol):
    for k in range(0, pol.T.v, 3):
        r = pol.locate_region(pol.positions[k])
        assert k in pol.regions[r]


def test_centroid_lookup_against_polygon_oracle(pol):
    for r, reg in enumerate(pol.regions):
        c = pol.positions[reg].mean(axis=0)
        assert pol.locate_region(c) == r
        inside = [MplPath(pol.region_polygon(q)).contains_point(c) for q in range(pol.n_regions)]
        assert np.flatnonzero(inside).tolist() == [r]


def test_single_region_always_zero():
    T = g.ring_template("simplex")
    p = pl.Policy(T, T.z_ref, np.zeros((T.v, 1)), [-1.0], [1.0])
    x = p.sample_domain(100, np.random.default_rng(0))
    assert np.all(p.locate_regions(x) == 0)


def test_triangle_centroid_weights():
    T = g.ring_template("simplex")
    p = pl.Policy(T, T.z_ref, np.zeros((T.v, 1)), [-1.0], [1.0])
    theta = p.interpolation_weights(0, p.positions.mean(axis=0))
    np.testing.assert_allclose(theta, [1 / 3] * 3, atol=1e-12)
    first = p.positions[p.regions[0][0]]
    np.testing.assert_allclose(p.interpolation_weights(0, first), [1, 0, 0], atol=1e-12)


def test_weights_reconstruct_points(pol, rng):
    x = pol.sample_domain(300, rng)
    for xi in x:
        r = pol.locate_region(xi)
        theta = pol.interpolation_weights(r, xi)
        assert theta.min() >= 0 and theta.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(theta @ pol.region_polygon(r), xi, atol=1e-10)


def test_constant_controls_give_constant_law():
    T = g.ring_template("desk")
    p = pl.Policy(T, T.z_ref, np.full((T.v, 1), 0.7), [-2.0], [2.0])
    x = p.sample_domain(500, np.random.default_rng(3))
    np.testing.assert_allclose(p.feedback_batch(x), 0.7, atol=1e-12)


def test_continuity_across_boundaries(pol):
    worst, tested = boundary_continuity(pol, n_boundaries=100)
    # centre 12-gon touches 12 ring regions, which touch each other 12 times
    assert tested == 24 and worst <= 1e-7


def test_continuity_paper_layout():
    T = g.ring_template("paper")
    u = np.random.default_rng(2).uniform(-2, 2, size=(T.v, 1))
    worst, tested = boundary_continuity(pl.Policy(T, T.z_ref, u, [-2.0], [2.0]), n_boundaries=100)
    assert tested == 100 and worst <= 1e-7


def test_feedback_stays_in_U(pol, rng):
    u = pol.feedback_batch(pol.sample_domain(5000, rng))
    assert u.min() >= -2.0 and u.max() <= 2.0


def test_export_import_roundtrip(tmp_path, pol, rng):
    path = tmp_path / "policy.json"
    pl.export_policy(pol, path)
    back = pl.import_policy(path)
    x = pol.sample_domain(200, rng)
    np.testing.assert_allclose(back.feedback_batch(x), pol.feedback_batch(x), atol=1e-12)


def test_truncated_file_reports_offset(tmp_path, pol):
    path = tmp_path / "policy.json"
    pl.export_policy(pol, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:100])
    with pytest.raises(pl.PolicyError, match=r"parse error at byte \d+"):
        pl.import_policy(path)


def test_version_mismatch(tmp_path, pol):
    data = pol.to_dict()
    data["version"] = 99
    path = tmp_path / "p.json"
    path.write_text(json.dumps(data))
    with pytest.raises(pl.PolicyError, match="unsupported version"):
        pl.import_policy(path)


def test_tampered_controls_detected(tmp_path, pol):
    data = pol.to_dict()
    data["u"][0][0] += 0.1
    path = tmp_path / "p.json"
    path.write_text(json.dumps(data))
    with pytest.raises(pl.PolicyError, match="incompatible"):
        pl.import_policy(path)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.floats(0, 1))
def test_feedback_piecewise_affine_on_region_segment(pol, seed, t):
    # inside one region the law is affine, so it commutes with convex combinations
    rng = np.random.default_rng(seed)
    r = int(rng.integers(pol.n_regions))
    P = pol.region_polygon(r)
    reg = pol.regions[r]
    c, tri, _ = pol._tri[r]
    # restrict to one triangle (centroid plus an edge) so the law is genuinely affine
    k = int(rng.integers(len(tri)))
    Q = np.vstack([c, P[tri[k]]])
    wa, wb = rng.dirichlet(np.ones(3), size=2)
    a, b = wa @ Q, wb @ Q
    mid = (1 - t) * a + t * b
    lhs = pol.feedback(mid)
    rhs = (1 - t) * pol.feedback(a) + t * pol.feedback(b)
    assert reg.size >= 3
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_sampling_empty_domain_raises(desk):
    p = pl.Policy(desk, desk.z_ref, np.zeros((desk.v, 1)), [-1.0], [1.0]).with_domain_scaled(-1.0)
    with pytest.raises(pl.PolicyError, match="no interior"):
        p.sample_domain(5, np.random.default_rng(0))
