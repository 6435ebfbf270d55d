import dataclasses

import numpy as np
import pytest

from pwaclf import geometry as g
from pwaclf import model as m
from pwaclf import policy as pl
from pwaclf import sim


@pytest.fixture(scope="module")
def setup():
    T = g.ring_template("desk")
    pol = pl.Policy(T, 2.5 * T.z_ref, np.zeros((T.v, 1)), [-2.0], [2.0])
    return T, pol


def test_equilibrium_without_disturbance(setup):
    _, pol = setup
    mod = dataclasses.replace(m.vdp_preset(), W=m.box([0, 0], [0, 0]))
    tr = sim.rollout(mod, pol, np.zeros(2), 50)
    np.testing.assert_array_equal(tr.x, 0.0)
    assert tr.average_cost == 0.0 and not tr.violation


def test_seed_reproducible(setup, vdp):
    _, pol = setup
    a = sim.rollout(vdp, pol, np.array([0.5, -0.3]), 200, seed=4)
    b = sim.rollout(vdp, pol, np.array([0.5, -0.3]), 200, seed=4)
    c = sim.rollout(vdp, pol, np.array([0.5, -0.3]), 200, seed=5)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.w, c.w)


def test_single_start_matches_batch(setup, vdp):
    _, pol = setup
    x0 = np.array([[0.2, 0.1], [-1.0, 0.5]])
    summary, trajs = sim.batch_rollout(vdp, pol, x0[:1], 100, seed=9)
    one = sim.rollout(vdp, pol, x0[0], 100, seed=9)
    np.testing.assert_array_equal(trajs[0].x, one.x)
    assert summary["rollouts"] == 1


def test_empty_start_list(setup, vdp):
    _, pol = setup
    summary, trajs = sim.batch_rollout(vdp, pol, np.zeros((0, 2)), 10)
    assert summary["rollouts"] == 0 and trajs == []


def test_disturbance_modes(setup, vdp):
    _, pol = setup
    F = np.random.default_rng(0).uniform(-1, 1, size=(100, 2))
    rng = sim.make_rng(1)
    w = sim._disturbances(vdp, pol, F, "vertex-random", rng)
    assert set(map(tuple, np.abs(w))) == {(0.005, 0.005)}
    w = sim._disturbances(vdp, pol, F, "box-uniform", rng)
    assert np.abs(w).max() <= 0.005
    w = sim._disturbances(vdp, pol, F, "greedy-adversarial", rng)
    verts = vdp.W.vertices()
    best = np.max(np.stack([pol.M(F + v) for v in verts], axis=1), axis=1)
    np.testing.assert_array_equal(pol.M(F + w), best)
    with pytest.raises(ValueError, match="unknown disturbance"):
        sim._disturbances(vdp, pol, F, "gaussian", rng)


def test_leaving_domain_truncates(setup, vdp):
    # constant large control drives the oscillator out of the small domain
    T, _ = setup
    pol = pl.Policy(T, 0.5 * T.z_ref, np.full((T.v, 1), 2.0), [-2.0], [2.0])
    tr = sim.rollout(vdp, pol, np.array([0.4, 0.0]), 500)
    assert tr.violation and tr.violation_step == tr.length
    assert not pol.in_domain(tr.x[-1:])[0]


def test_start_outside_domain_rejected(setup, vdp):
    _, pol = setup
    with pytest.raises(pl.PolicyError):
        sim.rollout(vdp, pol, np.array([10.0, 0.0]), 5)


def test_write_csv(tmp_path, setup, vdp):
    _, pol = setup
    tr = sim.rollout(vdp, pol, np.array([0.1, 0.1]), 5)
    path = tmp_path / "t.csv"
    tr.write_csv(path, header_comment="provenance test")
    lines = path.read_text().splitlines()
    assert lines[0] == "# provenance test"
    assert lines[1] == "k,x1,x2,u,w1,w2,L,M,region"
    assert len(lines) == 2 + 6


def test_open_loop_damped_origin_contracts(setup, vdp):
    # zero control: the damped linear part pulls small states inward
    _, pol = setup
    tr = sim.rollout(dataclasses.replace(vdp, W=m.box([0, 0], [0, 0])), pol,
                     np.array([0.5, 0.0]), 1000)
    assert np.linalg.norm(tr.x[-1]) < 0.1 * np.linalg.norm(tr.x[0])
