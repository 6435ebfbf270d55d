"""Acceptance criteria, each at its stated tolerance.

Every test records one ``criterion n: PASS/FAIL`` line; the lines are
repeated in the terminal summary. The paper-scale synthesis runs once per
session (through the command line, as a user would run it) and feeds the
invariance, ergodic, property and counterexample criteria.
"""

import time

import numpy as np
import pytest

from lp_oracle import enumerate_bases, random_lp
from pwaclf import cli
from pwaclf import geometry as g
from pwaclf import lp as L
from pwaclf import model as m
from pwaclf import synthesis as S
from pwaclf import verify as V
from pwaclf.policy import Policy
from pwaclf.synthesis import CLFArtifact


@pytest.fixture(scope="session")
def paper_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("paper") / "synth"
    t0 = time.perf_counter()
    code = cli.main(["synth", "--scale", "paper", "--out", str(out)])
    seconds = time.perf_counter() - t0
    art = CLFArtifact.load(out / "clf.json") if (out / "clf.json").is_file() else None
    return {"code": code, "seconds": seconds, "artifact": art, "out": out}


@pytest.fixture(scope="session")
def paper_artifact(paper_run):
    if paper_run["artifact"] is None:
        pytest.fail("paper-scale synthesis produced no artifact")
    return paper_run["artifact"]


def test_criterion_1_geometry_oracle(desk, acceptance_record):
    t0 = time.perf_counter()
    Z = g.sample_feasible_parameters(desk, 500, np.random.default_rng(2024))
    reports = [g.validate_template(desk, z, tol=1e-7, method="brute") for z in Z]
    seconds = time.perf_counter() - t0
    worst = max(r["mismatch"] for r in reports)
    ok = all(r["passed"] for r in reports) and len(reports) >= 500 and seconds < 30
    acceptance_record(1, ok, f"{len(reports)} parameters, worst vertex mismatch {worst:.2e}, {seconds:.1f} s")
    assert ok


def test_criterion_2_lp_oracle(acceptance_record):
    rng = np.random.default_rng(99)
    worst, mismatched = 0.0, 0
    for _ in range(200):
        c, A, b = random_lp(rng, max_vars=8, max_rows=12)
        ref = enumerate_bases(c, A, b)
        res = L.solve_lp(L.LinearProgram.from_inequalities(c, A, b))
        if ref is None:
            mismatched += res.status != "infeasible"
            continue
        if res.status != "optimal":
            mismatched += 1
            continue
        gap = abs(res.objective - ref)
        worst = max(worst, gap)
        mismatched += gap > 1e-8
    ok = mismatched == 0
    acceptance_record(2, ok, f"200 LPs, {mismatched} mismatches, worst objective gap {worst:.1e}")
    assert ok


def test_criterion_3_linear_robust_clf(desk, acceptance_record):
    model = m.affine_demo(cost_weight=0.0)
    art = S.two_stage_solve(desk, model)
    rep = V.check_vertex_conditions(art)
    ok = art.d <= 1e-6 and rep["passed"]
    acceptance_record(3, ok, f"d* = {art.d:.2e}, vertex min slack {rep['min_slack']:.2e}")
    assert ok


def test_criterion_4_desk_vanderpol(desk_artifact, acceptance_record):
    art = desk_artifact
    rep = V.check_vertex_conditions(art)
    ok = (art.certified and art.d <= 0.5 and art.residuals["max"] <= 1e-6
          and rep["min_slack"] >= -1e-6)
    acceptance_record(4, ok, f"d* = {art.d:.4f}, max residual {art.residuals['max']:.1e}, "
                             f"vertex min slack {rep['min_slack']:.1e}")
    assert ok


def test_criterion_5_paper_vanderpol(paper_run, vdp, acceptance_record):
    art = paper_run["artifact"]
    if art is None:
        acceptance_record(5, False, f"no artifact (exit code {paper_run['code']})")
        pytest.fail("no artifact")
    area = V.domain_area_fraction(Policy.from_artifact(art), vdp, n=200_000, seed=0)
    ok = (paper_run["code"] == 0 and art.certified and 0 < art.d <= 0.3 and area >= 0.8
          and paper_run["seconds"] <= 1800)
    acceptance_record(5, ok, f"f2 = {art.template.f2}, d* = {art.d:.4f} (reference 0.1), "
                             f"area {100 * area:.1f}% of X, {paper_run['seconds'] / 60:.1f} min, "
                             f"{'certified' if art.certified else 'uncertified'}")
    assert ok


def test_criterion_6_robust_invariance(paper_artifact, acceptance_record):
    rep = V.check_invariance(paper_artifact, n_rollouts=100, horizon=2000, seed=6)
    radius = max(s["terminal_radius_max"] for s in rep["modes"].values())
    ok = rep["violations"] == 0 and radius <= 0.5
    acceptance_record(6, ok, f"{rep['violations']} violations over 2 x 100 rollouts, "
                             f"terminal radius {radius:.3f}")
    assert ok


def test_criterion_7_ergodic_bound(paper_artifact, acceptance_record):
    t0 = time.perf_counter()
    vg = V.value_iteration(paper_artifact.model, {"n": 41}, K=50, u_grid=41)
    rep = V.check_ergodic_bound(vg, paper_artifact)
    seconds = time.perf_counter() - t0
    ok = rep["passed"] and seconds < 300
    acceptance_record(7, ok, f"{rep['checked_nodes']} nodes, max excess {rep['max_excess']:.3g} "
                             f"(allowance {rep['eps_grid_K']:.3g}), J_K/K max {rep['dinf_estimate_max']:.4f} "
                             f"vs d* {paper_artifact.d:.4f}, {seconds:.0f} s")
    assert ok


def test_criterion_8_properties(paper_artifact, tmp_path, acceptance_record):
    pol = Policy.from_artifact(paper_artifact)
    conv = V.convexity_violation(pol, n=100_000, seed=8)
    jump, edges = V.boundary_continuity(pol, n_boundaries=100, seed=8)
    x = pol.sample_domain(100_000, np.random.default_rng(8))
    mu = pol.feedback_batch(x)
    in_U = bool(np.all(mu >= pol.U_lo) and np.all(mu <= pol.U_hi))
    # determinism: two identical seeded end-to-end runs (desk scale)
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["synth", "--scale", "desk", "--seed", "5", "--out", str(out)]) == 0
        blobs.append((out / "clf.json").read_bytes())
    same = blobs[0] == blobs[1]
    ok = conv <= 1e-8 and jump <= 1e-7 and edges == 100 and in_U and same
    acceptance_record(8, ok, f"convexity {conv:.1e}, continuity {jump:.1e} over {edges} edges, "
                             f"mu in U {in_U}, byte-identical reruns {same}")
    assert ok


def test_criterion_9_counterexamples(paper_artifact, acceptance_record):
    art = paper_artifact
    slack = V.check_vertex_conditions(art, d=art.d - 0.05)["min_slack"]
    small = V.shrink_domain(art, 0.5)
    inv = V.check_invariance(art, small, n_rollouts=100, horizon=2000, seed=9)
    ok = slack < 0 and inv["violations"] > 0
    acceptance_record(9, ok, f"slack at d* - 0.05: {slack:.3g}, invariance violations after 0.5x "
                             f"shrink: {inv['violations']}")
    assert ok
