import json

import numpy as np
import pytest

from pwaclf import cli
from pwaclf.synthesis import CLFArtifact

FAST_VERIFY = {
    "samples": 500, "u_grid": 5,
    "value_iteration": {"n": 21, "K": 5, "u_grid": 5},
    "rollouts": 5, "horizon": 100,
}


def _write(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def affine_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("affine")
    cfg = _write(root / "cfg.json", {"model": {"preset": "affine"}, "verify": FAST_VERIFY,
                                     "plotdata": {"grid": 21, "trajectories": 2, "horizon": 50}})
    code = cli.main(["synth", "--config", cfg, "--out", str(root / "synth")])
    return root, cfg, code


@pytest.mark.parametrize("layout, counts", [
    ("simplex", {"f1": 3, "f2": 1, "v": 3, "e": 1}),
    ("desk", {"f1": 16, "f2": 13}),
    ("paper", {"f1": 48, "f2": 265, "v": 576, "e": 840}),
])
def test_template_counts(tmp_path, layout, counts):
    cfg = _write(tmp_path / "cfg.json", {"template": {"layout": layout}})
    assert cli.main(["template", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "validation.json").read_text())
    assert report["passed"]
    for key, val in counts.items():
        assert report["counts"][key] == val


def test_synth_affine(affine_run):
    root, _, code = affine_run
    assert code == 0
    res = json.loads((root / "synth" / "residuals.json").read_text())
    assert res["status"] == "CERTIFIED"
    assert res["residuals"]["max"] <= 1e-6
    art = CLFArtifact.load(root / "synth" / "clf.json")
    assert art.certified and art.d <= 1e-9


def test_synth_is_deterministic(affine_run, tmp_path):
    root, cfg, _ = affine_run
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for name in ("clf.json", "residuals.json", "solver.json", "trace_tail.csv", "config.json"):
        assert (root / "synth" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_outputs_carry_provenance(affine_run):
    root, _, _ = affine_run
    art = CLFArtifact.load(root / "synth" / "clf.json")
    res = json.loads((root / "synth" / "residuals.json").read_text())
    prov = res["provenance"]
    assert prov["template_fingerprint"] == art.template.fingerprint()
    assert prov["model_fingerprint"] == art.model.fingerprint()
    assert len(prov["config_hash"]) == 16
    first = (root / "synth" / "trace_tail.csv").read_text().splitlines()[0]
    assert first.startswith("# provenance") and prov["config_hash"] in first


def test_verify_exit_codes(affine_run, tmp_path):
    root, cfg, _ = affine_run
    clf = str(root / "synth" / "clf.json")
    assert cli.main(["verify", "--config", cfg, "--artifact", clf, "--out", str(tmp_path / "ok")]) == 0
    summary = json.loads((tmp_path / "ok" / "verify.json").read_text())
    assert summary["checks"]["all_passed"]
    assert (tmp_path / "ok" / "vertex_slacks.csv").is_file()
    assert (tmp_path / "ok" / "value_iteration.csv").is_file()

    art = CLFArtifact.load(clf)
    art.u = np.zeros_like(art.u)
    art.save(tmp_path / "bare.json")
    code = cli.main(["verify", "--config", cfg, "--artifact", str(tmp_path / "bare.json"),
                     "--out", str(tmp_path / "bad")])
    assert code == 3

    assert cli.main(["verify", "--artifact", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "none")]) == 1


def test_usage_errors(tmp_path):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["template", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    cfg = _write(tmp_path / "layout.json", {"template": {"layout": "nonesuch"}})
    assert cli.main(["template", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_plotdata_regions(affine_run, tmp_path):
    root, cfg, _ = affine_run
    clf = str(root / "synth" / "clf.json")
    assert cli.main(["plotdata", "--config", cfg, "--artifact", clf, "--out", str(tmp_path / "p")]) == 0
    rows = (tmp_path / "p" / "fig2_regions.csv").read_text().splitlines()[2:]
    regions = {int(r.split(",")[0]) for r in rows}
    assert len(regions) == CLFArtifact.load(clf).template.f2
    for name in ("fig1_M_surface.csv", "fig3_mu_surface.csv", "fig2_X_boundary.csv",
                 "fig2_trajectories.csv"):
        assert (tmp_path / "p" / name).read_text().startswith("# provenance")


def test_simulate_writes_trajectories(affine_run, tmp_path):
    root, cfg, _ = affine_run
    clf = str(root / "synth" / "clf.json")
    assert cli.main(["simulate", "--config", cfg, "--artifact", clf, "--out", str(tmp_path / "s")]) == 0
    summary = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert summary["summary"]["violations"] == 0
    assert len(list((tmp_path / "s").glob("trajectory_*.csv"))) == 10


def test_export_and_eval(affine_run, tmp_path):
    root, _, _ = affine_run
    clf = str(root / "synth" / "clf.json")
    assert cli.main(["export", "--artifact", clf, "--out", str(tmp_path / "e")]) == 0
    meta = json.loads((tmp_path / "e" / "export.json").read_text())
    assert meta["gamma_hat"] == pytest.approx(0.0, abs=1e-9)

    cfg = _write(tmp_path / "eval.json", {"eval": {"points": [[0.0, 0.0], [50.0, 0.0]]}})
    code = cli.main(["eval", "--config", cfg, "--policy", str(tmp_path / "e" / "policy.json"),
                     "--out", str(tmp_path / "v")])
    assert code == 2  # one point lies outside the domain
    rows = json.loads((tmp_path / "v" / "eval.json").read_text())["points"]
    assert rows[0]["in_domain"] and not rows[1]["in_domain"]
    assert rows[0]["M"] == pytest.approx(0.0, abs=1e-6)
    assert abs(rows[0]["mu"][0]) <= 1.0


def test_rerun_replaces_outputs(affine_run, tmp_path):
    root, _, _ = affine_run
    clf = str(root / "synth" / "clf.json")
    out = str(tmp_path / "x")
    assert cli.main(["export", "--artifact", clf, "--out", out]) == 0
    assert cli.main(["export", "--artifact", clf, "--out", out, "--seed", "3"]) == 0
    cfg = json.loads((tmp_path / "x" / "config.json").read_text())
    assert cfg["config"]["seed"] == 3
    assert not list(tmp_path.glob(".staging-*"))
