"""Command-line front end.

Every command reads an optional JSON configuration, applies the command-line
overrides, and writes JSON/CSV files into ``--out``. Each output embeds the
hash of the effective configuration and the template/model fingerprints.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import RING_LAYOUTS, Template, TemplateError, ring_template, validate_template
from .lp import LPError
from .model import ModelError, estimate_nonlinearity, model_from_config
from .policy import Policy, PolicyError, export_policy, import_policy
from .sim import MODES, batch_rollout, make_rng
from .synthesis import (CLFArtifact, SLPOptions, SynthesisError, SynthesisProblem, make_artifact,
                        two_stage_solve)
from . import verify as V

logger = logging.getLogger("pwaclf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3

SCALES = {"desk": "desk", "paper": "paper"}

DEFAULTS = {
    "template": {"layout": "desk"},
    "model": {"preset": "vanderpol"},
    "synth": {"shrink": 0.9, "init": "quadratic", "control_weight": 0.1, "slp": {}},
    "verify": {
        "samples": 10_000, "u_grid": 21,
        "value_iteration": {"n": 41, "K": 50, "u_grid": 41},
        "rollouts": 100, "horizon": 2000,
        "checks": ["vertex", "dissipation", "ergodic", "invariance", "convexity", "continuity"],
    },
    "simulate": {"rollouts": 10, "horizon": 500, "mode": "vertex-random"},
    "plotdata": {"grid": 81, "trajectories": 5, "horizon": 400, "boundary_points": 256},
    "eval": {"points": []},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration and provenance


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        base = Path(path).resolve().parent
        for key in ("artifact", "policy"):
            if isinstance(user.get(key), str):
                user[key] = str((base / user[key]).resolve())
        if isinstance(user.get("template"), dict) and "path" in user["template"]:
            user["template"]["path"] = str((base / user["template"]["path"]).resolve())
        cfg = _merge(cfg, user)
    if args.scale:
        cfg["template"] = {"layout": SCALES[args.scale]}
    cfg["seed"] = int(args.seed)
    if getattr(args, "stage", None):
        cfg.setdefault("synth", {})["stage"] = args.stage
    if getattr(args, "omega", None) is not None:
        cfg.setdefault("synth", {})["omega"] = float(args.omega)
    for key in ("artifact", "policy"):
        val = getattr(args, key, None)
        if val:
            cfg[key] = str(Path(val).resolve())
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Output:
    """Writes into a staging directory that replaces ``--out`` on commit."""

    def __init__(self, out_dir, cfg, fingerprints):
        self.final = Path(out_dir)
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.final.parent))
        self.provenance = {"config_hash": config_hash(cfg), "package_version": __version__,
                           **{f"{k}_fingerprint": v for k, v in fingerprints.items()}}
        self.cfg = cfg
        self.files = []

    def header(self):
        return "provenance " + " ".join(f"{k}={v}" for k, v in sorted(self.provenance.items()))

    def json(self, name, payload):
        data = {"provenance": self.provenance, **payload}
        (self.stage / name).write_text(json.dumps(data, sort_keys=True, indent=1, default=_jsonable))
        self.files.append(name)

    def csv(self, name, columns, rows):
        with open(self.stage / name, "w") as fh:
            fh.write(f"# {self.header()}\n")
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        self.files.append(name)

    def path(self, name):
        self.files.append(name)
        return self.stage / name

    def commit(self):
        self.json("config.json", {"config": self.cfg})
        if not self.final.exists():
            os.rename(self.stage, self.final)
            return
        for name in self.files:
            os.replace(self.stage / name, self.final / name)
        shutil.rmtree(self.stage, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def build_template(spec):
    spec = dict(spec)
    if "path" in spec:
        path = Path(spec["path"])
        if not path.is_file():
            raise UsageError(f"template file not found: {path}")
        return Template.load(path)
    if "layout" in spec:
        if spec["layout"] not in RING_LAYOUTS:
            raise UsageError(f"unknown template layout {spec['layout']!r}")
        return ring_template(spec["layout"])
    if "f1" in spec:
        return ring_template(int(spec["f1"]), spec.get("counts", []), spec.get("radii", []),
                             twist=spec.get("twist", 0.137), seed=spec.get("seed", 0))
    raise UsageError("template spec needs 'layout', 'f1' or 'path'")


def load_artifact(cfg):
    path = cfg.get("artifact")
    if not path:
        raise UsageError("no artifact given (use --artifact or the 'artifact' config key)")
    if not Path(path).is_file():
        raise UsageError(f"artifact not found: {path}")
    try:
        return CLFArtifact.load(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read artifact: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_template(cfg, out_dir):
    T = build_template(cfg["template"])
    rng = make_rng(cfg["seed"])
    from .geometry import sample_feasible_parameters

    zs = [T.z_ref] + list(sample_feasible_parameters(T, 4, rng))
    reports = [validate_template(T, z, method="hull") for z in zs]
    passed = all(r["passed"] for r in reports)
    out = Output(out_dir, cfg, {"template": T.fingerprint()})
    out.json("template.json", {"template": T.to_dict()})
    counts = {"f1": T.f1, "f2": T.f2, "v": T.v, "e": T.e}
    out.json("validation.json", {"counts": counts, "reference_counts_f1_48": {"f2": 265, "v": 576, "e": 840},
                                 "samples": reports, "passed": passed})
    out.commit()
    print(json.dumps({"counts": counts, "passed": passed}))
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_synth(cfg, out_dir):
    T = build_template(cfg["template"])
    model = model_from_config(cfg["model"])
    sc = cfg["synth"]
    opts = SLPOptions.from_dict(sc.get("slp", {}))
    start = None
    if sc.get("start"):
        start = CLFArtifact.load(sc["start"]).point(SynthesisProblem(T, model))
    out = Output(out_dir, cfg, {"template": T.fingerprint(), "model": model.fingerprint()})
    code = EXIT_OK
    try:
        art = two_stage_solve(T, model, omega=sc.get("omega"), options=opts,
                              shrink=sc.get("shrink", 0.9), stage=sc.get("stage", "both"),
                              start=start, init=sc.get("init", "quadratic"),
                              control_weight=sc.get("control_weight", 0.1))
    except SynthesisError as exc:
        logger.error("synthesis failed: %s", exc)
        if exc.best is None or getattr(exc, "problem", None) is None:
            out.json("failure.json", {"error": str(exc)})
            out.commit()
            return EXIT_NUMERICAL
        art = make_artifact(exc.problem, exc.best, {"status": str(exc), "trace": exc.trace})
        art.certified = False
        code = EXIT_NUMERICAL
    art.save(out.path("clf.json"))
    out.json("residuals.json", {"residuals": art.residuals, "status": "CERTIFIED" if art.certified
                                else "UNCERTIFIED", "d_star": art.d, "reference_d_star": 0.1})
    trace = art.solver.get("trace_tail", [])
    out.json("solver.json", {"solver": art.solver})
    out.csv("trace_tail.csv", ["iter", "merit", "objective", "violation", "radius", "penalty", "accepted"],
            [[t["iter"], t["merit"], t["objective"], t["violation"], t["radius"], t["penalty"],
              int(t["accepted"])] for t in trace])
    out.commit()
    print(json.dumps({"d_star": art.d, "certified": art.certified, "max_residual": art.residuals.get("max")}))
    if code == EXIT_OK and not art.certified:
        code = EXIT_NUMERICAL
    return code


def run_checks(art, vc, seed=0):
    """All verification checks; returns ``(summary, extras)``."""
    pol = Policy.from_artifact(art)
    checks = set(vc.get("checks", DEFAULTS["verify"]["checks"]))
    out = {}
    extras = {}
    if "vertex" in checks:
        rep = V.check_vertex_conditions(art)
        extras["slacks"] = rep.pop("slacks")
        out["vertex"] = rep
    if "dissipation" in checks:
        out["dissipation"] = V.check_dissipation_sampled(art, vc.get("samples", 10_000), vc.get("u_grid", 21),
                                                         seed=seed, policy=pol)
    if "ergodic" in checks:
        vi = vc.get("value_iteration", {})
        grid = V.value_iteration(art.model, {"n": vi.get("n", 41)}, vi.get("K", 50), vi.get("u_grid", 41))
        out["ergodic"] = V.check_ergodic_bound(grid, art)
        extras["value_grid"] = grid
    if "invariance" in checks:
        out["invariance"] = V.check_invariance(art, pol, vc.get("rollouts", 100), vc.get("horizon", 2000),
                                               seed=seed)
    if "convexity" in checks:
        gap = V.convexity_violation(pol, seed=seed)
        out["convexity"] = {"max_violation": gap, "passed": gap <= 1e-8}
    if "continuity" in checks:
        gap, n = V.boundary_continuity(pol, seed=seed)
        out["continuity"] = {"max_jump": gap, "edges": n, "passed": gap <= 1e-7}
    out["all_passed"] = all(v["passed"] for v in out.values() if isinstance(v, dict))
    return out, extras


def cmd_verify(cfg, out_dir):
    art = load_artifact(cfg)
    out = Output(out_dir, cfg, art.fingerprints)
    summary, extras = run_checks(art, cfg["verify"], seed=cfg["seed"])
    out.json("verify.json", {"checks": summary, "d_star": art.d})
    if "slacks" in extras:
        x = art.vertex_positions()
        out.csv("vertex_slacks.csv", ["vertex", "x1", "x2", "slack"],
                [[i, *x[i], s] for i, s in enumerate(extras["slacks"])])
    if "value_grid" in extras:
        extras["value_grid"].write_csv(out.path("value_iteration.csv"), stride=10, header_comment=out.header())
    out.commit()
    print(json.dumps({k: v["passed"] for k, v in summary.items() if isinstance(v, dict)}))
    return EXIT_OK if summary["all_passed"] else EXIT_VERIFY


def cmd_simulate(cfg, out_dir):
    art = load_artifact(cfg)
    pol = Policy.from_artifact(art)
    sc = cfg["simulate"]
    if sc.get("mode", "vertex-random") not in MODES:
        raise UsageError(f"unknown disturbance mode {sc['mode']!r}")
    if sc.get("starts"):
        starts = np.asarray(sc["starts"], dtype=float)
    else:
        starts = pol.sample_domain(int(sc.get("rollouts", 10)), make_rng(cfg["seed"]))
    summary, trajs = batch_rollout(art.model, pol, starts, int(sc.get("horizon", 500)),
                                   sc.get("mode", "vertex-random"), cfg["seed"])
    out = Output(out_dir, cfg, art.fingerprints)
    out.json("summary.json", {"summary": summary,
                              "average_costs": [t.average_cost for t in trajs], "d_star": art.d})
    for k, t in enumerate(trajs):
        t.write_csv(out.path(f"trajectory_{k:03d}.csv"), header_comment=out.header())
    out.commit()
    print(json.dumps(summary))
    return EXIT_OK if summary["violations"] == 0 else EXIT_VERIFY


def cmd_plotdata(cfg, out_dir):
    art = load_artifact(cfg)
    pol = Policy.from_artifact(art)
    pc = cfg["plotdata"]
    out = Output(out_dir, cfg, art.fingerprints)
    lo, hi = pol.domain_box()
    n = int(pc.get("grid", 81))
    g1, g2 = np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)
    X1, X2 = np.meshgrid(g1, g2, indexing="ij")
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    inside = pol.in_domain(pts)
    Mv = pol.M(pts)
    mu = np.full(len(pts), np.nan)
    if inside.any():
        mu[inside] = pol.feedback_batch(pts[inside])[:, 0]
    # surface samples plus the exact values at the template vertices
    xv = pol.positions
    Mvert = pol.M(xv)
    rows_M = [[a, b, m, 0] for (a, b), m, ok in zip(pts, Mv, inside) if ok]
    rows_M += [[a, b, m, 1] for (a, b), m in zip(xv, Mvert)]
    out.csv("fig1_M_surface.csv", ["x1", "x2", "M", "is_vertex"], rows_M)
    rows_mu = [[a, b, m] for (a, b), m, ok in zip(pts, mu, inside) if ok]
    rows_mu += [[a, b, float(np.clip(u[0], pol.U_lo[0], pol.U_hi[0]))] for (a, b), u in zip(xv, pol.u)]
    out.csv("fig3_mu_surface.csv", ["x1", "x2", "mu"], rows_mu)
    poly_rows = []
    for r, reg in enumerate(pol.regions):
        for k, i in enumerate(reg):
            poly_rows.append([r, k, int(i), *pol.positions[i]])
    out.csv("fig2_regions.csv", ["region", "order", "vertex", "x1", "x2"], poly_rows)
    nb = int(pc.get("boundary_points", 256))
    th = np.linspace(0, 2 * np.pi, nb, endpoint=False)
    X = art.model.X
    if hasattr(X, "radius"):
        bpts = X.radius * np.column_stack([np.cos(th), np.sin(th)])
    else:
        bpts = _polytope_boundary(X, th)
    out.csv("fig2_X_boundary.csv", ["x1", "x2"], bpts.tolist())
    ntr = int(pc.get("trajectories", 5))
    starts = pol.sample_domain(ntr, make_rng(cfg["seed"])) if ntr else np.zeros((0, 2))
    _, trajs = batch_rollout(art.model, pol, starts, int(pc.get("horizon", 400)), "vertex-random", cfg["seed"])
    rows_t = []
    for k, t in enumerate(trajs):
        for j, x in enumerate(t.x):
            rows_t.append([k, j, *x, int(t.region[j])])
    out.csv("fig2_trajectories.csv", ["trajectory", "k", "x1", "x2", "region"], rows_t)
    out.json("plotdata.json", {"regions": pol.n_regions, "grid": n, "trajectories": ntr})
    out.commit()
    print(json.dumps({"regions": pol.n_regions}))
    return EXIT_OK


def _polytope_boundary(X, th):
    A, b = np.asarray(X.A), np.asarray(X.b)
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    with np.errstate(divide="ignore"):
        t = np.where(dirs @ A.T > 0, b[None, :] / (dirs @ A.T), np.inf).min(axis=1)
    return dirs * t[:, None]


def cmd_eval(cfg, out_dir):
    if cfg.get("policy"):
        pol = import_policy(cfg["policy"])
        fps = {"template": pol.T.fingerprint(), "policy": pol.fingerprint()}
    else:
        art = load_artifact(cfg)
        pol = Policy.from_artifact(art)
        fps = art.fingerprints
    pts = np.asarray(cfg["eval"].get("points", []), dtype=float).reshape(-1, pol.T.n_x)
    rows = []
    for x in pts:
        r = int(pol.locate_regions(x[None, :])[0])
        if r < 0:
            rows.append({"x": x.tolist(), "in_domain": False})
            continue
        rows.append({"x": x.tolist(), "in_domain": True, "region": r, "M": float(pol.M(x[None, :])[0]),
                     "mu": pol.feedback(x).tolist()})
    out = Output(out_dir, cfg, fps)
    out.json("eval.json", {"points": rows})
    out.commit()
    print(json.dumps(rows))
    return EXIT_OK if all(r["in_domain"] for r in rows) else EXIT_NUMERICAL


def cmd_export(cfg, out_dir):
    art = load_artifact(cfg)
    pol = Policy.from_artifact(art)
    out = Output(out_dir, cfg, art.fingerprints)
    export_policy(pol, out.path("policy.json"))
    gamma_hat, sigma_hat = estimate_nonlinearity(art.model, 10_000, seed=cfg["seed"])
    out.json("export.json", {"regions": pol.n_regions, "vertices": int(pol.T.v),
                             "policy_fingerprint": pol.fingerprint(),
                             "gamma_hat": gamma_hat, "sigma_hat": sigma_hat,
                             "gamma_declared": art.model.gamma, "sigma_declared": art.model.sigma})
    out.commit()
    print(json.dumps({"policy": pol.fingerprint(), "regions": pol.n_regions}))
    return EXIT_OK


COMMANDS = {
    "template": cmd_template, "synth": cmd_synth, "verify": cmd_verify, "simulate": cmd_simulate,
    "plotdata": cmd_plotdata, "eval": cmd_eval, "export": cmd_export,
}


def build_parser():
    p = argparse.ArgumentParser(prog="pwaclf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON configuration file")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default=f"out/{name}", help="output directory")
        s.add_argument("--scale", choices=sorted(SCALES), help="bundled template size")
        s.add_argument("--artifact", help="CLF artifact (clf.json)")
        s.add_argument("-v", "--verbose", action="count", default=0)
        if name == "synth":
            s.add_argument("--stage", choices=["1", "2", "both"])
            s.add_argument("--omega", type=float, help="weight of the combined single-run objective")
        if name == "eval":
            s.add_argument("--policy", help="exported policy JSON")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args.out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SynthesisError, LPError, PolicyError, ModelError, TemplateError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
