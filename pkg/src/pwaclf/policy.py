"""Evaluation of the PWA function ``M_z`` and of the explicit feedback law.

The partition of the domain consists of the projections of the lower facets
of the epigraph polyhedron; a point belongs to the region(s) whose lower facet
attains the maximum in ``M_z``. Inside a region the feedback interpolates the
vertex controls with barycentric weights of a triangulation of the region
polygon around its vertex centroid, which makes the law continuous and piecewise
affine.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .geometry import Template, TemplateError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DOMAIN_TOL = 1e-9
TIE_TOL = 1e-9


class PolicyError(ValueError):
    pass


def eval_M_raw(G1, G2, h2, z, x, tol=DOMAIN_TOL):
    """``M_z(x)`` for a batch of points; ``inf`` outside ``{G1 x <= z1}``."""
    x = np.asarray(x, dtype=float)
    f1 = len(G1)
    vals = (z[f1:] - x @ G2.T) / h2
    M = vals.max(axis=-1)
    outside = np.any(x @ G1.T - z[:f1] > tol, axis=-1)
    return np.where(outside, np.inf, M)


def eval_M(artifact, x, tol=DOMAIN_TOL):
    """``M_{z*}(x)`` of an artifact (or of a ``(template, z)`` pair)."""
    if isinstance(artifact, tuple):
        T, z = artifact
    else:
        T, z = artifact.template, artifact.z
    return eval_M_raw(T.G1, T.G2, T.h2, np.asarray(z, dtype=float), x, tol)


class Policy:
    """Explicit PWA feedback ``mu(x) = sum_i theta_i(x) u_i`` on ``dom(M_z)``."""

    def __init__(self, template, z, u, U_lo, U_hi, meta=None):
        self.T = template
        self.z = np.asarray(z, dtype=float)
        self.u = np.asarray(u, dtype=float).reshape(template.v, -1)
        self.U_lo = np.atleast_1d(np.asarray(U_lo, dtype=float))
        self.U_hi = np.atleast_1d(np.asarray(U_hi, dtype=float))
        self.meta = dict(meta or {})
        self.positions = template.vertex_positions(self.z)
        self.regions = [np.asarray(r, dtype=np.intp) for r in template.facet_vertices]
        self._build_triangles()

    @classmethod
    def from_artifact(cls, artifact):
        U = artifact.model.U
        return cls(artifact.template, artifact.z, artifact.u, U.lo, U.hi,
                   meta={"model": artifact.model.fingerprint(), "d_star": artifact.d})

    def with_domain_scaled(self, factor):
        """Copy whose domain offsets ``z_1`` are scaled by ``factor``.

        The lower facets, vertex positions and controls are kept, so ``M``
        and ``mu`` are unchanged wherever the smaller domain still contains
        the point. Used to build counterexamples; the copy is generally not
        invariant.
        """
        out = copy.copy(self)
        out.z = self.z.copy()
        out.z[: self.T.f1] *= float(factor)
        out.meta = {**self.meta, "domain_scale": float(factor)}
        return out

    # -- geometry ----------------------------------------------------------

    @property
    def n_regions(self):
        return len(self.regions)

    def _build_triangles(self):
        """Triangles joining the vertex centroid to every region edge.

        Each polygon edge ``(k, k+1)`` is an edge of exactly one triangle, so
        two regions sharing an edge interpolate along it with the same two
        vertices even when the synthesis has collapsed other edges of the
        polygon to zero length. The centroid's weight is spread evenly over
        the region's vertices.
        """
        n_x = self.T.n_x
        self._tri = []
        for reg in self.regions:
            tris, invs = [], []
            P = self.positions[reg]
            c = P.mean(axis=0) if len(reg) else np.zeros(n_x)
            if n_x == 2 and len(reg) >= 3:
                scale = max(1.0, float(np.abs(P).max()))
                m = len(reg)
                for k in range(m):
                    A = np.column_stack([P[k] - c, P[(k + 1) % m] - c])
                    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
                    if abs(det) <= 1e-10 * scale * scale:  # collapsed edge
                        continue
                    tris.append((k, (k + 1) % m))
                    invs.append(np.linalg.inv(A))
            self._tri.append((c, np.array(tris, dtype=np.intp).reshape(-1, 2),
                              np.array(invs).reshape(-1, n_x, n_x)))

    def region_polygon(self, r):
        return self.positions[self.regions[r]]

    def M(self, x):
        return eval_M_raw(self.T.G1, self.T.G2, self.T.h2, self.z, x)

    def in_domain(self, x, tol=DOMAIN_TOL):
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.T.G1.T - self.z[: self.T.f1] <= tol, axis=-1)

    def domain_box(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def sample_domain(self, n, rng):
        """Uniform samples of ``dom(M_z)`` by rejection from its bounding box."""
        lo, hi = self.domain_box()
        out = np.zeros((0, self.T.n_x))
        misses = 0
        while len(out) < n:
            cand = rng.uniform(lo, hi, size=(2 * n + 16, self.T.n_x))
            keep = cand[self.in_domain(cand, tol=0.0)]
            misses = 0 if len(keep) else misses + 1
            if misses >= 100:
                raise PolicyError("domain has no interior inside its vertex bounding box")
            out = np.vstack([out, keep])
        return out[:n]

    # -- evaluation ----------------------------------------------------------

    def locate_regions(self, x):
        """Vectorized region lookup; ``-1`` marks points outside the domain."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        f1 = self.T.f1
        vals = (self.z[f1:] - x @ self.T.G2.T) / self.T.h2
        M = vals.max(axis=1)
        tie = vals >= (M - TIE_TOL * (1.0 + np.abs(M)))[:, None]
        idx = np.argmax(tie, axis=1)
        idx[~self.in_domain(x)] = -1
        return idx

    def locate_region(self, x):
        r = int(self.locate_regions(np.asarray(x, dtype=float)[None, :])[0])
        if r < 0:
            raise PolicyError("out of domain")
        return r

    def _weights_batch(self, r, X):
        """Barycentric weights of points ``X`` (all in region ``r``)."""
        reg = self.regions[r]
        P = self.positions[reg]
        c, tris, invs = self._tri[r]
        theta = np.zeros((len(X), len(reg)))
        if len(tris) == 0:
            for k, x in enumerate(X):
                theta[k] = _simplex_lsq(P, x)
            return theta
        # barycentric coordinates (centroid, k, k+1) in every triangle
        lam = np.einsum("tij,nj->nti", invs, X - c)
        bary = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        best = np.argmax(bary.min(axis=2), axis=1)
        b = bary[np.arange(len(X)), best]
        ok = b.min(axis=1) >= -1e-9
        b = np.clip(b, 0.0, None)
        b /= b.sum(axis=1, keepdims=True)
        rows = np.arange(len(X))
        theta += b[:, :1] / len(reg)
        np.add.at(theta, (rows, tris[best, 0]), b[:, 1])
        np.add.at(theta, (rows, tris[best, 1]), b[:, 2])
        for k in np.flatnonzero(~ok):
            theta[k] = _simplex_lsq(P, X[k])
        return theta

    def interpolation_weights(self, r, x):
        """Weights over the vertices ``self.regions[r]`` reproducing ``x``."""
        x = np.asarray(x, dtype=float)
        theta = self._weights_batch(r, x[None, :])[0]
        err = np.abs(theta @ self.positions[self.regions[r]] - x).max()
        if err > 1e-6:
            raise PolicyError("weight failure")
        return theta

    def feedback_batch(self, x):
        """``mu`` for a batch; raises ``PolicyError`` if any point is outside."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        reg = self.locate_regions(x)
        if np.any(reg < 0):
            raise PolicyError("out of domain")
        out = np.zeros((len(x), self.u.shape[1]))
        for r in np.unique(reg):
            sel = np.flatnonzero(reg == r)
            theta = self._weights_batch(r, x[sel])
            err = np.abs(theta @ self.positions[self.regions[r]] - x[sel]).max()
            if err > 1e-6:
                raise PolicyError("weight failure")
            out[sel] = theta @ self.u[self.regions[r]]
        return np.clip(out, self.U_lo, self.U_hi)

    def feedback(self, x):
        return self.feedback_batch(np.asarray(x, dtype=float)[None, :])[0]

    # -- serialization ---------------------------------------------------

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.z, self.u, self.U_lo, self.U_hi):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "fingerprints": {"template": self.T.fingerprint(), "policy": self.fingerprint()},
            "z": self.z.tolist(),
            "u": self.u.tolist(),
            "U": {"lo": self.U_lo.tolist(), "hi": self.U_hi.tolist()},
            "regions": [r.tolist() for r in self.regions],
            "vertex_positions": self.positions.tolist(),
            "meta": self.meta,
            "template": self.T.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != FORMAT_VERSION:
            raise PolicyError(f"unsupported version {data.get('version')!r}")
        try:
            T = Template.from_dict(data["template"])
        except TemplateError as exc:
            raise PolicyError("incompatible artifact") from exc
        pol = cls(T, data["z"], data["u"], data["U"]["lo"], data["U"]["hi"], data.get("meta"))
        fp = data.get("fingerprints", {})
        if fp.get("template") != T.fingerprint() or fp.get("policy") != pol.fingerprint():
            raise PolicyError("incompatible artifact")
        return pol


def export_policy(policy, path):
    Path(path).write_text(json.dumps(policy.to_dict(), sort_keys=True))


def import_policy(path):
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8", errors="replace")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise PolicyError(f"parse error at byte {offset}: {exc.msg}") from None
    return Policy.from_dict(data)


def _simplex_lsq(P, x, weight=1e6):
    """``min |P^T theta - x|`` over the probability simplex (Lawson-Hanson NNLS).

    The equality ``sum(theta) = 1`` is imposed as a heavily weighted extra row.
    """
    A = np.vstack([P.T, weight * np.ones(len(P))])
    b = np.concatenate([x, [weight]])
    theta, _ = nnls(A, b)
    s = theta.sum()
    return theta / s if s > 0 else np.full(len(P), 1.0 / len(P))
