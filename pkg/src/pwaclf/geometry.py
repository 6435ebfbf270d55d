"""Configuration-constrained polyhedral templates.

A template fixes the facet normals of a family of polyhedra

    P(z) = {(x, y) : G1 x <= z1, G2 x + h2 y <= z2}

together with the vertex-facet incidence pattern. For every parameter ``z``
with ``E z <= 0`` the vertices of ``P(z)`` are the points
``(V_i z, s_i^T z)``, so both representations are linear in ``z``. Since all
entries of ``h2`` are negative, ``P(z)`` is the epigraph of a convex
piecewise affine function whose domain is the polytope ``G1 x <= z1``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, QhullError

from . import lp as _lp

logger = logging.getLogger(__name__)

EPS_H = 1e-6
HULL_TOL = 1e-9
COND_MAX = 1e12
FORMAT_VERSION = 1


class TemplateError(ValueError):
    """Raised when a template cannot be built or loaded."""


@dataclass(frozen=True)
class Facet:
    """Unit normal of a lifted facet; ``kind`` is ``"domain"`` or ``"lower"``."""

    normal: np.ndarray
    kind: str

    def __post_init__(self):
        nrm = np.linalg.norm(self.normal)
        if abs(nrm - 1.0) > 1e-12:
            raise TemplateError("facet normal must have unit norm")
        if self.kind == "domain" and self.normal[-1] != 0.0:
            raise TemplateError("domain facet must be vertical")
        if self.kind == "lower" and self.normal[-1] > -EPS_H:
            raise TemplateError("non-lower facet")
        if self.kind not in ("domain", "lower"):
            raise TemplateError(f"unknown facet kind {self.kind!r}")


# ---------------------------------------------------------------------------
# elementary geometry


def polygon_directions(k):
    """Return ``k`` unit rows ``(cos 2 pi j/k, sin 2 pi j/k)``."""
    if k < 3:
        raise TemplateError("insufficient directions")
    ang = 2.0 * np.pi * np.arange(k) / k
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    dirs[np.abs(dirs) < 1e-15] = 0.0
    return dirs


def convex_hull(points, tol=HULL_TOL):
    """Facets of the convex hull of a 2-D or 3-D point cloud.

    Returns a list of ``(normal, offset, incident)`` tuples with unit
    ``normal`` such that ``normal @ p <= offset`` for all input points and
    ``incident`` the indices of points lying on the facet. Coplanar simplices
    reported by Qhull are merged into one facet.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ValueError("convex_hull expects points in 2 or 3 dimensions")
    m, n = pts.shape
    scale = max(1.0, float(np.abs(pts).max()))
    if m < n + 1 or np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-10 * scale) < n:
        raise TemplateError("degenerate point set")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise TemplateError("degenerate point set") from exc
    facets = {}
    for eq in hull.equations:
        normal = eq[:-1] / np.linalg.norm(eq[:-1])
        offset = -eq[-1] / np.linalg.norm(eq[:-1])
        incident = np.flatnonzero(np.abs(pts @ normal - offset) <= tol * scale)
        key = tuple(incident)
        if key not in facets:
            # refit the plane on all incident points for consistency
            facets[key] = (normal, float(offset), incident)
    return [facets[k] for k in sorted(facets)]


def _unique_rows(points, tol):
    """Cluster points closer than ``tol`` (in max-norm); returns representatives."""
    if len(points) == 0:
        return points
    order = np.lexsort(points.T[::-1])
    pts = points[order]
    keep = []
    for p in pts:
        if not any(np.max(np.abs(p - q)) <= tol for q in keep[-64:]):
            if not any(np.max(np.abs(p - q)) <= tol for q in keep):
                keep.append(p)
    return np.array(keep)


def enumerate_vertices_bruteforce(A, z, tol=1e-9, chunk=200_000):
    """All vertices of ``{p : A p <= z}`` by solving every ``n``-row subsystem.

    Intended as an independent oracle; the cost grows like ``C(m, n)``.
    """
    A = np.asarray(A, dtype=float)
    z = np.asarray(z, dtype=float)
    m, n = A.shape
    scale = 1.0 + np.abs(z).max()
    found = []
    combos = itertools.combinations(range(m), n)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.intp)
        if block.size == 0:
            break
        M = A[block]
        det = np.linalg.det(M)
        good = np.abs(det) > 1e-10
        if not good.any():
            continue
        M = M[good]
        rhs = z[block[good]]
        p = np.linalg.solve(M, rhs[..., None])[..., 0]
        feas = np.all(p @ A.T <= z + tol * scale, axis=1)
        if feas.any():
            found.append(p[feas])
    if not found:
        return np.zeros((0, n))
    return _unique_rows(np.vstack(found), 1e3 * tol * scale)


def _chebyshev_center(A, b):
    """Center of the largest ball inside ``{A p <= b}`` (rows of ``A`` unit)."""
    m, n = A.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    Aub = np.hstack([A, np.ones((m, 1))])
    lo = np.full(n + 1, -np.inf)
    hi = np.full(n + 1, np.inf)
    lo[-1] = 0.0
    res = _lp.solve_lp(_lp.LinearProgram.from_inequalities(c, Aub, b, lo=lo, hi=hi))
    if res.status != "optimal" or res.x[-1] <= 0:
        raise TemplateError("polyhedron has empty interior")
    return res.x[:n], res.x[-1]


def enumerate_vertices_hull(A, z, tol=HULL_TOL):
    """Vertices of the epigraph-type polyhedron ``{A p <= z}`` via polar duality.

    The polyhedron is capped by ``p_n <= top`` to make it bounded; vertices on
    the cap are discarded. The cap height is raised until it no longer cuts
    through lower facets.
    """
    A = np.asarray(A, dtype=float)
    z = np.asarray(z, dtype=float)
    m, n = A.shape
    lower = A[:, -1] < 0
    top = 10.0 * (1.0 + np.abs(z).max())
    for _ in range(30):
        Acap = np.vstack([A, np.eye(n)[-1]])
        zcap = np.append(z, top)
        center, radius = _chebyshev_center(Acap, zcap)
        slack = zcap - Acap @ center
        dual = Acap / slack[:, None]
        facets = convex_hull(dual, tol=tol)
        verts = np.array([center + normal / offset for normal, offset, _ in facets])
        scale = 1.0 + np.abs(zcap).max()
        act = np.abs(verts @ Acap.T - zcap) <= 1e-8 * scale
        on_cap = act[:, -1]
        cuts = on_cap & np.any(act[:, :-1] & lower, axis=1)
        if not cuts.any():
            pts = verts[~on_cap]
            return _unique_rows(pts, 1e-10 * scale)
        top *= 4.0
    raise TemplateError("could not bound polyhedron")


# ---------------------------------------------------------------------------
# the template


@dataclass
class Template:
    """Configuration template ``(G1, G2, h2, V_i, s_i, E, N_i)``.

    Vertex maps are stored compactly: vertex ``i`` is ``Ainv[i] @ z[active[i]]``
    where ``Ainv[i]`` inverts the stacked active facet normals. The dense
    ``V`` and ``s`` arrays are derived on demand.
    """

    G1: np.ndarray
    G2: np.ndarray
    h2: np.ndarray
    active: np.ndarray
    Ainv: np.ndarray
    E: sp.csr_matrix
    adjacency: list
    facet_vertices: list
    z_ref: np.ndarray
    edges: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_x(self):
        return self.G1.shape[1]

    @property
    def n(self):
        return self.n_x + 1

    @property
    def f1(self):
        return self.G1.shape[0]

    @property
    def f2(self):
        return self.G2.shape[0]

    @property
    def f(self):
        return self.f1 + self.f2

    @property
    def v(self):
        return self.active.shape[0]

    @property
    def e(self):
        return self.E.shape[0]

    @property
    def G(self):
        """Stacked state part of all facet normals, ``[G1; G2]``."""
        return np.vstack([self.G1, self.G2])

    @property
    def h(self):
        """Height coefficients ``[0; h2]``."""
        return np.concatenate([np.zeros(self.f1), self.h2])

    @property
    def normals(self):
        return np.hstack([self.G, self.h[:, None]])

    @property
    def V(self):
        """Dense vertex maps, shape ``(v, n_x, f)``."""
        out = np.zeros((self.v, self.n_x, self.f))
        rows = np.arange(self.v)[:, None]
        for r in range(self.n_x):
            out[rows, r, self.active] = self.Ainv[:, r, :]
        return out

    @property
    def s(self):
        """Dense height maps, shape ``(v, f)``."""
        out = np.zeros((self.v, self.f))
        out[np.arange(self.v)[:, None], self.active] = self.Ainv[:, -1, :]
        return out

    def vertices(self, z):
        """Lifted vertex coordinates ``(V_i z, s_i^T z)`` as a ``(v, n)`` array."""
        z = np.asarray(z, dtype=float)
        return np.einsum("ijk,ik->ij", self.Ainv, z[self.active])

    def vertex_positions(self, z):
        return self.vertices(z)[:, : self.n_x]

    def lower_adjacency_pairs(self):
        """Ordered pairs ``(i, j)`` with ``j`` in ``N_i``."""
        pairs = [(i, j) for i, nb in enumerate(self.adjacency) for j in nb]
        return np.array(pairs, dtype=np.intp).reshape(-1, 2)

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.G1, self.G2, self.h2, self.active, self.z_ref):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def summary(self):
        return {"n_x": self.n_x, "f1": self.f1, "f2": self.f2, "f": self.f,
                "v": self.v, "e": self.e}

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        V = self.V
        s = self.s
        coo = self.E.tocoo()
        return {
            "version": FORMAT_VERSION,
            "dimensions": self.summary(),
            "G1": self.G1.tolist(),
            "G2": self.G2.tolist(),
            "h2": self.h2.tolist(),
            "z_ref": self.z_ref.tolist(),
            "vertex_maps": [
                {"V": V[i].tolist(), "s": s[i].tolist(), "active_set": self.active[i].tolist()}
                for i in range(self.v)
            ],
            "E": {"shape": list(self.E.shape), "row": coo.row.tolist(),
                  "col": coo.col.tolist(), "val": coo.data.tolist()},
            "edges": self.edges.tolist(),
            "adjacency": [list(map(int, nb)) for nb in self.adjacency],
            "facet_vertices": [list(map(int, fv)) for fv in self.facet_vertices],
            "meta": self.meta,
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != FORMAT_VERSION:
            raise TemplateError(f"unsupported version {data.get('version')!r}")
        G1 = np.array(data["G1"], dtype=float)
        G2 = np.array(data["G2"], dtype=float).reshape(-1, G1.shape[1])
        h2 = np.array(data["h2"], dtype=float)
        active = np.array([vm["active_set"] for vm in data["vertex_maps"]], dtype=np.intp)
        V = np.array([vm["V"] for vm in data["vertex_maps"]], dtype=float)
        s = np.array([vm["s"] for vm in data["vertex_maps"]], dtype=float)
        rows = np.arange(len(active))[:, None]
        Ainv = np.concatenate(
            [V[rows, :, active].transpose(0, 2, 1), s[rows, active][:, None, :]], axis=1)
        Ed = data["E"]
        E = sp.csr_matrix((Ed["val"], (Ed["row"], Ed["col"])), shape=tuple(Ed["shape"]))
        tmpl = cls(G1=G1, G2=G2, h2=h2, active=active, Ainv=Ainv, E=E,
                   adjacency=[np.array(nb, dtype=np.intp) for nb in data["adjacency"]],
                   facet_vertices=[np.array(fv, dtype=np.intp) for fv in data["facet_vertices"]],
                   z_ref=np.array(data["z_ref"], dtype=float),
                   edges=np.array(data["edges"], dtype=np.intp).reshape(-1, 2),
                   meta=data.get("meta", {}))
        fp = data.get("fingerprint")
        if fp is not None and fp != tmpl.fingerprint():
            raise TemplateError("template fingerprint mismatch")
        return tmpl

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# construction


def _positively_spans(G1):
    """True iff ``G1 x <= 0`` forces ``x = 0``."""
    n_x = G1.shape[1]
    for k in range(n_x):
        for sign in (1.0, -1.0):
            c = np.zeros(n_x)
            c[k] = -sign
            prob = _lp.LinearProgram.from_inequalities(
                c, G1, np.zeros(len(G1)), lo=-np.ones(n_x), hi=np.ones(n_x))
            res = _lp.solve_lp(prob)
            if res.status != "optimal" or -res.objective > 1e-9:
                return False
    return True


def compute_vertex_maps(normals, active_sets):
    """Inverse active-normal matrices; vertex ``i`` is ``Ainv[i] @ z[active[i]]``.

    ``(V_i; s_i^T) = A_i^{-1} S_i`` with ``S_i`` selecting the active entries
    of ``z``. Raises ``TemplateError("degenerate vertex")`` when an active
    normal matrix is numerically singular.
    """
    normals = np.asarray(normals, dtype=float)
    active = np.asarray(active_sets, dtype=np.intp)
    n = normals.shape[1]
    if active.ndim != 2 or active.shape[1] != n:
        raise TemplateError("degenerate vertex")
    mats = normals[active]
    cond = np.linalg.cond(mats)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_MAX):
        raise TemplateError("degenerate vertex")
    return np.linalg.inv(mats)


def compute_edge_matrix(normals, active_sets, Ainv, mode="edges"):
    """Configuration constraints ``E z <= 0``.

    ``mode="edges"`` emits one row per bounded edge ``(i, j)`` of the
    polyhedron: vertex ``i`` must satisfy the single facet that is active at
    ``j`` but not at ``i``. ``mode="pairs"`` emits a row for every
    (vertex, non-active facet) pair. Rows are scaled to unit norm, zero rows
    dropped, duplicates merged. Returns ``(E, edges)``.
    """
    normals = np.asarray(normals, dtype=float)
    active = np.asarray(active_sets, dtype=np.intp)
    v, n = active.shape
    f = normals.shape[0]
    edges = []
    by_ridge = {}
    for i, act in enumerate(active):
        for ridge in itertools.combinations(sorted(act), n - 1):
            by_ridge.setdefault(ridge, []).append(i)
    for ridge, verts in sorted(by_ridge.items()):
        if len(verts) == 2:
            edges.append(tuple(sorted(verts)))
        elif len(verts) > 2:
            raise TemplateError("degenerate vertex")
    edges = np.array(sorted(edges), dtype=np.intp).reshape(-1, 2)

    if mode == "edges":
        pairs = []
        for i, j in edges:
            (k,) = set(active[j]) - set(active[i])
            pairs.append((i, k))
    elif mode == "pairs":
        pairs = [(i, k) for i in range(v) for k in range(f) if k not in set(active[i])]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    rows = []
    for i, k in pairs:
        r = np.zeros(f)
        r[active[i]] += normals[k] @ Ainv[i]
        r[k] -= 1.0
        r[np.abs(r) < 1e-14] = 0.0
        nrm = np.linalg.norm(r)
        if nrm > 1e-12:
            rows.append(r / nrm)
    if rows:
        R = np.unique(np.round(np.array(rows), 12), axis=0)
    else:
        R = np.zeros((0, f))
    return sp.csr_matrix(R), edges


def _order_ccw(points):
    c = points.mean(axis=0)
    ang = np.arctan2(points[:, 1] - c[1], points[:, 0] - c[0])
    return np.argsort(ang, kind="stable")


def template_from_facets(G1, G2, h2, z_ref, meta=None, edge_mode="edges", method="auto"):
    """Build a template from fixed facet normals and a reference parameter.

    Normals are rescaled to unit length (``z_ref`` accordingly). The vertex
    configuration realized by ``z_ref`` must be simple: every vertex lies on
    exactly ``n_x + 1`` facets and every facet is non-redundant.
    """
    G1 = np.atleast_2d(np.asarray(G1, dtype=float))
    G2 = np.atleast_2d(np.asarray(G2, dtype=float))
    h2 = np.asarray(h2, dtype=float).ravel()
    z_ref = np.asarray(z_ref, dtype=float).ravel()
    n_x = G1.shape[1]
    f1, f2 = len(G1), len(G2)
    if G2.shape[1] != n_x or len(h2) != f2 or len(z_ref) != f1 + f2:
        raise TemplateError("inconsistent template dimensions")

    N = np.vstack([np.hstack([G1, np.zeros((f1, 1))]), np.hstack([G2, h2[:, None]])])
    nrm = np.linalg.norm(N, axis=1)
    if np.any(nrm == 0):
        raise TemplateError("zero facet normal")
    N = N / nrm[:, None]
    z_ref = z_ref / nrm
    if np.any(N[f1:, -1] > -EPS_H):
        raise TemplateError("non-lower facet")
    if not _positively_spans(N[:f1, :n_x]):
        raise TemplateError("domain directions do not positively span")

    if method == "auto":
        method = "brute" if (f1 + f2) <= 40 else "hull"
    if method == "brute":
        pts = enumerate_vertices_bruteforce(N, z_ref)
    else:
        pts = enumerate_vertices_hull(N, z_ref)
    scale = 1.0 + np.abs(z_ref).max()
    act_mask = np.abs(pts @ N.T - z_ref) <= 1e-8 * scale
    counts = act_mask.sum(axis=1)
    if np.any(counts != n_x + 1):
        raise TemplateError("degenerate vertex")
    active = np.array([np.flatnonzero(r) for r in act_mask], dtype=np.intp)
    # canonical vertex order: lexicographic in the active sets
    order = np.lexsort(active.T[::-1])
    active = active[order]
    if not np.all(np.any(N[active][:, :, -1] < 0, axis=1)):
        raise TemplateError("vertex without lower facet")
    used = np.zeros(f1 + f2, dtype=bool)
    used[active.ravel()] = True
    if not used.all():
        raise TemplateError("redundant facet")

    Ainv = compute_vertex_maps(N, active)
    E, edges = compute_edge_matrix(N, active, Ainv, mode=edge_mode)

    lower_members = [np.flatnonzero(np.any(active == f1 + k, axis=1)) for k in range(f2)]
    adjacency = []
    for i in range(len(active)):
        nb = set()
        for k in active[i]:
            if k >= f1:
                nb.update(lower_members[k - f1].tolist())
        nb.discard(i)
        adjacency.append(np.array(sorted(nb), dtype=np.intp))

    verts = np.einsum("ijk,ik->ij", Ainv, z_ref[active])
    facet_vertices = []
    for k in range(f2):
        members = lower_members[k]
        if n_x == 2 and len(members) > 2:
            members = members[_order_ccw(verts[members, :2])]
        facet_vertices.append(members)

    tmpl = Template(G1=N[:f1, :n_x], G2=N[f1:, :n_x], h2=N[f1:, -1], active=active,
                    Ainv=Ainv, E=E, adjacency=adjacency, facet_vertices=facet_vertices,
                    z_ref=z_ref, edges=edges, meta=dict(meta or {}))
    viol = E @ z_ref
    if viol.size and viol.max() > -1e-12:
        logger.warning("reference configuration is degenerate (max E z_ref = %.3e)", viol.max())
    return tmpl


def build_template(domain_dirs, ref_points, domain_offset=1.0, meta=None, edge_mode="edges"):
    """Template whose lower facets are tangent planes of ``y = |x|^2``.

    Each reference point ``p`` contributes the lower facet
    ``2 p^T x - y <= |p|^2``; its region is the Voronoi cell of ``p`` clipped
    to the domain polytope ``domain_dirs x <= domain_offset``. The reference
    parameter is therefore the piecewise affine under-approximation of the
    paraboloid on the reference configuration.
    """
    D = np.atleast_2d(np.asarray(domain_dirs, dtype=float))
    P = np.atleast_2d(np.asarray(ref_points, dtype=float))
    if P.shape[1] != D.shape[1]:
        raise TemplateError("inconsistent template dimensions")
    Dn = D / np.linalg.norm(D, axis=1)[:, None]
    if np.any(P @ Dn.T >= domain_offset):
        raise TemplateError("reference point outside the domain")
    z_ref = np.concatenate([np.full(len(D), float(domain_offset)) * np.linalg.norm(D, axis=1),
                            np.sum(P**2, axis=1)])
    info = {"generator": "paraboloid-tangent", "f1": len(D), "n_ref": len(P),
            "domain_offset": float(domain_offset)}
    info.update(meta or {})
    return template_from_facets(D, 2.0 * P, -np.ones(len(P)), z_ref, meta=info,
                                edge_mode=edge_mode)


def ring_points(counts, radii, twist=0.137, seed=0, jitter=0.0):
    """Center point plus concentric rings of ``counts[k]`` points at ``radii[k]``.

    Consecutive rings are rotated by half a spacing plus ``twist * k`` of a
    spacing to avoid co-circular quadruples, which would produce non-simple
    vertices.
    """
    rng = np.random.default_rng(seed)
    pts = [np.zeros(2)]
    for k, (c, r) in enumerate(zip(counts, radii)):
        a = 2.0 * np.pi * (np.arange(c) + 0.5 * (k % 2) + twist * k) / c
        if jitter:
            a = a + jitter * rng.uniform(-1, 1, size=c) / c
        pts.extend(r * np.column_stack([np.cos(a), np.sin(a)]))
    return np.array(pts)


# Ring layouts used by the bundled generators. The paper-scale layout has
# 1 + 6 + 12 + ... + 48 + 48 = 265 reference points, which together with
# 48 domain directions gives f2 = 265, v = 576, e = 840.
RING_LAYOUTS = {
    "simplex": {"f1": 3, "counts": [], "radii": []},
    "desk": {"f1": 16, "counts": [12], "radii": [0.6]},
    "desk2": {"f1": 16, "counts": [6, 12], "radii": [0.36, 0.72]},
    "paper": {"f1": 48, "counts": [6 * k for k in range(1, 9)] + [48],
              "radii": list(np.round(np.arange(1, 9) * 0.105, 3)) + [0.93]},
}


def ring_template(name_or_f1="desk", counts=None, radii=None, radius=1.0, twist=0.137, seed=0):
    """Bundled 2-D generator: regular ``f1``-gon domain, ring reference cloud.

    ``radius`` is the inradius of the domain polygon; ring radii are given
    relative to it.
    """
    if isinstance(name_or_f1, str):
        layout = RING_LAYOUTS[name_or_f1]
        f1 = layout["f1"]
        counts = layout["counts"] if counts is None else counts
        radii = layout["radii"] if radii is None else radii
        name = name_or_f1
    else:
        f1 = int(name_or_f1)
        counts = list(counts or [])
        radii = list(radii or [])
        name = "custom"
    pts = radius * ring_points(counts, radii, twist=twist, seed=seed)
    meta = {"layout": name, "ring_counts": list(map(int, counts)),
            "ring_radii": [float(r) for r in radii], "radius": float(radius),
            "twist": float(twist), "seed": int(seed)}
    return build_template(polygon_directions(f1), pts, domain_offset=radius, meta=meta)


# ---------------------------------------------------------------------------
# validation


def hausdorff(A, B):
    if len(A) == 0 or len(B) == 0:
        return np.inf if len(A) != len(B) else 0.0
    D = np.max(np.abs(A[:, None, :] - B[None, :, :]), axis=2)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def validate_template(T, z, tol=1e-7, method="brute"):
    """Check ``E z <= 0`` and compare parameterized against enumerated vertices.

    Returns a dict with keys ``edge_ok``, ``max_Ez``, ``mismatch``,
    ``n_hrep_vertices`` and ``passed``. The vertex comparison is skipped when
    the configuration constraint fails.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (T.f,):
        raise TemplateError("parameter has wrong length")
    Ez = T.E @ z
    max_Ez = float(Ez.max()) if Ez.size else 0.0
    report = {"edge_ok": max_Ez <= 1e-10 * (1 + np.abs(z).max()), "max_Ez": max_Ez,
              "mismatch": None, "n_hrep_vertices": None, "passed": False}
    if not report["edge_ok"]:
        return report
    N = T.normals
    if method == "brute":
        ref = enumerate_vertices_bruteforce(N, z)
    else:
        ref = enumerate_vertices_hull(N, z)
    mine = T.vertices(z)
    report["n_hrep_vertices"] = int(len(ref))
    report["mismatch"] = hausdorff(mine, ref)
    report["passed"] = report["mismatch"] < tol
    return report


def sample_feasible_parameters(T, count, rng, scale=0.3, boundary_fraction=0.1):
    """Random parameters with ``E z <= 0`` near ``z_ref``.

    Each sample perturbs ``z_ref`` by a random translation of the whole
    polyhedron, a random positive scaling and a random direction ``delta``;
    the step along ``delta`` is shrunk to stay inside ``E z <= 0``. A fraction
    of the samples is placed on the boundary, where edges collapse.
    """
    N = T.normals
    E = T.E.toarray()
    out = []
    zscale = np.abs(T.z_ref).max()
    while len(out) < count:
        base = T.z_ref * rng.uniform(0.5, 2.0) + N @ (0.1 * zscale * rng.normal(size=T.n))
        delta = scale * zscale * rng.normal(size=T.f)
        Eb = E @ base
        Ed = E @ delta
        with np.errstate(divide="ignore", invalid="ignore"):
            lim = np.where(Ed > 0, -Eb / Ed, np.inf)
        tmax = min(1.0, float(lim.min())) if lim.size else 1.0
        if rng.uniform() < boundary_fraction and np.isfinite(lim.min()) and lim.min() <= 1.0:
            t = tmax
        else:
            t = rng.uniform(0.0, 1.0) * tmax
        out.append(base + t * delta)
    return np.array(out)
