"""Configuration-constrained templates: counts, vertex maps and a sanity check.

A template fixes the facet normals of a polyhedron in R^3 (the epigraph of a
piecewise affine function of x in R^2). Its vertices are linear in the facet
offsets z as long as E z <= 0, so the whole geometry of M_z is available in
closed form. This script builds the bundled layouts, prints their counts and
checks the closed-form vertices against an independent enumeration.
"""

import numpy as np

from pwaclf import geometry as g

for layout in ("simplex", "desk", "paper"):
    T = g.ring_template(layout)
    print(f"{layout:8s} f1={T.f1:3d} f2={T.f2:4d} v={T.v:4d} e={T.e:4d} "
          f"(E has {T.E.shape[0]} rows)")

T = g.ring_template("desk")
rng = np.random.default_rng(0)
Z = g.sample_feasible_parameters(T, 50, rng)
worst = max(g.validate_template(T, z)["mismatch"] for z in Z)
print(f"desk: 50 random parameters with E z <= 0, worst vertex mismatch {worst:.1e}")

# vertex positions scale with z: the template is a cone of polyhedra
x = T.vertex_positions(T.z_ref)
print("reference domain radius", np.linalg.norm(x, axis=1).max().round(3),
      "half-scaled", np.linalg.norm(T.vertex_positions(0.5 * T.z_ref), axis=1).max().round(3))
