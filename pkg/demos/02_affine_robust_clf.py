"""A stabilizable linear system: the drift drops to zero.

For a sampled double integrator with a small disturbance box and no stage
cost, the optimal drift d* is zero, so M is a robust control Lyapunov
function on its domain. The vertex conditions are rechecked from scratch.
"""

import logging

from pwaclf import geometry as g
from pwaclf import model as m
from pwaclf import synthesis as S
from pwaclf import verify as V
from pwaclf.policy import Policy

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

model = m.affine_demo(W_radius=0.002, cost_weight=0.0)
art = S.two_stage_solve(g.ring_template("desk"), model)
rep = V.check_vertex_conditions(art)
print(f"d* = {art.d:.2e}, certified = {art.certified}, vertex min slack = {rep['min_slack']:.2e}")

pol = Policy.from_artifact(art)
print("domain covers", round(100 * V.domain_area_fraction(pol, model, 50_000), 1), "% of X")
print("mu(0.3, -0.2) =", pol.feedback([0.3, -0.2]))
