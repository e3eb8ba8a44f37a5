"""How big is each follower's tube, and why the reference gains cannot give one.

Run:  python demos/01_tubes.py
"""
import warnings

import numpy as np

from tubecbf import TubeInfeasibleError, preset, synthesize_tubes
from tubecbf.tube import best_decay_margin, closed_loop, gains_from_vector
from tubecbf.verify import rpi_monte_carlo

warnings.filterwarnings("ignore", module="cvxpy")

# The preset reads the flat gain vector (15, 4, 15, 8, 6, 8) as two companion
# polynomials, one per axis.  Both are Hurwitz, but slowly so.
K = gains_from_vector((15, 4, 15, 8, 6, 8), 3, 2)
A_K = closed_loop(K, 3, 2)
print("closed-loop eigenvalues:", np.round(np.linalg.eigvals(A_K), 4))

# A closed-form tube needs lmin(Q) / (2 lmax(P)) > L_f.  Even the best Q
# (found by a small SDP) leaves a decay margin far below the drift's Lipschitz
# bound, so the preset built on these gains reports the gap instead of a tube.
best, _, _ = best_decay_margin(A_K)
print(f"best attainable decay margin: {best:.4f}")
try:
    synthesize_tubes(preset("paper-5agent-gains"))
except TubeInfeasibleError as exc:
    print(f"tube-infeasible: margin {exc.decay_margin:.4f} vs L_f {exc.lipschitz:.2f} "
          f"(gap {exc.gap:.2f})")

# The default preset places fast triple poles instead and certifies each tube
# with an S-procedure inequality.  The radii below are what the planner
# subtracts from its barrier constraints.
cfg = preset("paper-5agent")
tubes = synthesize_tubes(cfg)
for i, tb in enumerate(tubes):
    extent = tb.rho * np.sqrt(np.linalg.inv(tb.P)[:2, :2].diagonal())
    print(f"follower {i + 1}: L_f = {tb.L_f:7.2f}, w_bar = {tb.w_bar:.3f}, "
          f"position half-widths {extent[0]:.2e}, {extent[1]:.2e} m")

# Monte Carlo check of invariance: start on the boundary, push with the worst
# disturbance direction, and watch V(z)/rho^2.
r = rpi_monte_carlo(tubes[0], cfg.agents[0].drift, trials=200, horizon=0.5,
                    box=cfg.agents[0].tube.lipschitz_box)
print(r.line())
