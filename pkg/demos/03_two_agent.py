"""A small closed loop: two followers pass one obstacle behind a leader.

Run:  python demos/03_two_agent.py [output-dir]
"""
import sys
import warnings

from tubecbf import preset
from tubecbf.cli import cmd_run

warnings.filterwarnings("ignore", module="cvxpy")

cfg = preset("two-agent")
summary = cmd_run(cfg, sys.argv[1] if len(sys.argv) > 1 else None)
m = summary["metrics"]
print(f"{summary['steps']} steps, smallest barrier value {m['min_h']:.4f}")
print("largest V(z)/rho^2 per agent:", [round(v, 4) for v in m["max_tube_ratio"]])
print("final formation error [m]:", [f"{v:.2e}" for v in m["formation_final"]])
for r in summary["reports"]:
    print(f"{r['name']}: {'pass' if r['passed'] else 'FAIL'} (worst {r['worst']:.4g})")
if "out_dir" in summary:
    print("tables written to", summary["out_dir"])
