"""Regenerate the frozen 10x12 grid fixture (covariate + sampling variances).

Run once; the CSV is committed and read by ``simulate.default_protocol``.
"""
import csv
from pathlib import Path

from spatialfh.lattice import grid_lattice
from spatialfh.simulate import synthetic_covariate, synthetic_variances

COVARIATE_SEED = 115
VARIANCE_SEED = 2010

out = Path(__file__).resolve().parents[1] / "src" / "spatialfh" / "data" / "grid10x12.csv"
adj = grid_lattice(10, 12)
cov = synthetic_covariate(adj, COVARIATE_SEED)
var = synthetic_variances(adj.n, 2, VARIANCE_SEED)
with open(out, "w", newline="") as fh:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["area_id", "covariate", "var1", "var2"])
    for i, a in enumerate(adj.ids):
        w.writerow([a, f"{cov[i]:.4f}", f"{var[i, 0]:.6f}", f"{var[i, 1]:.6f}"])
print(f"wrote {out}")
