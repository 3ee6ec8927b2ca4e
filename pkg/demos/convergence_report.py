"""Print the tables of a convergence run.

    bsdefilter convergence --out runs/ou -v
    python3 demos/convergence_report.py runs/ou
"""

import os
import sys

from bsdefilter.evaluation import read_csv

run = sys.argv[1] if len(sys.argv) > 1 else "runs/ou"
e_rows = read_csv(os.path.join(run, "e_over_time.csv"))
E_rows = read_csv(os.path.join(run, "E_over_time.csv"))
conv = read_csv(os.path.join(run, "convergence.csv"))

ns = [r["N"] for r in conv]
print("k   " + "".join(f"e_k(N={n})".rjust(12) for n in ns) + "".join(f"E_k(N={n})".rjust(12) for n in ns))
for k in sorted({int(r["k"]) for r in e_rows}):
    e = [float(r["e_k"]) for n in ns for r in e_rows if r["N"] == n and int(r["k"]) == k]
    E = [float(r["E_k"]) for n in ns for r in E_rows if r["N"] == n and int(r["k"]) == k]
    print(f"{k:<4}" + "".join(f"{v:12.4f}" for v in e + E))
print()
for r in conv:
    print(f"N={r['N']:>3}  e_K={float(r['e_K']):.4f}  E={float(r['E']):.4f}")
print(f"slope of log2 e_K: {float(conv[0]['slope_e_K']):+.3f}, of log2 E: {float(conv[0]['slope_E']):+.3f}")
