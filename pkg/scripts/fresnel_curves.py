"""Reflection coefficient and power curves versus incidence angle for several materials.

Writes one CSV per material (same columns as ``radiofield fresnel-table``)
plus a summary of Brewster angles for the lossless cases.

    python scripts/fresnel_curves.py --out results/fresnel --fc 2.4e9
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from radiofield.cli import FRESNEL_COLUMNS, fresnel_rows
from radiofield.physics import AIR, ITU_MATERIALS, Material, itu_material


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--fc", type=float, default=2.4e9)
    ap.add_argument("--step", type=float, default=0.1)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    materials = [itu_material(name, args.fc) for name in sorted(ITU_MATERIALS)]
    materials += [Material(f"lossless_eps{e:g}", e, 0.0) for e in (2.0, 4.0, 9.0)]
    summary = []
    for mat in materials:
        rows = fresnel_rows(AIR, mat, args.fc, args.step)
        with open(out / f"fresnel_{mat.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FRESNEL_COLUMNS)
            w.writerows(rows)
        r_par = np.array([float(r[6]) for r in rows])
        k = int(np.argmin(r_par))
        summary.append([mat.name, mat.eps_r, mat.sigma, rows[k][0], f"{r_par[k]:.3e}"])
        print(f"{mat.name:>20}: eps_r {mat.eps_r:6.3f}  sigma {mat.sigma:.4f} S/m  "
              f"min R_par {r_par[k]:.2e} at {rows[k][0]} deg")
    with open(out / "brewster.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["material", "eps_r", "sigma", "theta_min_r_par_deg", "min_R_par"])
        w.writerows(summary)


if __name__ == "__main__":
    main()
