"""PE versus IPE along a ray: how the integrated encoding damps high levels for far frustums.

For frustums of fixed angular width at increasing depth, records the
magnitude of every (axis, level) feature pair under plain PE and under
IPE.  Output: ``<out>/encoding_damping.csv``.

    python scripts/encoding_comparison.py --out results/encoding
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from radiofield.config import SCENE_A
from radiofield.encoding import ipe_arrays, make_encoding_config, pe_arrays
from radiofield.sampling import Ray, frustum_gaussian


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--cone-ratio", type=float, default=SCENE_A.sampler.cone_ratio)
    ap.add_argument("--length", type=float, default=0.1, help="frustum length in metres")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    room = SCENE_A.data.room_model()
    enc = make_encoding_config(room.bounds, SCENE_A.encoding.d_min, levels=SCENE_A.encoding.levels)
    ray = Ray.from_angles((1.0, 1.0, 1.5), np.deg2rad(80.0), np.deg2rad(25.0), cone_ratio=args.cone_ratio)
    with open(out / "encoding_damping.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["depth_m", "axis", "level", "pe_magnitude", "ipe_magnitude", "damping"])
        for depth in (0.5, 1.0, 2.0, 4.0, 8.0, 14.0):
            g = frustum_gaussian(ray, depth, depth + args.length)
            pe = pe_arrays(g.mu[None], enc)[0]
            ipe = ipe_arrays(g.mu[None], g.diag_world[None], enc)[0]
            start = 0
            for axis, L in enumerate(enc.levels):
                for level in range(L):
                    i = start + 2 * level
                    p, q = np.hypot(pe[i], pe[i + 1]), np.hypot(ipe[i], ipe[i + 1])
                    w.writerow([depth, "xyz"[axis], level, f"{p:.6f}", f"{q:.6e}", f"{q / p:.6e}"])
                start += 2 * L
    print(f"wrote {out / 'encoding_damping.csv'}")


if __name__ == "__main__":
    main()
