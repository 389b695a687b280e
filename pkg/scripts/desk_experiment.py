"""Desk-scale end-to-end study: full pipeline, single ablations and encoding variants.

Generates the desk dataset (8 x 5 x 3 m gypsum room, 2.4 GHz, 500
receivers), trains every variant with identical seeds and writes

    <out>/runs.csv      one row per variant: iterations, test NMSE, -10 dB crossing
    <out>/curves.csv    validation NMSE (raw and smoothed) per evaluation

Example::

    python scripts/desk_experiment.py --out results/desk --iters 3000
    python scripts/desk_experiment.py --out results/quick --variants full no-ipe --iters 500
"""

import argparse
import csv
import logging
import time
from pathlib import Path

from radiofield.config import PRESETS
from radiofield.experiments import build_dataset, train_run
from radiofield.trainer import AblationFlags

VARIANTS = {
    "full": AblationFlags(),
    "no-scale-consistency": AblationFlags(scale_consistent=False),
    "no-ipe": AblationFlags(use_ipe=False),
    "no-zeta": AblationFlags(zeta_compensation=False),
    "ipe-only": AblationFlags(use_pe=False),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    ap.add_argument("--iters", type=int, default=3000, help="iterations per variant")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = PRESETS[args.preset].with_updates({"trainer.seed": args.seed})
    t0 = time.perf_counter()
    dataset = build_dataset(cfg)
    print(f"dataset: {len(dataset.samples)} receivers in {time.perf_counter() - t0:.0f} s")

    def progress(tr):
        it, val = tr.history[-1]
        print(f"  {it:6d}  val {val:7.2f} dB  {time.perf_counter() - t0:7.0f} s", flush=True)

    results = {}
    for name in args.variants:
        print(f"== {name}")
        results[name] = train_run(cfg, dataset, VARIANTS[name], max_iters=args.iters, progress=progress)
        print(f"   test NMSE {results[name].test_db:.2f} dB")

    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "iterations", "test_nmse_db", "crossing_minus10_db", "seconds"])
        for name, r in results.items():
            w.writerow([name, r.iterations, f"{r.test_db:.4f}", r.crossing(-10.0) or "", f"{r.seconds:.1f}"])
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "iteration", "val_db", "val_db_smoothed"])
        for name, r in results.items():
            for (it, v), s in zip(r.history, r.smoothed):
                w.writerow([name, it, f"{v:.4f}", f"{s:.4f}"])
    print(f"wrote {out / 'runs.csv'} and {out / 'curves.csv'}")


if __name__ == "__main__":
    main()
