"""Four-setting ablation on the default synthetic benchmark.

Prints the per-setting mean target mAP and whether settings B and C reach
the baseline A, then leaves the usual ablation files in --out.

    python scripts/run_ablation.py [--config CFG] [--out DIR] [--jobs N]
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from aida.cli import main as cli_main


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)

    cmd = ["ablate", "--out", args.out, "--jobs", str(args.jobs)]
    if args.config:
        cmd += ["--config", args.config]
    t0 = time.perf_counter()
    rc = cli_main(cmd)
    if rc:
        return rc
    with (Path(args.out) / "ablation_runs.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    means = {}
    for s in dict.fromkeys(r["setting"] for r in rows):
        means[s] = float(np.mean([float(r["map"]) for r in rows if r["setting"] == s]))
        print(f"{s}: mean target mAP {means[s]:.4f}")
    for s in ("B", "C"):
        if s in means and "A" in means:
            print(f"{s} >= A: {means[s] >= means['A']}")
    print(f"elapsed {time.perf_counter() - t0:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
