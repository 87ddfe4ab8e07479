"""Leave-one-domain-out evaluation over all generated domains.

Every domain (the three sources and the target) takes one turn as the unseen
one; the model trains on the rest. One results row per held-out domain plus
the average.

    python scripts/leave_one_out.py [--config CFG] [--seed N] [--setting A|B|C|D]
"""

from __future__ import annotations

import argparse
import sys

from aida.config import load_config
from aida.protocol import benchmark, leave_one_out, setting_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--setting", default="D", choices="ABCD")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    sources, target = benchmark(cfg.data, seed)
    tcfg = setting_config(cfg.train_config(), args.setting)
    reports = leave_one_out([*sources, target], tcfg)
    print(f"{'held out':<10}{'rank1':>8}{'map':>8}{'nmi':>8}")
    for key, r in reports.items():
        name = key if key == "average" else f"D{key}"
        print(f"{name:<10}{r.rank1:>8.4f}{r.map:>8.4f}{r.nmi:>8.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
