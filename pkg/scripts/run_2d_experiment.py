"""Train vanilla, local-OT and global-OT federated flows on one 2D config over several seeds.

Writes a tidy CSV (coupling, seed, nfe, w2, straightness, rounds, wall_s) and
prints the per-seed orderings checked by the acceptance suite.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from fedflow.config import load_config
from fedflow.experiments import COUPLINGS, run_comparison, wins, write_rows

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "moons_got.yaml"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--couplings", nargs="+", default=list(COUPLINGS), choices=COUPLINGS)
    p.add_argument("--rounds", type=int, help="override the config's round count")
    p.add_argument("--cache", default=str(ROOT / "results" / "2d"), help="result cache directory")
    p.add_argument("--force", action="store_true", help="ignore cached results")
    p.add_argument("--out", default="w2_vs_nfe.csv")
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    if args.rounds is not None:
        cfg = replace(cfg, spec=replace(cfg.spec, rounds=args.rounds))
    rows = run_comparison(cfg, args.seeds, args.couplings, args.cache, args.force,
                          log=lambda m: print(m, flush=True))
    write_rows(args.out, rows)
    print(f"wrote {args.out}")
    for nfe in cfg.eval.nfe:
        for better in ("global_ot", "local_ot"):
            if better in args.couplings and "vanilla" in args.couplings:
                w = wins(rows, better, "vanilla", nfe)
                print(f"nfe {nfe:>3}: {better} < vanilla in {sum(w.values())}/{len(w)} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
