#!/usr/bin/env python3
"""Where do ARPO and SPO end up from uniform random starts on the toy problem?"""

import argparse
import time

from isalab.analysis import basin_statistics
from isalab.trainers import TrainerConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-inits", type=int, default=300)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    for paradigm in ("SPO", "ARPO"):
        t0 = time.perf_counter()
        cfg = TrainerConfig(paradigm=paradigm, outer_steps=args.steps, outer_step_size=args.lr)
        rep = basin_statistics(cfg, n_inits=args.n_inits, seed=args.seed, workers=args.workers)
        print(f"{paradigm}  ({time.perf_counter() - t0:.0f}s)")
        for c in rep.clusters:
            print(f"  ({c.alpha:.3f}, {c.beta:.3f})  fraction {c.fraction:.3f}  "
                  f"v_nat {c.v_nat:+.4f}  v_rob {c.v_rob:+.4f}")
        print(f"  near (0, 0): {rep.fraction_near((0.0, 0.0), 0.1):.3f}   "
              f"near (1, 1): {rep.fraction_near((1.0, 1.0), 0.1):.3f}")


if __name__ == "__main__":
    main()
