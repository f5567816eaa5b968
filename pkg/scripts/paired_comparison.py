#!/usr/bin/env python3
"""ARPO vs BARPO from shared random linear-softmax initializations."""

import argparse
from pathlib import Path

import numpy as np

from isalab.cli import build_mdp, load_config, run_paired

DEFAULT = Path(__file__).resolve().parent.parent / "configs" / "paired_embedded.cfg"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(DEFAULT))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    rows = run_paired(build_mdp(cfg), cfg, seed=args.seed, workers=args.workers)
    print(f"{'paradigm':<8} {'median v_nat':>13} {'median v_adv':>13} {'q25 v_nat':>10} {'q75 v_nat':>10}")
    for name, vals in rows.items():
        arr = np.asarray(vals, dtype=float)
        q25, q75 = np.percentile(arr[:, 0], [25, 75])
        print(f"{name:<8} {np.median(arr[:, 0]):>13.6f} {np.median(arr[:, 1]):>13.6f} {q25:>10.6f} {q75:>10.6f}")
    names = list(rows)
    wins = np.mean(np.asarray(rows[names[1]])[:, 0] > np.asarray(rows[names[0]])[:, 0])
    print(f"{names[1]} beats {names[0]} on natural value in {wins:.0%} of pairs")


if __name__ == "__main__":
    main()
