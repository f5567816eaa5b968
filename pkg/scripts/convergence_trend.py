#!/usr/bin/env python3
"""Mean squared gradient norm of ARPO on the toy problem as the horizon K grows."""

import argparse

import numpy as np

from isalab.mdp_core import toy_mdp
from isalab.policy import Direct2
from isalab.trainers import TrainerConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--horizons", type=int, nargs="+", default=[100, 1000, 10_000])
    ap.add_argument("--step-size", type=float, default=1.0, help="scaled by 1/sqrt(K)")
    args = ap.parse_args()

    mdp = toy_mdp()
    print(f"{'K':>7} {'mean |g|^2':>12}")
    for K in args.horizons:
        cfg = TrainerConfig(paradigm="ARPO", outer_steps=K, outer_step_size=args.step_size,
                            schedule="one_over_sqrt_K", track_exact_adversary=False)
        trace = train(mdp, Direct2(0.5, 0.5), cfg)
        print(f"{K:>7} {np.mean(trace.column('grad_norm') ** 2):>12.6f}")


if __name__ == "__main__":
    main()
