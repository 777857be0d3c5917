#!/usr/bin/env python3
"""Fleet pre-training vs from-scratch on a short held-out entity.

Pre-trains once on the 32-entity transfer fleet, then for each seed runs a
10k-step warm-started fine-tune against a 20k-step scratch baseline on a
held-out entity with 480 training points, comparing validation losses.

Usage: python scripts/run_transfer_benchmark.py [--seeds 0 1 2]
"""

import argparse
import os
import time

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from mtsad.experiments import (held_out_entity, pretrain_fleet,  # noqa: E402
                               transfer_run)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--pretrain-steps", type=int, default=2000)
    parser.add_argument("--warm-steps", type=int, default=10000)
    parser.add_argument("--scratch-steps", type=int, default=20000)
    args = parser.parse_args()

    t0 = time.perf_counter()
    print("pre-training fleet ...")
    base = pretrain_fleet(steps=args.pretrain_steps)
    print(f"  final running loss {base.loss_log[-1][1]:.5f} "
          f"({time.perf_counter() - t0:.0f}s)")
    frame = held_out_entity()

    print(f"{'seed':>4} {'warm best<=10k':>15} {'warm@10k':>10} "
          f"{'scratch@10k':>12} {'scratch@20k':>12}")
    for seed in args.seeds:
        outcome = transfer_run(base.checkpoint, frame, seed,
                               warm_steps=args.warm_steps,
                               scratch_steps=args.scratch_steps)
        print(f"{seed:>4} {outcome.warm.best_upto(args.warm_steps):>15.5f} "
              f"{outcome.warm.at(args.warm_steps):>10.5f} "
              f"{outcome.scratch.at(args.warm_steps):>12.5f} "
              f"{outcome.scratch.at(args.scratch_steps):>12.5f}")
    print(f"wall {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
