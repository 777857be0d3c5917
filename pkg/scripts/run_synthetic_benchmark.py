#!/usr/bin/env python3
"""Scratch-train on the default synthetic entity and report detection quality.

Usage: python scripts/run_synthetic_benchmark.py [--steps 3000] [--seed 0]
"""

import argparse
import os
import time

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from mtsad.experiments import detection_experiment  # noqa: E402


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=3000)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    t0 = time.perf_counter()
    outcome = detection_experiment(seed=args.seed, steps=args.steps,
                                   batch_size=args.batch_size)
    wall = time.perf_counter() - t0
    print(f"train loss      {outcome.train_loss:.5f}")
    print(f"eta             {outcome.eta:+.3f}")
    print(f"entity gate     {outcome.gate_entity}")
    print(f"precision       {outcome.precision:.3f}")
    print(f"recall          {outcome.recall:.3f}")
    print(f"f1              {outcome.f1:.3f}")
    detected = sum(s["detected"] for s in outcome.segments)
    print(f"segments        {detected}/{len(outcome.segments)} detected")
    print(f"wall            {wall:.0f}s")


if __name__ == "__main__":
    main()
