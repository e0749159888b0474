"""Accuracy and run time of the batched reconstruction for several batch sizes.

    python3 demos/batch_size_sweep.py --frames 400 --sizes 10,25,50,100,200
"""

import argparse
import time

from viosfm import BaConfig, BatchConfig, PairingConfig, ScenarioConfig, evaluate_ate, generate, reconstruct
from viosfm.simulation import CovisibilityRetrieval


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=400)
    ap.add_argument("--sizes", default="10,25,50,100,200")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = generate(ScenarioConfig(world="corridor-loop", num_frames=args.frames, num_points=2000, seed=args.seed))
    print(f"VIO ATE rmse {evaluate_ate(ds.vio, ds.gt_poses).rmse:.4f} m")
    print(f"{'k':>5} {'batches':>8} {'ATE rmse [m]':>13} {'time [s]':>9}")
    for k in (int(v) for v in args.sizes.split(",")):
        t0 = time.perf_counter()
        model, rep = reconstruct(
            ds,
            PairingConfig(n1_temporal=5, n2_retrieval=5),
            BatchConfig(batch_size_k=k),
            BaConfig(function_tolerance=1e-4),
            retrieval=CovisibilityRetrieval(ds, exclude_window=30, min_shared=30),
            seed=args.seed,
        )
        wall = time.perf_counter() - t0
        print(f"{k:5d} {rep.num_ba_invocations:8d} {evaluate_ate(model.poses, ds.gt_poses).rmse:13.4f} {wall:9.1f}")


if __name__ == "__main__":
    main()
