"""Two congruent floors: how VIO screening keeps look-alike pairs out of the model.

    python3 demos/doppelganger_screening.py --frames 300 --seed 0
"""

import argparse

from viosfm import PairingConfig, ScenarioConfig, generate, verify_pairs
from viosfm.simulation import ConfusingRetrieval
from viosfm.verification import PairStatus, generate_candidates


def tally(results, pairs):
    out = {s: 0 for s in PairStatus if s != PairStatus.PENDING}
    for p in pairs:
        out[results[p][1].status] += 1
    return ", ".join(f"{s.value} {n}" for s, n in out.items())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = generate(ScenarioConfig(world="duplicated-corridor", num_frames=args.frames, num_points=2000, seed=args.seed))
    cfg = PairingConfig(n1_temporal=5, n2_retrieval=5)
    cands = generate_candidates(ds.frames, ConfusingRetrieval(ds, exclude_window=5, min_shared=30), cfg)
    true_pairs = ds.covisible_pairs()
    covisible = [p for p in cands if p in true_pairs]
    dop = [p for p in cands if p in ds.doppelganger_pairs]
    print(f"{len(cands)} candidate pairs: {len(covisible)} truly covisible, {len(dop)} doppelgangers")

    two_step = verify_pairs(cands, ds, ds.vio, ds.intrinsics, cfg, seed=args.seed)
    ransac_only = verify_pairs(cands, ds, None, ds.intrinsics, cfg, seed=args.seed, screening=False)
    for name, res in (("VIO screening + RANSAC", two_step), ("RANSAC only", ransac_only)):
        print(name)
        print(f"  covisible pairs:     {tally(res, covisible)}")
        print(f"  doppelganger pairs:  {tally(res, dop)}")
    ratios = sorted(two_step[p][1].ee_outlier_ratio for p in dop)
    if ratios:
        print(f"EE outlier ratio on doppelgangers: min {ratios[0]:.2f}, median {ratios[len(ratios) // 2]:.2f}")


if __name__ == "__main__":
    main()
