"""Codebook usage and quantization error for rotation vs straight-through training.

Trains stage 1 on the synthetic mode dataset for each seed and mode and
prints the final-epoch statistics; per-epoch curves go to ``--out``.
"""

import argparse
import math
from pathlib import Path

from rarsq.autoencoder import Stage1Config, train_stage1
from rarsq.envlab import TrajectoryDatasetSpec, gen_trajectories


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--out", type=Path, default=Path("runs/collapse"))
    args = p.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    chunks, _ = gen_trajectories(TrajectoryDatasetSpec(seed=args.data_seed))
    print("seed,mode,active_codes_d1,entropy_over_ln16,quant_l1")
    final = {}
    for seed in args.seeds:
        for mode in ("rotation", "ste"):
            cfg = Stage1Config(mode=mode, seed=seed, epochs=args.epochs)
            last = train_stage1(chunks, cfg, args.out / f"{mode}_seed{seed}.csv").metrics[-1]
            final[mode] = last
            h = math.log(last["perplexity_d1"]) / math.log(cfg.codebook_size)
            print(f"{seed},{mode},{last['active_codes_d1']},{h:.4f},{last['quant_l1']:.5f}", flush=True)
        print(f"# seed {seed}: rotation/ste quant_l1 = {final['rotation']['quant_l1'] / final['ste']['quant_l1']:.3f}")


if __name__ == "__main__":
    main()
