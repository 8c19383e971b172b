"""Quantization error of one vs two residual codebooks on compositional clusters."""

import argparse

import torch

from rarsq.envlab import composite_clusters
from rarsq.quantizer import fit_codebooks


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--lloyd-iters", type=int, default=10)
    args = p.parse_args()

    print("seed,l1_depth1,l1_depth2,ratio")
    for seed in args.seeds:
        x, _ = composite_clusters(args.clusters, args.dim, seed=seed)
        x = torch.from_numpy(x)
        err = []
        for depth in (1, 2):
            stack = fit_codebooks(x, 16, depth, seed=seed, lloyd_iters=args.lloyd_iters)
            err.append(float((x - stack.quantize(x).z_hat).abs().sum(1).mean()))
        print(f"{seed},{err[0]:.5f},{err[1]:.5f},{err[1] / err[0]:.4f}")


if __name__ == "__main__":
    main()
