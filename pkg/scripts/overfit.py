"""Overfit a small synthetic set: training HR@1 should approach 1.

    python scripts/overfit.py [--count 32] [--epochs 60] [--lr 1e-3]
"""
import argparse
import time

import numpy as np
import torch

from trajsim.geo import GridSpec
from trajsim.model.encoder import ModelConfig
from trajsim.pipeline import context_tables, ground_truth, prepare
from trajsim.preprocess import CleanConfig, clean_dataset
from trajsim.region import Node2VecConfig
from trajsim.synthetic import SyntheticConfig, generate_synthetic
from trajsim.train import TrainConfig, hr1_self, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--measure", default="dtw")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    syn = SyntheticConfig(count=args.count)
    kept, _ = clean_dataset(generate_synthetic(syn, args.seed), CleanConfig())
    prep = prepare(kept, GridSpec(18, syn.bbox))
    s, v = context_tables(prep, 64, Node2VecConfig(seed=args.seed), args.seed)
    D = ground_truth(prep, args.measure)
    items = prep.items()

    t0 = time.perf_counter()
    cfg = TrainConfig(learning_rate=args.lr, batch_size=32, epochs=args.epochs, seed=args.seed)
    res = train(items, D, s.values, v.values, cfg, ModelConfig(d=64, seed=args.seed), items, D)
    print(f"trained {args.epochs} epochs on {len(items)} trajectories in {time.perf_counter() - t0:.1f} s")
    print("epoch losses:", np.round(res.epoch_losses, 4).tolist())
    print("train HR@1 per epoch:", np.round(res.val_hr1, 3).tolist())
    print(f"best epoch {res.best_epoch}, HR@1 {hr1_self(res.best_model().eval(), items, D):.3f}")


if __name__ == "__main__":
    main()
