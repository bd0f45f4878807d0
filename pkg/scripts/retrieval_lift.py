"""Train on 1 000 clustered synthetic trajectories and compare against baselines.

Vocabulary, normalization and the transition graph come from the 20 % train
split. Reports test-split metrics for the trained model, an untrained model,
random embeddings and grid-sequence Jaccard; with ``--pool`` also HR@1 of 200
queries against 1k and N-trajectory candidate pools.

    python scripts/retrieval_lift.py [--epochs 20] [--lr 3e-4] [--infonce] [--pool 5000]
"""
import argparse
import time

import numpy as np
import torch

from trajsim.geo import GridSpec
from trajsim.metrics import evaluate, evaluate_scores, jaccard_scores, random_embeddings
from trajsim.model.encoder import ModelConfig, RePoEncoder
from trajsim.oracles import ground_truth_topk, rank_rows
from trajsim.pipeline import context_tables, ground_truth, ground_truth_cross, prepare, prepare_split
from trajsim.preprocess import CleanConfig, clean_dataset, split_indices
from trajsim.region import Node2VecConfig
from trajsim.synthetic import SyntheticConfig, generate_synthetic
from trajsim.train import TrainConfig, train


def show(name, report):
    print(f"{name:<10}", "  ".join(f"{k}={v:.4f}" for k, v in report.items()))


def pool_hr1(model, pool, queries, seed=0):
    truth = rank_rows(ground_truth_cross(pool.subset(queries), pool, "dtw"), 1, exclude=queries)
    emb = model.embed(pool.items())
    rnd = random_embeddings(len(pool), emb.shape[1], seed)
    hr = evaluate(emb[queries], emb, truth, ks=(1,), rm=(), exclude=queries).hr[1]
    return hr, evaluate(rnd[queries], rnd, truth, ks=(1,), rm=(), exclude=queries).hr[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--infonce", action="store_true")
    ap.add_argument("--pool", type=int, default=0, help="also run the candidate-pool comparison at this size")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    syn = SyntheticConfig(count=args.count)
    kept, _ = clean_dataset(generate_synthetic(syn, args.seed), CleanConfig())
    tr, va, te = split_indices(len(kept), args.seed)
    prep = prepare_split(kept, GridSpec(18, syn.bbox), tr)
    s, v = context_tables(prep, 64, Node2VecConfig(seed=args.seed), args.seed, train_idx=tr)
    parts = {k: prep.subset(ix) for k, ix in (("train", tr), ("val", va), ("test", te))}
    D = {k: ground_truth(p, "dtw") for k, p in parts.items()}

    t0 = time.perf_counter()
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                      infonce=args.infonce)
    mcfg = ModelConfig(d=64, seed=args.seed)
    res = train(parts["train"].items(), D["train"], s.values, v.values, cfg, mcfg, parts["val"].items(), D["val"])
    print(f"trained in {time.perf_counter() - t0:.0f} s, best epoch {res.best_epoch}")
    print("epoch losses:", np.round(res.epoch_losses, 3).tolist())
    print("val HR@1:", np.round(res.val_hr1, 3).tolist())

    test = parts["test"]
    n = len(test)
    truth = ground_truth_topk(D["test"], 50)
    ex = np.arange(n)
    model = res.best_model().eval()
    emb = model.embed(test.items())
    show("model", evaluate(emb, emb, truth, exclude=ex))
    init = RePoEncoder(mcfg, s.values, v.values)
    init.load_state_dict(res.init_state)
    e0 = init.eval().embed(test.items())
    show("untrained", evaluate(e0, e0, truth, exclude=ex))
    rnd = random_embeddings(n, 64, args.seed)
    show("random", evaluate(rnd, rnd, truth, exclude=ex))
    cells = [g.cells for g in test.grid_trajs]
    show("jaccard", evaluate_scores(jaccard_scores(cells, cells), truth, exclude=ex))

    if args.pool:
        # a little headroom for trajectories rejected by cleaning
        raw = generate_synthetic(SyntheticConfig(count=int(args.pool * 1.06)), args.seed + 1)
        big, _ = clean_dataset(raw, CleanConfig())
        pool = prepare(big[:args.pool], prep.grid, vocab=prep.vocab, norm=prep.norm)
        queries = np.arange(200)
        for size in (1000, len(pool)):
            hr, hr_rand = pool_hr1(model, pool.subset(range(size)), queries, args.seed)
            print(f"pool {size:>5}: HR@1 {hr:.3f}  random {hr_rand:.4f}")


if __name__ == "__main__":
    main()
