"""Batch CLI: each subcommand is one pipeline stage reading/writing files in the artifacts directory.

Exit codes: 0 success, 1 domain error (bad data, missing artifact, failed check), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import EngineConfig, apply_overrides, load_config
from .geo import CellVocab, DomainError, GridTrajectory
from .oracles import DistanceMatrix, Measure, distance, ground_truth_topk, pairwise_matrix, rank_rows
from .preprocess import NormStats, clean_dataset, compute_norm_stats, split_indices

log = logging.getLogger("trajsim")

RAW_CSV = "raw.csv"
CLEAN_CSV = "clean.csv"
GRID_JSON = "grid.json"
FEATURES_NPZ = "features.npz"
GRAPH_NPZ = "graph.npz"
STRUCTURAL_TVIS = "structural.tvis"
VISUAL_TVIS = "visual.tvis"
MODEL_TCKP = "model.tckp"
TRAIN_LOG = "train_log.json"
EMBEDDINGS_TEMB = "embeddings.temb"


def distances_name(measure) -> str:
    return f"distances_{Measure.parse(measure).name.lower()}.tdm"


class Stage:
    """Artifact access for one command invocation."""

    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.dir = cfg.artifacts

    def path(self, name: str, must_exist: bool = True) -> Path:
        p = self.dir / name
        if must_exist and not p.exists():
            raise DomainError(f"missing artifact {p}; run the stage that produces it first")
        return p

    def out(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        return self.dir / name

    @property
    def threads(self) -> Optional[int]:
        return self.cfg.threads or None  # 0 defers to TRAJSIM_THREADS

    def trajectories(self):
        from .io import load_trajectories
        return load_trajectories(self.path(CLEAN_CSV))

    def grid_info(self):
        info = json.loads(self.path(GRID_JSON).read_text(encoding="utf-8"))
        vocab = CellVocab(np.array(info["cell_ids"], dtype=np.int64))
        norm = NormStats(**info["norm"])
        seqs = [GridTrajectory(int(t), np.array(c, dtype=np.int64)) for t, c in info["sequences"]]
        return vocab, norm, seqs, info

    def splits(self, n: int):
        return split_indices(n, self.cfg.seed)

    def distances(self) -> DistanceMatrix:
        from .io import load_distance_matrix
        return load_distance_matrix(self.path(distances_name(self.cfg.measure)))

    def items(self):
        vocab, _, seqs, _ = self.grid_info()
        z = np.load(self.path(FEATURES_NPZ))
        offs = z["offsets"]
        feats = [z["features"][offs[i]:offs[i + 1]] for i in range(len(offs) - 1)]
        if len(feats) != len(seqs):
            raise DomainError(f"{len(feats)} feature sequences vs {len(seqs)} grid sequences")
        return [(vocab.encode(g.cells), f) for g, f in zip(seqs, feats)]

    def tables(self):
        from .io import load_cell_table
        from .region import table_from_cells
        vocab, *_ = self.grid_info()
        d = self.cfg.model.d
        s_ids, s_vec = load_cell_table(self.path(STRUCTURAL_TVIS), expected_dim=d)
        v_ids, v_vec = load_cell_table(self.path(VISUAL_TVIS), expected_dim=d)
        return (table_from_cells(vocab, s_ids, s_vec, d, "structural").values,
                table_from_cells(vocab, v_ids, v_vec, d, "visual").values)

    def model(self):
        import torch

        from .io import load_checkpoint
        from .model.encoder import RePoEncoder
        s, v = self.tables()
        model = RePoEncoder(self.cfg.model_cfg(), s, v)
        names = [n for n, _ in model.named_parameters()]
        _, params = load_checkpoint(self.path(MODEL_TCKP), names, self.cfg.model_cfg().to_dict())
        model.load_state_dict({k: torch.from_numpy(np.array(a)) for k, a in params.items()}, strict=False)
        model.eval()
        return model

    def embeddings(self):
        from .io import load_embeddings
        return load_embeddings(self.path(EMBEDDINGS_TEMB), expected_dim=self.cfg.model.d)


# --- commands ------------------------------------------------------------------

def cmd_gen(st: Stage, args) -> None:
    from .io import save_trajectories
    from .synthetic import generate_synthetic
    syn = st.cfg.synthetic if args.count is None else replace(st.cfg.synthetic, count=args.count)
    trajs = generate_synthetic(syn, st.cfg.seed)
    out = Path(args.out) if args.out else st.out(RAW_CSV)
    save_trajectories(out, trajs)
    print(f"wrote {len(trajs)} trajectories to {out}")


def cmd_clean(st: Stage, args) -> None:
    from .io import load_trajectories, save_trajectories
    src = st.cfg.resolve(st.cfg.paths.data) if st.cfg.paths.data else st.path(RAW_CSV)
    if not Path(src).exists():
        raise DomainError(f"input trajectories not found: {src}")
    kept, rejected = clean_dataset(load_trajectories(src), st.cfg.clean)
    if not kept:
        raise DomainError("no trajectory survived cleaning")
    save_trajectories(st.out(CLEAN_CSV), kept)
    st.out("clean_rejected.json").write_text(json.dumps([int(r) for r in rejected]) + "\n")
    print(f"kept {len(kept)}, rejected {len(rejected)}")


def cmd_grid(st: Stage, args) -> None:
    from .geo import map_to_grid
    trajs = st.trajectories()
    grid = st.cfg.grid
    seqs = [map_to_grid(t, grid) for t in trajs]
    train_idx, _, _ = st.splits(len(trajs))
    if len(train_idx) == 0:
        train_idx = np.arange(len(trajs))
    # vocabulary and normalization come from the training split (plus every bbox cell)
    vocab = CellVocab.build([seqs[i] for i in train_idx], grid if grid.bbox is not None else None)
    norm = compute_norm_stats([trajs[i] for i in train_idx])
    info = {
        "grid": {"zoom": grid.zoom, "bbox": grid.bbox},
        "cell_ids": vocab.cell_ids.tolist(),
        "norm": norm.__dict__,
        "sequences": [[int(g.id), g.cells.tolist()] for g in seqs],
    }
    st.out(GRID_JSON).write_text(json.dumps(info) + "\n", encoding="utf-8")
    print(f"{len(seqs)} grid trajectories, vocabulary of {vocab.size} cells")


def cmd_features(st: Stage, args) -> None:
    from .preprocess import extract_point_features
    _, norm, _, _ = st.grid_info()
    trajs = st.trajectories()
    feats = [extract_point_features(t, norm) for t in trajs]
    offsets = np.concatenate([[0], np.cumsum([len(f) for f in feats])]).astype(np.int64)
    np.savez(st.out(FEATURES_NPZ), features=np.concatenate(feats), offsets=offsets,
             ids=np.array([t.id for t in trajs], dtype=np.int64))
    print(f"features for {len(feats)} trajectories ({int(offsets[-1])} points)")


def cmd_distances(st: Stage, args) -> None:
    from .io import save_distance_matrix
    measure = Measure.parse(args.measure or st.cfg.measure)
    trajs = st.trajectories()
    D = pairwise_matrix([t.xy() for t in trajs], measure, st.threads)
    out = st.out(distances_name(measure))
    save_distance_matrix(out, D)
    print(f"{measure.name} matrix {D.n}x{D.n} -> {out}")


def cmd_graph(st: Stage, args) -> None:
    from .region import build_transition_graph
    vocab, _, seqs, _ = st.grid_info()
    train_idx, _, _ = st.splits(len(seqs))
    if len(train_idx) == 0:
        train_idx = np.arange(len(seqs))
    g = build_transition_graph([vocab.encode(seqs[i].cells) for i in train_idx], vocab.size)
    edges = np.array(sorted(g.edges), dtype=np.int64).reshape(-1, 2)
    np.savez(st.out(GRAPH_NPZ), edges=edges, n_nodes=np.int64(g.n_nodes))
    print(f"transition graph: {g.n_nodes} nodes, {len(edges)} directed edges")


def cmd_node2vec(st: Stage, args) -> None:
    from .io import save_cell_table
    from .region import TransitionGraph, node2vec
    vocab, *_ = st.grid_info()
    z = np.load(st.path(GRAPH_NPZ))
    g = TransitionGraph(int(z["n_nodes"]), frozenset(map(tuple, z["edges"].tolist())))
    if g.n_nodes != vocab.size:
        raise DomainError(f"graph has {g.n_nodes} nodes but the vocabulary has {vocab.size} cells")
    table = node2vec(g, st.cfg.model.d, st.cfg.node2vec_cfg())
    save_cell_table(st.out(STRUCTURAL_TVIS), vocab.cell_ids, table.values[:-1])
    st.out("node2vec_loss.json").write_text(json.dumps(table.loss_log) + "\n")
    print(f"structural embeddings {vocab.size}x{table.dim}")


def cmd_visual_synth(st: Stage, args) -> None:
    from .io import save_cell_table
    from .region import synth_visual_vectors
    vocab, _, _, info = st.grid_info()
    vec = synth_visual_vectors(vocab.cell_ids, st.cfg.grid, st.cfg.model.d, st.cfg.seed, scale=st.cfg.visual_scale)
    save_cell_table(st.out(VISUAL_TVIS), vocab.cell_ids, vec)
    print(f"visual features {vocab.size}x{st.cfg.model.d}")


def cmd_train(st: Stage, args) -> None:
    import torch

    from .io import save_checkpoint
    from .train import train
    torch.set_num_threads(1)
    items = st.items()
    D = st.distances()
    if D.n != len(items):
        raise DomainError(f"distance matrix covers {D.n} trajectories, dataset has {len(items)}")
    tr, va, _ = st.splits(len(items))
    sub = lambda idx: DistanceMatrix(D.measure, D.values[np.ix_(idx, idx)])
    s, v = st.tables()
    res = train([items[i] for i in tr], sub(tr), s, v, st.cfg.train_cfg(), st.cfg.model_cfg(),
                [items[i] for i in va], sub(va) if len(va) >= 2 else None)
    configs = {"model": st.cfg.model_cfg().to_dict(), "train": st.cfg.train_cfg().__dict__, "measure": D.measure.name}
    save_checkpoint(st.out(MODEL_TCKP), res.best_state, configs)
    log_data = {"epoch_losses": res.epoch_losses, "val_hr1": res.val_hr1, "best_epoch": res.best_epoch}
    st.out(TRAIN_LOG).write_text(json.dumps(log_data, indent=1) + "\n")
    print(f"trained {len(res.epoch_losses)} epochs on {len(tr)} trajectories; best epoch {res.best_epoch}")


def cmd_embed(st: Stage, args) -> None:
    import torch

    from .io import save_embeddings
    torch.set_num_threads(1)
    model = st.model()
    items = st.items()
    ids = [int(t) for t, _ in st.grid_info()[3]["sequences"]]
    emb = model.embed(items)
    save_embeddings(st.out(EMBEDDINGS_TEMB), ids, emb)
    print(f"embedded {len(ids)} trajectories (d={emb.shape[1]})")


def cmd_evaluate(st: Stage, args) -> None:
    from .io import write_metrics
    from .metrics import evaluate, evaluate_scores, jaccard_scores, random_embeddings
    _, emb = st.embeddings()
    D = st.distances()
    if D.n != len(emb):
        raise DomainError(f"{len(emb)} embeddings vs {D.n}x{D.n} distance matrix")
    _, _, test = st.splits(D.n)
    if args.all:
        test = np.arange(D.n)
    if len(test) < 2:
        raise DomainError("evaluation needs at least two test trajectories")
    Dt = DistanceMatrix(D.measure, D.values[np.ix_(test, test)])
    k_max = min(max(st.cfg.metric_ks + [k for _, k in st.cfg.rm_pairs]), len(test) - 1)
    truth = ground_truth_topk(Dt, k_max)
    ex = np.arange(len(test))
    rm = [tuple(p) for p in st.cfg.rm_pairs]
    report = evaluate(emb[test], emb[test], truth, st.cfg.metric_ks, rm, exclude=ex)
    write_metrics(st.out("metrics.txt"), report, st.out("metrics.json"))
    sys.stdout.write(report.to_text())
    if args.baselines:
        rnd = random_embeddings(len(test), emb.shape[1], st.cfg.seed)
        write_metrics(st.out("metrics_random.txt"), evaluate(rnd, rnd, truth, st.cfg.metric_ks, rm, exclude=ex),
                      st.out("metrics_random.json"))
        _, _, seqs, _ = st.grid_info()
        cells = [seqs[i].cells for i in test]
        jac = evaluate_scores(jaccard_scores(cells, cells), truth, st.cfg.metric_ks, rm, exclude=ex)
        write_metrics(st.out("metrics_jaccard.txt"), jac, st.out("metrics_jaccard.json"))


def _topk(st: Stage, query_id: int, k: int):
    from .metrics import cosine_scores
    ids, emb = st.embeddings()
    where = {int(t): i for i, t in enumerate(ids)}
    if query_id not in where:
        raise DomainError(f"unknown trajectory id {query_id}")
    if not (1 <= k <= len(ids) - 1):
        raise DomainError(f"k must be in [1, {len(ids) - 1}]")
    q = where[query_id]
    sims = cosine_scores(emb[q:q + 1], emb)
    order = rank_rows(sims, k, exclude=np.array([q]), descending=True).indices[0]
    return ids, q, [(int(ids[j]), float(sims[0, j])) for j in order]


def cmd_search(st: Stage, args) -> None:
    _, _, hits = _topk(st, args.query_id, args.k)
    for rank, (tid, sim) in enumerate(hits, 1):
        print(f"{rank}\t{tid}\t{sim:.6f}")


def cmd_export_geojson(st: Stage, args) -> None:
    from .io import export_geojson
    _, _, hits = _topk(st, args.query_id, args.k)
    trajs = {t.id: t for t in st.trajectories()}
    measure = Measure.parse(st.cfg.measure)
    q = trajs[args.query_id]
    retrieved = [(tid, distance(q.xy(), trajs[tid].xy(), measure)) for tid, _ in hits]
    out = Path(args.out) if args.out else st.out(f"query_{args.query_id}.geojson")
    fc = export_geojson(args.query_id, retrieved, trajs, out)
    print(f"{len(fc['features'])} features -> {out}")


def cmd_gradcheck(st: Stage, args) -> None:
    from .model.gradcheck import BLOCKS, grad_check, threshold
    blocks = BLOCKS if args.block == "all" else [args.block]
    for b in blocks:
        if b not in BLOCKS:
            raise DomainError(f"unknown block {b!r}; known: all, {', '.join(BLOCKS)}")
    failed = []
    for b in blocks:
        err = grad_check(b, seed=st.cfg.seed)
        ok = err < threshold(b)
        print(f"{b:14s} max_rel_err = {err:.3e}  {'ok' if ok else 'FAIL'} (< {threshold(b):.0e})")
        if not ok:
            failed.append(b)
    if failed:
        raise DomainError(f"gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "gen": cmd_gen, "clean": cmd_clean, "grid": cmd_grid, "features": cmd_features, "distances": cmd_distances,
    "graph": cmd_graph, "node2vec": cmd_node2vec, "visual-synth": cmd_visual_synth, "train": cmd_train,
    "embed": cmd_embed, "evaluate": cmd_evaluate, "search": cmd_search, "export-geojson": cmd_export_geojson,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="engine config JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (JSON-parsed); repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="trajsim", description="Trajectory similarity pipeline")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "gen": "generate synthetic trajectories", "clean": "clean raw trajectories", "grid": "map to grid cells",
        "features": "point features", "distances": "ground-truth distance matrix", "graph": "cell transition graph",
        "node2vec": "structural cell embeddings", "visual-synth": "synthetic visual cell features",
        "train": "train the encoder", "embed": "embed all trajectories", "evaluate": "retrieval metrics",
        "search": "top-k neighbours of one trajectory", "export-geojson": "query + top-k as GeoJSON",
        "gradcheck": "finite-difference gradient checks",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=h) for name, h in helps.items()}
    subs["gen"].add_argument("--count", type=int)
    subs["gen"].add_argument("--out")
    subs["distances"].add_argument("--measure", choices=["dtw", "dfd", "edwp"])
    subs["evaluate"].add_argument("--baselines", action="store_true", help="also score random and Jaccard baselines")
    subs["evaluate"].add_argument("--all", action="store_true", help="evaluate on every trajectory, not the test split")
    for name in ("search", "export-geojson"):
        subs[name].add_argument("--query-id", type=int, required=True)
        subs[name].add_argument("-k", type=int, default=2 if name == "export-geojson" else 10)
    subs["export-geojson"].add_argument("--out")
    subs["gradcheck"].add_argument("--block", default="all")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        COMMANDS[args.command](Stage(cfg), args)
    except (DomainError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else repr(exc)
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
