"""Command-line pipeline: prepare, train, evaluate, ablate, perturb, sweep,
dump-relatedness, synth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from maerec import evaluation, trainer
from maerec.corpus import (
    UserSequence,
    build_sequences,
    inject_noise,
    leave_one_out_split,
    read_interactions,
    write_metadata,
    write_sequences,
)
from maerec.masking import semantic_relatedness
from maerec.trainer import TrainConfig, ablation_variant, load_checkpoint, save_checkpoint, train
from maerec.transition_graph import build_graph, dump_edges

logger = logging.getLogger(__name__)

NOISE_LEVELS = (0.0, 0.05, 0.15, 0.25, 0.35)
SWEEP_GRIDS = {
    "walk_ratio": (0.3, 0.5, 0.7),
    "walk_depth": (1, 3, 5, 7),
    "num_anchors": (50, 100, 200, 400),
}


def synth_corpus(
    num_users: int = 1000,
    num_items: int = 500,
    seed: int = 7,
    cluster_size: int = 25,
    intra_prob: float = 0.8,
    long_fraction: float = 0.1,
    medium_fraction: float = 0.05,
) -> tuple[list[UserSequence], np.ndarray]:
    """Synthetic interaction corpus with planted cluster transitions.

    Items fall into contiguous interest clusters; each next item stays in
    the current cluster with probability ``intra_prob``, otherwise jumps
    uniformly to another cluster.  Most sequences are short (mean around 5)
    with a long tail of 20-50 interactions to populate the length buckets.
    Returns the sequences and the item -> cluster assignment.
    """
    if num_items < 50:
        raise ValueError(f"need at least 50 items, got {num_items}")
    rng = np.random.default_rng(seed)
    num_clusters = max(2, num_items // cluster_size)
    cluster_of = (np.arange(num_items, dtype=np.int64) * num_clusters) // num_items
    members = [np.flatnonzero(cluster_of == c) for c in range(num_clusters)]

    sequences = []
    for user in range(num_users):
        roll = rng.random()
        if roll < long_fraction:
            length = 20 + min(int(rng.exponential(3.0)), 30)
        elif roll < long_fraction + medium_fraction:
            length = 10 + min(int(rng.exponential(2.5)), 9)
        else:
            length = 3 + min(int(rng.exponential(0.6)), 6)
        items = [int(rng.integers(num_items))]
        while len(items) < length:
            current = items[-1]
            cluster = int(cluster_of[current])
            if rng.random() < intra_prob:
                pool = members[cluster]
                nxt = int(pool[rng.integers(pool.size)])
                while nxt == current:
                    nxt = int(pool[rng.integers(pool.size)])
            else:
                nxt = int(rng.integers(num_items))
                while int(cluster_of[nxt]) == cluster:
                    nxt = int(rng.integers(num_items))
            items.append(nxt)
        sequences.append(UserSequence(user, items))
    return sequences, cluster_of


def make_run_dir(root: str | None, command: str, run_id: str | None = None) -> str:
    """Create a fresh timestamped run directory with a lock file and an
    ``.incomplete`` marker that is removed on success."""
    root = root or os.environ.get("MAEREC_OUT") or "maerec_runs"
    os.makedirs(root, exist_ok=True)
    stamp = run_id or time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{command}-{stamp}")
    path = base
    suffix = 1
    while True:
        try:
            os.mkdir(path)
            break
        except FileExistsError:
            path = f"{base}-{suffix}"
            suffix += 1
    with open(os.path.join(path, ".lock"), "w", encoding="utf-8") as fh:
        fh.write(f"{os.getpid()}\n")
    with open(os.path.join(path, ".incomplete"), "w", encoding="utf-8") as fh:
        fh.write("running\n")
    return path


def mark_complete(run_dir: str) -> None:
    marker = os.path.join(run_dir, ".incomplete")
    if os.path.exists(marker):
        os.remove(marker)


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValueError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(TrainConfig.from_json(args.config).to_dict())
    for override in getattr(args, "set", None) or []:
        key, value = _parse_override(override)
        values[key] = value
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict({**TrainConfig().to_dict(), **values})


def _load_split(args, config: TrainConfig):
    records = read_interactions(args.data, args.format)
    sequences, user_ids, item_ids = build_sequences(records, config.min_seq_len)
    split = leave_one_out_split(sequences, use_validation=config.use_validation)
    return sequences, split, user_ids, item_ids


def cmd_synth(args, run_dir: str) -> None:
    sequences, cluster_of = synth_corpus(args.users, args.items, seed=args.seed if args.seed is not None else 7)
    out_file = os.path.join(run_dir, "corpus.txt")
    write_sequences(out_file, sequences)
    np.savetxt(os.path.join(run_dir, "clusters.txt"), cluster_of, fmt="%d")
    mean_len = float(np.mean([len(s.items) for s in sequences]))
    print(f"wrote {len(sequences)} sequences over {args.items} items to {out_file}")
    print(f"mean length {mean_len:.2f}")


def cmd_prepare(args, run_dir: str) -> None:
    config = build_config(args)
    records = read_interactions(args.data, args.format)
    sequences, user_ids, item_ids = build_sequences(records, config.min_seq_len)
    write_sequences(os.path.join(run_dir, "sequences.txt"), sequences)
    write_metadata(
        os.path.join(run_dir, "metadata.txt"),
        user_ids,
        item_ids,
        min_seq_len=config.min_seq_len,
        source=os.path.abspath(args.data),
    )
    print(f"prepared {len(sequences)} users / {len(item_ids)} items into {run_dir}")


def cmd_train(args, run_dir: str) -> None:
    config = build_config(args)
    _, split, _, _ = _load_split(args, config)
    config.save(os.path.join(run_dir, "config.json"))
    result = train(split, config, log_path=os.path.join(run_dir, "training_log.csv"))
    save_checkpoint(os.path.join(run_dir, "checkpoint"), result.model, config.epochs)
    if args.dump_graph:
        dump_edges(result.graph, os.path.join(run_dir, "graph_edges.txt"))
    print(f"trained {config.epochs} epochs; artifacts in {run_dir}")


def cmd_evaluate(args, run_dir: str) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    config = model.config
    _, split, _, _ = _load_split(args, config)
    model.set_graph(build_graph(split.train_sequences, config.window, num_nodes=split.num_items))
    protocol = args.protocol or config.eval_protocol
    report = evaluation.evaluate(
        model,
        split,
        protocol=protocol,
        num_negatives=args.negatives,
        seed=config.seed if args.seed is None else args.seed,
    )
    evaluation.write_metrics_csv(report, os.path.join(run_dir, "metrics.csv"))
    print(report.format_table())


def _train_and_score(split, config, run_dir, name, ks=(10, 20), save_model=False):
    subdir = os.path.join(run_dir, name)
    os.makedirs(subdir, exist_ok=True)
    result = train(split, config, log_path=os.path.join(subdir, "training_log.csv"))
    if save_model:
        save_checkpoint(os.path.join(subdir, "checkpoint"), result.model, config.epochs)
    report = evaluation.evaluate(
        result.model,
        split,
        protocol=config.eval_protocol,
        num_negatives=config.eval_negatives,
        seed=config.seed,
        ks=ks,
    )
    return report


def cmd_ablate(args, run_dir: str) -> None:
    base = build_config(args)
    _, split, _, _ = _load_split(args, base)
    variants = {"full": base}
    for name in trainer.ABLATION_VARIANTS:
        variants[f"-{name}"] = ablation_variant(base, name)
    if args.with_ssl_off:
        variants["-SSL"] = TrainConfig.from_dict({**base.to_dict(), "disable_ssl": True})
    seeds = [base.seed + i for i in range(args.seeds)]
    rows = []
    for name, config in variants.items():
        hr10, ndcg10 = [], []
        for seed in seeds:
            cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
            report = _train_and_score(split, cfg, run_dir, f"{name.strip('-') or 'full'}-seed{seed}")
            hr10.append(report.hr[10])
            ndcg10.append(report.ndcg[10])
        rows.append(
            (name, len(seeds), float(np.mean(hr10)), float(np.std(hr10)),
             float(np.mean(ndcg10)), float(np.std(ndcg10)))
        )
        print(f"{name:>6}: HR@10={rows[-1][2]:.4f} NDCG@10={rows[-1][4]:.4f}")
    with open(os.path.join(run_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("variant,seeds,HR@10,HR@10_std,NDCG@10,NDCG@10_std\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]},{row[2]:.6f},{row[3]:.6f},{row[4]:.6f},{row[5]:.6f}\n")


def cmd_perturb(args, run_dir: str) -> None:
    base = build_config(args)
    sequences, split, _, _ = _load_split(args, base)
    seeds = [base.seed + i for i in range(args.seeds)]
    results: dict[tuple[str, float], list[float]] = {}
    for ssl_name, ssl_off in (("on", False), ("off", True)):
        for level in NOISE_LEVELS:
            scores = []
            for seed in seeds:
                cfg = TrainConfig.from_dict(
                    {**base.to_dict(), "seed": seed, "disable_ssl": ssl_off}
                )
                noisy_split = _noisy_split(split, level, base.seed, seed)
                report = _train_and_score(
                    noisy_split, cfg, run_dir, f"ssl-{ssl_name}-noise{int(level * 100)}-seed{seed}"
                )
                scores.append(report.hr[20])
            results[(ssl_name, level)] = scores
    with open(os.path.join(run_dir, "perturb.csv"), "w", encoding="utf-8") as fh:
        fh.write("ssl,noise,HR@20,HR@20_std,degradation\n")
        for ssl_name in ("on", "off"):
            clean = float(np.mean(results[(ssl_name, 0.0)]))
            for level in NOISE_LEVELS:
                mean = float(np.mean(results[(ssl_name, level)]))
                std = float(np.std(results[(ssl_name, level)]))
                degradation = 1.0 - mean / clean if clean > 0 else float("nan")
                fh.write(f"{ssl_name},{level},{mean:.6f},{std:.6f},{degradation:.6f}\n")
                print(f"ssl={ssl_name} noise={level}: HR@20={mean:.4f} degradation={degradation:.4f}")


def _noisy_split(split, level: float, base_seed: int, run_seed: int):
    """Noise the train sequences only; held-out targets stay clean so
    degradation measures robustness, not target corruption."""
    if level == 0.0:
        return split
    noise_seed = int(
        np.random.SeedSequence([base_seed, run_seed, int(level * 100)]).generate_state(1)[0]
    )
    noisy = inject_noise(split.train_sequences, level, noise_seed, num_items=split.num_items)
    return type(split)(
        train_sequences=noisy,
        validation_targets=split.validation_targets,
        test_targets=split.test_targets,
        num_items=split.num_items,
        num_users=split.num_users,
    )


def cmd_sweep(args, run_dir: str) -> None:
    base = build_config(args)
    _, split, _, _ = _load_split(args, base)
    params = [args.param] if args.param else list(SWEEP_GRIDS)
    with open(os.path.join(run_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("param,value,HR@20,NDCG@20\n")
        for param in params:
            for value in SWEEP_GRIDS[param]:
                cfg = TrainConfig.from_dict({**base.to_dict(), param: value})
                report = _train_and_score(split, cfg, run_dir, f"{param}-{value}", ks=(10, 20))
                fh.write(f"{param},{value},{report.hr[20]:.6f},{report.ndcg[20]:.6f}\n")
                print(f"{param}={value}: HR@20={report.hr[20]:.4f}")


def cmd_dump_relatedness(args, run_dir: str) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    config = model.config
    _, split, _, _ = _load_split(args, config)
    graph = build_graph(split.train_sequences, config.window, num_nodes=split.num_items)
    table = semantic_relatedness(
        graph,
        model.item_embeddings.detach().numpy(),
        config.walk_depth,
        cap=config.neighborhood_cap,
        seed=config.seed,
    )
    out = os.path.join(run_dir, "relatedness.tsv")
    with open(out, "w", encoding="utf-8") as fh:
        for item in range(split.num_items):
            fh.write(f"{item}\t{table.gamma[item]:.10g}\t{table.gamma_perturbed[item]:.10g}\n")
    print(f"wrote per-item relatedness to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maerec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--out", default=None, help="output root (default $MAEREC_OUT or ./maerec_runs)")
        p.add_argument("--run-id", default=None, help="run directory suffix (default timestamp)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if data:
            p.add_argument("--data", required=True, help="corpus file")
            p.add_argument("--format", default="sequences", choices=("triples", "sequences"))

    p = sub.add_parser("synth", help="generate the planted-cluster synthetic corpus")
    common(p, data=False)
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--items", type=int, default=500)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest and split a raw interaction log")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--dump-graph", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=("sampled", "full"), default=None)
    p.add_argument("--negatives", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the masking ablations")
    common(p)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--with-ssl-off", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("perturb", help="noise-robustness comparison with and without SSL")
    common(p)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("sweep", help="hyperparameter sweeps")
    common(p)
    p.add_argument("--param", choices=tuple(SWEEP_GRIDS), default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-relatedness", help="write per-item relatedness scores")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_dump_relatedness)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    run_dir = make_run_dir(args.out, args.command.replace("_", "-"), args.run_id)
    print(f"run directory: {run_dir}")
    try:
        args.func(args, run_dir)
    except Exception as exc:  # surface module errors as exit status
        logger.error("%s failed: %s", args.command, exc)
        return 1
    mark_complete(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
