"""Joint training of the recommender, the mask scorer and the graph autoencoder."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from maerec import evaluation
from maerec.corpus import SplitCorpus
from maerec.graph_autoencoder import (
    EdgeDecoder,
    LayerEmbeddings,
    encode,
    propagation_matrix,
    reconstruction_loss,
)
from maerec.masking import (
    TaskAdaptiveState,
    expand_sample,
    gumbel_from_uniform,
    mask_loss,
    relatedness_scores,
    select_anchors,
    semantic_relatedness,
    task_reward,
)
from maerec.sequence_encoder import PAD, SequenceBatch, SequenceEncoder, make_batch
from maerec.transition_graph import TransitionGraph, build_graph, remove_edges

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "L_rec", "L_mask", "L_con", "total", "r", "val_HR@10", "val_NDCG@10")

ABLATION_VARIANTS = ("L2M", "PA", "TA")

PROB_CLAMP = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    embed_dim: int = 64
    gnn_layers: int = 2
    num_blocks: int = 2
    num_heads: int = 4
    num_anchors: int = 200
    walk_depth: int = 5
    walk_ratio: float = 0.5
    window: int = 2
    reward_low: float = 0.1
    reward_window: int = 5
    weight_decay: float = 1e-5
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 30
    resample_interval: int = 10
    n_neg_rec: int = 1
    n_neg_con: int = 64
    seed: int = 0
    max_len: int = 50
    min_seq_len: int = 3
    dropout: float = 0.2
    neighborhood_cap: int = 32
    mask_loss_scope: str = "pool"
    mask_pool_factor: int = 4
    normalize_adj: bool = True
    use_layernorm: bool = True
    use_residual: bool = True
    use_validation: bool = False
    eval_protocol: str = "sampled"
    eval_negatives: int = 100
    dtype: str = "float32"
    num_threads: int = 0
    disable_learned_mask: bool = False
    disable_path_masking: bool = False
    disable_task_adaptive: bool = False
    disable_ssl: bool = False

    def validate(self) -> "TrainConfig":
        if self.embed_dim < 1 or self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be positive and divisible by num_heads")
        if self.gnn_layers < 1 or self.num_blocks < 1 or self.num_heads < 1:
            raise ValueError("layer/block/head counts must be >= 1")
        if not 0.0 < self.walk_ratio < 1.0:
            raise ValueError("walk_ratio must be in (0, 1)")
        if not 0.0 < self.reward_low < 1.0:
            raise ValueError("reward_low must be in (0, 1)")
        if self.reward_window <= 1:
            raise ValueError("reward_window must be > 1")
        if self.walk_depth < 1 or self.window < 1:
            raise ValueError("walk_depth and window must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.resample_interval < 1:
            raise ValueError("epochs/batch_size/resample_interval out of range")
        if self.n_neg_rec < 1 or self.n_neg_con < 1:
            raise ValueError("negative-sample counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.mask_loss_scope not in ("pool", "anchors", "all"):
            raise ValueError(f"unknown mask_loss_scope {self.mask_loss_scope!r}")
        if self.eval_protocol not in ("sampled", "full"):
            raise ValueError(f"unknown eval_protocol {self.eval_protocol!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values).validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def ablation_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Config for one of the paper-style ablations: random anchors (L2M),
    single-hop masks (PA), or no mask loss (TA)."""
    if variant == "L2M":
        return replace(config, disable_learned_mask=True)
    if variant == "PA":
        return replace(config, disable_path_masking=True)
    if variant == "TA":
        return replace(config, disable_task_adaptive=True)
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


class MAERecModel(nn.Module):
    """All learnable arrays: item table, Transformer, edge decoder."""

    def __init__(self, num_items: int, config: TrainConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.num_items = num_items
        self.item_embeddings = nn.Parameter(torch.zeros(num_items, config.embed_dim))
        self.encoder = SequenceEncoder(
            config.embed_dim,
            config.max_len,
            num_blocks=config.num_blocks,
            num_heads=config.num_heads,
            dropout=config.dropout,
            use_layernorm=config.use_layernorm,
            use_residual=config.use_residual,
        )
        self.decoder = EdgeDecoder(config.gnn_layers, config.embed_dim)
        self.to(config.torch_dtype)
        self.graph: TransitionGraph | None = None
        self._full_matrix: torch.Tensor | None = None
        self._masked_matrix: torch.Tensor | None = None
        self.masked_view = None

    @property
    def dtype(self) -> torch.dtype:
        return self.item_embeddings.dtype

    def initialize(self, rng: np.random.Generator) -> None:
        """Seed all parameters from a numpy generator so runs do not depend
        on torch's global RNG state."""
        for name, param in self.named_parameters():
            shape = tuple(param.shape)
            if name == "item_embeddings":
                arr = rng.normal(0.0, 0.1, size=shape)
            elif name.endswith("positional"):
                arr = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith("bias"):
                arr = np.zeros(shape)
            elif ".norm." in name:
                arr = np.ones(shape)
            elif param.dim() == 2:
                fan_out, fan_in = shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                arr = rng.uniform(-bound, bound, size=shape)
            else:
                arr = np.zeros(shape)
            with torch.no_grad():
                param.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype))

    def set_graph(self, graph: TransitionGraph) -> None:
        self.graph = graph
        self._full_matrix = propagation_matrix(graph, self.config.normalize_adj, self.dtype)
        self._masked_matrix = None
        self.masked_view = None

    def set_mask(self, view) -> None:
        self.masked_view = view
        if view is None:
            self._masked_matrix = None
        else:
            self._masked_matrix = propagation_matrix(view, self.config.normalize_adj, self.dtype)

    def item_representations(self, masked: bool = False) -> LayerEmbeddings:
        matrix = self._full_matrix
        if masked and self._masked_matrix is not None:
            matrix = self._masked_matrix
        if matrix is None:
            raise RuntimeError("set_graph must be called before encoding items")
        return encode(None, self.item_embeddings, self.config.gnn_layers, matrix=matrix)

    def sequence_output(
        self,
        items: torch.Tensor,
        lengths: torch.Tensor,
        item_table: torch.Tensor,
        dropout_gen: torch.Generator | None = None,
    ) -> torch.Tensor:
        return self.encoder(items, lengths, item_table, dropout_gen=dropout_gen)

    # Read-only interface used by the evaluation module.
    def eval_item_matrix(self) -> np.ndarray:
        with torch.no_grad():
            return (
                self.item_representations(masked=False).combined.numpy().astype(np.float64)
            )

    def eval_last_position(self, sequences, batch_size: int = 256) -> np.ndarray:
        max_len = self.config.max_len
        with torch.no_grad():
            table = self.item_representations(masked=False).combined
            out = []
            for start in range(0, len(sequences), batch_size):
                chunk = sequences[start : start + batch_size]
                batch = make_batch([(0, seq[-max_len:]) for seq in chunk])
                items = torch.from_numpy(batch.items)
                lengths = torch.from_numpy(batch.lengths)
                enc = self.encoder(items, lengths, table)
                out.append(enc[:, -1].numpy().astype(np.float64))
        return np.concatenate(out, axis=0)


def sample_rec_negatives(
    split: SplitCorpus,
    batch: SequenceBatch,
    n_neg: int,
    rng: np.random.Generator,
    num_items: int,
) -> np.ndarray:
    """One or more uniform negatives per position, avoiding each user's items."""
    b, t = batch.items.shape
    negs = rng.integers(0, num_items, size=(b, t, n_neg), dtype=np.int64)
    for i, user in enumerate(batch.users):
        forbidden = split.user_items(int(user))
        if len(forbidden) >= num_items:
            logger.warning("user %d interacted with every item; negatives degenerate", user)
            continue
        row = negs[i]
        for _ in range(100):
            bad = np.isin(row, list(forbidden))
            if not bad.any():
                break
            row[bad] = rng.integers(0, num_items, size=int(bad.sum()), dtype=np.int64)
    return negs


def recommendation_loss(
    seq_output: torch.Tensor,
    item_table: torch.Tensor,
    targets: np.ndarray,
    negatives: np.ndarray,
    valid: np.ndarray,
) -> torch.Tensor:
    """Binary cross-entropy of each position's next item against sampled
    negatives, averaged over valid positions.  Probabilities are clamped
    to avoid log(0)."""
    targets_t = torch.from_numpy(targets.clip(min=0))
    negs_t = torch.from_numpy(negatives)
    valid_t = torch.from_numpy(valid)
    pos_scores = (seq_output * item_table[targets_t]).sum(-1)
    neg_scores = (seq_output.unsqueeze(2) * item_table[negs_t]).sum(-1)
    pos_prob = torch.sigmoid(pos_scores).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    neg_prob = torch.sigmoid(neg_scores).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_position = -(torch.log(pos_prob) + torch.log1p(-neg_prob).mean(-1))
    return per_position[valid_t].mean()


def total_loss(l_rec, l_mask, l_con, weight_decay: float, parameters) -> torch.Tensor:
    """Unweighted sum of the three task losses plus squared-norm decay."""
    total = l_rec + l_mask + l_con
    if weight_decay:
        decay = sum(p.pow(2).sum() for p in parameters)
        total = total + weight_decay * decay
    return total


@dataclass
class TrainResult:
    model: MAERecModel
    graph: TransitionGraph
    config: TrainConfig
    log_rows: list[dict] = field(default_factory=list)


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_training_log(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in LOG_COLUMNS) + "\n")


def _training_rows(split: SplitCorpus, max_len: int):
    rows = []
    for seq in split.train_sequences:
        if len(seq.items) < 2:
            continue
        window = seq.items[-(max_len + 1):]
        rows.append((seq.user, window[:-1], window[1:]))
    return rows


def train(split: SplitCorpus, config: TrainConfig, log_path=None, graph: TransitionGraph | None = None) -> TrainResult:
    """Run the multi-task loop: recommendation loss on prefix batches, edge
    reconstruction on the masked graph, and the task-adaptive mask loss.

    Anchors, path masks and relatedness snapshots are refreshed every
    ``resample_interval`` epochs.  Fully deterministic for a fixed config.
    """
    config.validate()
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)
    if graph is None:
        graph = build_graph(split.train_sequences, config.window, num_nodes=split.num_items)

    seeds = np.random.SeedSequence(config.seed).spawn(8)
    init_rng, shuffle_rng, rec_rng, con_rng, mask_seed_rng, pool_rng, gumbel_rng, anchor_rng = (
        np.random.default_rng(s) for s in seeds
    )
    dropout_gen = torch.Generator().manual_seed(config.seed)

    model = MAERecModel(split.num_items, config)
    model.initialize(init_rng)
    model.set_graph(graph)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    rows = _training_rows(split, config.max_len)
    if not rows:
        raise ValueError("no trainable sequences (all train sequences shorter than 2)")
    state = TaskAdaptiveState(config.reward_window, config.reward_low)
    ssl_active = not config.disable_ssl
    mask_active = ssl_active and not config.disable_task_adaptive
    table = None
    path_mask = None

    log_rows: list[dict] = []
    for epoch in range(config.epochs):
        if ssl_active and epoch % config.resample_interval == 0:
            snapshot = model.item_embeddings.detach().cpu().numpy()
            depth = 1 if config.disable_path_masking else config.walk_depth
            table = semantic_relatedness(
                graph,
                snapshot,
                depth,
                cap=config.neighborhood_cap,
                seed=int(mask_seed_rng.integers(2**31)),
            )
            if config.disable_learned_mask:
                anchors = np.sort(
                    anchor_rng.choice(
                        split.num_items,
                        size=min(config.num_anchors, split.num_items),
                        replace=False,
                    )
                )
            else:
                anchors = select_anchors(table.gamma_perturbed, config.num_anchors)
            path_mask = expand_sample(
                graph,
                anchors,
                config.walk_ratio,
                depth,
                seed=int(mask_seed_rng.integers(2**31)),
            )
            model.set_mask(remove_edges(graph, path_mask.masked_edges))

        order = shuffle_rng.permutation(len(rows))
        for step, start in enumerate(range(0, len(rows), config.batch_size)):
            batch = make_batch([rows[i] for i in order[start : start + config.batch_size]])
            items_t = torch.from_numpy(batch.items)
            lengths_t = torch.from_numpy(batch.lengths)

            layer_embs = model.item_representations(masked=ssl_active)
            seq_out = model.sequence_output(
                items_t, lengths_t, layer_embs.combined, dropout_gen=dropout_gen
            )
            negatives = sample_rec_negatives(split, batch, config.n_neg_rec, rec_rng, split.num_items)
            l_rec = recommendation_loss(
                seq_out, layer_embs.combined, batch.targets, negatives, batch.mask
            )

            if ssl_active and path_mask is not None and path_mask.masked_edges:
                l_con = reconstruction_loss(
                    graph,
                    path_mask.masked_edges,
                    layer_embs,
                    model.decoder,
                    n_neg=config.n_neg_con,
                    seed=con_rng,
                )
            else:
                l_con = torch.zeros((), dtype=model.dtype)

            reward = 1.0
            if mask_active:
                reward = task_reward(state, float(l_rec.detach()))
                pool = _mask_pool(config, split.num_items, path_mask, pool_rng)
                gamma = relatedness_scores(model.item_embeddings, pool, table.neighborhoods)
                noise = torch.from_numpy(gumbel_from_uniform(gumbel_rng.random(len(pool)))).to(model.dtype)
                l_mask = mask_loss(gamma + noise, reward)
            else:
                l_mask = torch.zeros((), dtype=model.dtype)

            loss = total_loss(l_rec, l_mask, l_con, config.weight_decay, model.parameters())
            if not bool(torch.isfinite(loss)):
                _dump_diverged(log_path, batch, l_rec, l_mask, l_con)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"rec={float(l_rec)} mask={float(l_mask)} con={float(l_con)}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            log_rows.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "L_rec": float(l_rec.detach()),
                    "L_mask": float(l_mask.detach()),
                    "L_con": float(l_con.detach()),
                    "total": float(loss.detach()),
                    "r": float(reward),
                    "val_HR@10": None,
                    "val_NDCG@10": None,
                }
            )

        if config.use_validation and split.validation_targets:
            report = evaluation.evaluate(
                model,
                split,
                protocol=config.eval_protocol,
                num_negatives=config.eval_negatives,
                seed=config.seed,
                ks=(10,),
                target="validation",
            )
            log_rows[-1]["val_HR@10"] = report.hr[10]
            log_rows[-1]["val_NDCG@10"] = report.ndcg[10]

    if log_path is not None:
        write_training_log(log_rows, log_path)
    return TrainResult(model=model, graph=graph, config=config, log_rows=log_rows)


def _mask_pool(config: TrainConfig, num_items: int, path_mask, rng: np.random.Generator) -> np.ndarray:
    if config.mask_loss_scope == "anchors":
        return path_mask.anchors
    if config.mask_loss_scope == "all":
        return np.arange(num_items, dtype=np.int64)
    size = min(config.mask_pool_factor * config.num_anchors, num_items)
    return np.sort(rng.choice(num_items, size=size, replace=False))


def _dump_diverged(log_path, batch: SequenceBatch, l_rec, l_mask, l_con) -> None:
    if log_path is None:
        return
    dump = os.path.join(os.path.dirname(os.fspath(log_path)) or ".", "diverged_batch.npz")
    try:
        np.savez(
            dump,
            items=batch.items,
            targets=batch.targets,
            users=batch.users,
            losses=np.array([float(l_rec), float(l_mask), float(l_con)]),
        )
        logger.error("non-finite loss; offending batch dumped to %s", dump)
    except OSError:
        logger.exception("failed to write divergence dump")


def save_checkpoint(directory, model: MAERecModel, epoch: int) -> None:
    """Portable checkpoint: float32 arrays keyed by parameter name plus a
    JSON sidecar with config, seed and epoch."""
    os.makedirs(directory, exist_ok=True)
    arrays = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in model.named_parameters()
    }
    np.savez(os.path.join(directory, "arrays.npz"), **arrays)
    meta = {
        "config": model.config.to_dict(),
        "epoch": epoch,
        "seed": model.config.seed,
        "num_items": model.num_items,
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> tuple[MAERecModel, int]:
    """Rebuild a model (without graph) from :func:`save_checkpoint` output."""
    with open(os.path.join(directory, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = TrainConfig.from_dict(meta["config"])
    model = MAERecModel(meta["num_items"], config)
    with np.load(os.path.join(directory, "arrays.npz")) as arrays:
        params = dict(model.named_parameters())
        missing = set(params) - set(arrays.files)
        if missing:
            raise ValueError(f"checkpoint missing arrays: {sorted(missing)}")
        with torch.no_grad():
            for name in arrays.files:
                params[name].copy_(torch.from_numpy(arrays[name]).to(params[name].dtype))
    return model, int(meta["epoch"])
