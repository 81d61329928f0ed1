"""End-to-end pretraining loop with cosine schedule, checkpointing, and
deterministic resume.

Each iteration runs one region-stratified patch-level step and one
graph-level step and applies a single AdamW update of the combined loss to
the online parameters; key parameters move only through the EMA inside the
loss calls. Epochs count graph-level passes over the dataset.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .atlas_graph import PatchGraph
from .augment import AugmentConfig
from .contrastive import (
    ContrastiveConfig,
    GraphBatch,
    MomentumPair,
    NegativeQueue,
    PatchBatch,
    combined_loss,
    graph_level_loss,
    patch_level_loss,
)
from .encoders import EncoderConfig, GraphEncoder, PatchEncoder

__all__ = [
    "TrainConfig",
    "PretrainConfig",
    "Checkpoint",
    "TrainingDiverged",
    "cosine_lr",
    "pretrain",
    "build_param_groups",
    "extract_subject_features",
    "extract_node_features",
]

CHECKPOINT_FORMAT_VERSION = 1
LOSS_LOG_COLUMNS = ("step", "lr", "loss_patch", "loss_graph", "loss_total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    patch_batch: int = 128
    graph_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def build_param_groups(modules, weight_decay):
    """Decoupled weight decay on conv/linear weights only; norm parameters
    and biases go to a no-decay group."""
    decay, no_decay = [], []
    for module in modules:
        for name, param in module.named_parameters():
            if not param.requires_grad:
                continue
            if param.ndim <= 1 or "norm" in name.lower():
                no_decay.append(param)
            else:
                decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


class _GraphTensors:
    """Dataset of patch graphs stacked for fast batched indexing."""

    def __init__(self, graphs):
        graphs = list(graphs)
        if not graphs:
            raise ValueError("empty dataset")
        n = graphs[0].n_patches
        coords0 = graphs[0].centers_atlas_normalized
        for g in graphs:
            if g.n_patches != n or not np.allclose(g.centers_atlas_normalized, coords0):
                raise ValueError("all graphs must share one atlas grid")
        self.subject_ids = [g.subject_id for g in graphs]
        self.patches = np.stack([g.patches for g in graphs]).astype(np.float32)
        self.adjacency = np.stack([g.adjacency for g in graphs]).astype(np.float32)
        self.coords = coords0.astype(np.float32)
        self.n_subjects = len(graphs)
        self.n_regions = n


def _build_models(config: PretrainConfig):
    torch.manual_seed(config.train.seed)
    patch_pair = MomentumPair(PatchEncoder(config.encoder), config.contrastive.momentum)
    graph_pair = MomentumPair(GraphEncoder(config.encoder), config.contrastive.momentum)
    return patch_pair, graph_pair


@dataclass
class Checkpoint:
    """Everything needed for exact resume and downstream feature extraction."""

    state: dict

    def save(self, path) -> None:
        torch.save(self.state, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(torch.load(path, map_location="cpu", weights_only=False))

    @property
    def config(self) -> PretrainConfig:
        s = self.state
        return PretrainConfig(
            encoder=EncoderConfig(**s["encoder_config"]),
            contrastive=ContrastiveConfig(**s["contrastive_config"]),
            augment=AugmentConfig(**s["augment_config"]),
            train=TrainConfig(**s["train_config"]),
        )

    def build_models(self):
        """Reconstruct online/key encoder pairs with trained weights."""
        config = self.config
        patch_pair, graph_pair = _build_models(config)
        patch_pair.online.load_state_dict(self.state["patch_online"])
        patch_pair.key.load_state_dict(self.state["patch_key"])
        graph_pair.online.load_state_dict(self.state["graph_online"])
        graph_pair.key.load_state_dict(self.state["graph_key"])
        return patch_pair, graph_pair

    def build_queues(self):
        config = self.config
        f = config.encoder.feature_dim
        patch_queue = NegativeQueue(config.contrastive.queue_capacity, f)
        graph_queue = NegativeQueue(config.contrastive.graph_queue_capacity, f)
        patch_queue.load_state_dict(self.state["patch_queue"])
        graph_queue.load_state_dict(self.state["graph_queue"])
        return patch_queue, graph_queue


def _write_loss_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])


def pretrain(
    graphs,
    config: PretrainConfig,
    out_dir=None,
    resume_from=None,
    config_hash=None,
) -> Checkpoint:
    """Pretrain both encoders on a dataset of patch graphs.

    Writes checkpoint.pt and loss_log.csv into out_dir (if given) and returns
    the final checkpoint. resume_from continues a saved run bit-compatibly.
    """
    data = _GraphTensors(graphs)
    if data.n_subjects < 2:
        raise ValueError("pretraining needs at least 2 subjects")
    train = config.train
    cc = config.contrastive
    graph_batch = min(train.graph_batch, data.n_subjects)
    patch_batch = min(train.patch_batch, data.n_subjects)
    steps_per_epoch = math.ceil(data.n_subjects / graph_batch)
    total_steps = train.epochs * steps_per_epoch

    patch_pair, graph_pair = _build_models(config)
    f = config.encoder.feature_dim
    patch_queue = NegativeQueue(cc.queue_capacity, f)
    graph_queue = NegativeQueue(cc.graph_queue_capacity, f) if cc.use_graph_queue else None
    optimizer = torch.optim.AdamW(
        build_param_groups([patch_pair.online, graph_pair.online], train.weight_decay),
        lr=train.lr,
        betas=(train.beta1, train.beta2),
    )
    rng = np.random.default_rng(train.seed)
    start_step = 0
    epoch_order = None
    loss_rows = []

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        s = ckpt.state
        patch_pair.online.load_state_dict(s["patch_online"])
        patch_pair.key.load_state_dict(s["patch_key"])
        graph_pair.online.load_state_dict(s["graph_online"])
        graph_pair.key.load_state_dict(s["graph_key"])
        optimizer.load_state_dict(s["optimizer"])
        patch_queue.load_state_dict(s["patch_queue"])
        if graph_queue is not None:
            graph_queue.load_state_dict(s["graph_queue"])
        rng.bit_generator.state = s["np_rng"]
        torch.set_rng_state(s["torch_rng"])
        start_step = s["step"]
        epoch_order = np.asarray(s["epoch_order"]) if s["epoch_order"] is not None else None
        loss_rows = [tuple(r) for r in s["loss_rows"]]

    def snapshot(step):
        return Checkpoint(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "encoder_config": asdict(config.encoder),
                "contrastive_config": asdict(config.contrastive),
                "augment_config": asdict(config.augment),
                "train_config": asdict(train),
                "config_hash": config_hash,
                "step": step,
                "total_steps": total_steps,
                "epoch_order": None if epoch_order is None else epoch_order.tolist(),
                "patch_online": patch_pair.online.state_dict(),
                "patch_key": patch_pair.key.state_dict(),
                "graph_online": graph_pair.online.state_dict(),
                "graph_key": graph_pair.key.state_dict(),
                "optimizer": optimizer.state_dict(),
                "patch_queue": patch_queue.state_dict(),
                "graph_queue": graph_queue.state_dict()
                if graph_queue is not None
                else NegativeQueue(cc.graph_queue_capacity, f).state_dict(),
                "np_rng": rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
                "loss_rows": [list(r) for r in loss_rows],
                "subject_ids": data.subject_ids,
            }
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    patch_pair.online.train()
    patch_pair.key.train()
    graph_pair.online.train()
    graph_pair.key.train()

    for step in range(start_step, total_steps):
        lr = cosine_lr(step, total_steps, train.lr) if train.schedule == "cosine" else train.lr
        for group in optimizer.param_groups:
            group["lr"] = lr

        pos_in_epoch = step % steps_per_epoch
        if pos_in_epoch == 0:
            epoch_order = rng.permutation(data.n_subjects)

        region = int(rng.integers(data.n_regions))
        patch_subjects = rng.choice(data.n_subjects, size=patch_batch, replace=False)
        p_batch = PatchBatch(
            region_id=region,
            patches=data.patches[patch_subjects, region],
            coords=data.coords[region],
        )
        graph_subjects = epoch_order[pos_in_epoch * graph_batch : (pos_in_epoch + 1) * graph_batch]
        g_batch = GraphBatch(
            patches=data.patches[graph_subjects],
            coords=data.coords,
            adjacency=data.adjacency[graph_subjects],
        )

        optimizer.zero_grad()
        l_patch, _ = patch_level_loss(p_batch, patch_pair, patch_queue, cc, config.augment, rng)
        l_graph, _ = graph_level_loss(
            g_batch, patch_pair, graph_pair, graph_queue, cc, config.augment, rng
        )
        loss = combined_loss(l_patch, l_graph, cc)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: patch={float(l_patch)}, graph={float(l_graph)}"
            )
        loss.backward()
        optimizer.step()
        loss_rows.append(
            (step, lr, float(l_patch.detach()), float(l_graph.detach()), float(loss.detach()))
        )

        if out_dir is not None and (step + 1) % steps_per_epoch == 0:
            epoch_ckpt = snapshot(step + 1)
            epoch_ckpt.save(out_dir / "checkpoint.pt")
            epoch_ckpt.save(out_dir / f"checkpoint_epoch_{(step + 1) // steps_per_epoch:04d}.pt")
            _write_loss_log(loss_rows, out_dir / "loss_log.csv")

    final = snapshot(total_steps)
    if out_dir is not None:
        final.save(out_dir / "checkpoint.pt")
        _write_loss_log(loss_rows, out_dir / "loss_log.csv")
    final.loss_rows = loss_rows
    return final


def _eval_models(checkpoint: Checkpoint):
    patch_pair, graph_pair = checkpoint.build_models()
    patch_pair.online.eval()
    graph_pair.online.eval()
    return patch_pair.online, graph_pair.online


def _check_grid(checkpoint: Checkpoint, graph: PatchGraph):
    patch_size = checkpoint.config.encoder.patch_size
    if tuple(graph.patches.shape[1:]) != patch_size:
        raise ValueError(
            f"graph patch size {graph.patches.shape[1:]} != checkpoint {patch_size}"
        )


def extract_node_features(checkpoint: Checkpoint, graph: PatchGraph, _models=None) -> np.ndarray:
    """Propagated node features (N, F), inference mode, no augmentation."""
    _check_grid(checkpoint, graph)
    patch_encoder, graph_encoder = _models or _eval_models(checkpoint)
    with torch.no_grad():
        patches = torch.from_numpy(graph.patches)
        coords = torch.as_tensor(graph.centers_atlas_normalized, dtype=torch.float32)
        h = patch_encoder(patches, coords)
        adj = torch.as_tensor(graph.adjacency, dtype=torch.float32)
        return graph_encoder.propagate(h, adj).numpy()


def extract_subject_features(checkpoint: Checkpoint, graph: PatchGraph, _models=None) -> np.ndarray:
    """Downstream subject features: node encoding, propagation, mean pooling.
    The projection head is discarded."""
    return extract_node_features(checkpoint, graph, _models=_models).mean(axis=0)


def extract_features_batch(checkpoint: Checkpoint, graphs):
    """(subject_ids, pooled (K, F), node features (K, N, F)) for a dataset."""
    models = _eval_models(checkpoint)
    ids, pooled, nodes = [], [], []
    for graph in graphs:
        h = extract_node_features(checkpoint, graph, _models=models)
        ids.append(graph.subject_id)
        nodes.append(h)
        pooled.append(h.mean(axis=0))
    return ids, np.stack(pooled), np.stack(nodes)
