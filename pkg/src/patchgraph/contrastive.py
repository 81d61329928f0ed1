"""InfoNCE losses, region-tagged momentum queues, and EMA key encoders.

Patch-level loss: positives are two augmented views of the same patch; the
negatives are other subjects' patches at the same anatomical region (in-batch
keys plus queue entries carrying that region tag). Graph-level loss:
positives are two augmented views of the same subject's graph; negatives are
other subjects (in-batch keys plus a graph queue). All embeddings are
L2-normalized before the dot products so the temperature is meaningful.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .augment import AugmentConfig, random_view_batch
from .encoders import GraphEncoder, PatchEncoder

__all__ = [
    "ContrastiveConfig",
    "NegativeQueue",
    "MomentumPair",
    "PatchBatch",
    "GraphBatch",
    "info_nce",
    "momentum_update",
    "queue_push",
    "patch_level_loss",
    "graph_level_loss",
    "combined_loss",
]

GRAPH_TAG = -1  # queue tag for graph-level (subject) embeddings


@dataclass
class ContrastiveConfig:
    temperature: float = 0.2
    queue_capacity: int = 4096
    graph_queue_capacity: int = 4096
    use_graph_queue: bool = True
    momentum: float = 0.999
    patch_batch: int = 128
    graph_batch: int = 16
    patch_loss_weight: float = 1.0
    graph_loss_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.queue_capacity < 1 or self.graph_queue_capacity < 1:
            raise ValueError("queue capacities must be >= 1")


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if torch.any(norms <= eps):
        raise ValueError("cannot L2-normalize a zero-norm vector")
    return x / norms


def info_nce(query, positive, negatives, temperature) -> torch.Tensor:
    """-log softmax of the positive among positive + negatives.

    Inputs are L2-normalized vectors: query (F,), positive (F,), negatives
    (K, F) with K >= 1. Differentiable w.r.t. the query.
    """
    query = torch.as_tensor(np.asarray(query)) if not torch.is_tensor(query) else query
    positive = torch.as_tensor(np.asarray(positive), dtype=query.dtype)
    negatives = torch.as_tensor(np.asarray(negatives), dtype=query.dtype)
    if negatives.dim() == 1:
        negatives = negatives[None]
    if negatives.shape[0] < 1:
        raise ValueError("info_nce requires at least one negative")
    for v in (query, positive):
        if v.norm() <= 1e-12:
            raise ValueError("cannot contrast a zero-norm vector")
    if torch.any(negatives.norm(dim=-1) <= 1e-12):
        raise ValueError("cannot contrast a zero-norm vector")
    pos_logit = (query * positive).sum() / temperature
    neg_logits = negatives @ query / temperature
    return torch.logsumexp(torch.cat([pos_logit[None], neg_logits]), dim=0) - pos_logit


def _batched_info_nce(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    """Mean loss over queries; neg_logits may contain -inf padding."""
    all_logits = torch.cat([pos_logits[:, None], neg_logits], dim=1)
    return (torch.logsumexp(all_logits, dim=1) - pos_logits).mean()


class NegativeQueue:
    """Fixed-capacity FIFO of (embedding, tag) pairs; oldest entries evicted."""

    def __init__(self, capacity: int, feature_dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.feature_dim = feature_dim
        self._embeddings = torch.zeros(capacity, feature_dim)
        self._tags = torch.zeros(capacity, dtype=torch.int64)
        self._cursor = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, embeddings: torch.Tensor, tags) -> None:
        embeddings = embeddings.detach().to(torch.float32)
        if embeddings.dim() == 1:
            embeddings = embeddings[None]
        if embeddings.shape[1] != self.feature_dim:
            raise ValueError(
                f"embedding width {embeddings.shape[1]} != queue width {self.feature_dim}"
            )
        n = embeddings.shape[0]
        tags_t = torch.as_tensor(tags, dtype=torch.int64).reshape(-1)
        if tags_t.numel() == 1:
            tags_t = tags_t.expand(n).clone()
        if tags_t.numel() != n:
            raise ValueError(f"{n} embeddings but {tags_t.numel()} tags")
        if n >= self.capacity:
            self._embeddings.copy_(embeddings[-self.capacity :])
            self._tags.copy_(tags_t[-self.capacity :])
            self._cursor = 0
            self._size = self.capacity
            return
        first = min(self.capacity - self._cursor, n)
        self._embeddings[self._cursor : self._cursor + first] = embeddings[:first]
        self._tags[self._cursor : self._cursor + first] = tags_t[:first]
        rest = n - first
        if rest:
            self._embeddings[:rest] = embeddings[first:]
            self._tags[:rest] = tags_t[first:]
        self._cursor = (self._cursor + n) % self.capacity
        self._size = min(self._size + n, self.capacity)

    def _order(self):
        """Row indices oldest-to-newest."""
        if self._size < self.capacity:
            return torch.arange(self._size)
        return torch.cat([torch.arange(self._cursor, self.capacity), torch.arange(self._cursor)])

    def entries(self):
        """(embeddings, tags) in FIFO age order."""
        order = self._order()
        return self._embeddings[order], self._tags[order]

    def embeddings_for_tag(self, tag: int) -> torch.Tensor:
        emb, tags = self.entries()
        return emb[tags == int(tag)]

    def state_dict(self):
        return {
            "embeddings": self._embeddings.clone(),
            "tags": self._tags.clone(),
            "cursor": self._cursor,
            "size": self._size,
            "capacity": self.capacity,
            "feature_dim": self.feature_dim,
        }

    def load_state_dict(self, state):
        if state["capacity"] != self.capacity or state["feature_dim"] != self.feature_dim:
            raise ValueError("queue geometry mismatch")
        self._embeddings.copy_(state["embeddings"])
        self._tags.copy_(state["tags"])
        self._cursor = int(state["cursor"])
        self._size = int(state["size"])


def queue_push(queue: NegativeQueue, embeddings, tags) -> None:
    queue.push(embeddings, tags)


class MomentumPair:
    """Online module plus its EMA (key) copy; the key never sees gradients."""

    def __init__(self, online: torch.nn.Module, momentum: float = 0.999):
        self.online = online
        self.key = copy.deepcopy(online)
        for p in self.key.parameters():
            p.requires_grad_(False)
        self.momentum = momentum

    def momentum_update(self) -> None:
        with torch.no_grad():
            online_params = list(self.online.parameters())
            key_params = list(self.key.parameters())
            if len(online_params) != len(key_params):
                raise ValueError("online/key parameter schemas mismatch")
            for p_k, p_o in zip(key_params, online_params):
                if p_k.shape != p_o.shape:
                    raise ValueError("online/key parameter shapes mismatch")
                p_k.mul_(self.momentum).add_(p_o, alpha=1.0 - self.momentum)


def momentum_update(pair: MomentumPair) -> None:
    pair.momentum_update()


@dataclass
class PatchBatch:
    """One region-stratified step: each entry is a different subject's patch
    at the same anatomical region."""

    region_id: int
    patches: np.ndarray  # (B, D, H, W)
    coords: np.ndarray  # (3,) normalized atlas coordinates of the region


@dataclass
class GraphBatch:
    patches: np.ndarray  # (B, N, D, H, W)
    coords: np.ndarray  # (N, 3) normalized atlas coordinates
    adjacency: np.ndarray  # (B, N, N)


def patch_level_loss(
    batch: PatchBatch,
    pair: MomentumPair,
    queue: NegativeQueue,
    config: ContrastiveConfig,
    augment_config: AugmentConfig,
    rng,
):
    """Region-conditioned InfoNCE over one batch; also EMA-updates the key
    encoder and pushes the new keys into the queue tagged with the region."""
    b = batch.patches.shape[0]
    queue_negs = queue.embeddings_for_tag(batch.region_id)
    n_negatives = (b - 1) + queue_negs.shape[0]
    if n_negatives < 1:
        raise ValueError("patch-level loss needs >= 2 subjects or a non-empty queue")

    pair.momentum_update()
    dtype = next(pair.online.parameters()).dtype
    coords = torch.as_tensor(np.asarray(batch.coords), dtype=dtype)[None].expand(b, -1)
    view_q = torch.from_numpy(random_view_batch(batch.patches, augment_config, rng)).to(dtype)
    view_k = torch.from_numpy(random_view_batch(batch.patches, augment_config, rng)).to(dtype)
    q = l2_normalize(pair.online(view_q, coords))
    with torch.no_grad():
        k = l2_normalize(pair.key(view_k, coords))

    tau = config.temperature
    pos = (q * k).sum(dim=1) / tau
    in_batch = (q @ k.T) / tau
    in_batch.fill_diagonal_(float("-inf"))  # own key is the positive, not a negative
    negs = [in_batch]
    if queue_negs.shape[0]:
        negs.append((q @ queue_negs.to(q.dtype).T) / tau)
    loss = _batched_info_nce(pos, torch.cat(negs, dim=1))

    queue.push(k, batch.region_id)
    return loss, {"n_negatives": n_negatives, "batch": b}


def _encode_graph_view(patch_encoder, graph_encoder, batch: GraphBatch, augment_config, rng):
    b, n = batch.patches.shape[:2]
    dtype = next(patch_encoder.parameters()).dtype
    flat = batch.patches.reshape(b * n, *batch.patches.shape[2:])
    views = torch.from_numpy(random_view_batch(flat, augment_config, rng)).to(dtype)
    coords = torch.as_tensor(np.asarray(batch.coords), dtype=dtype)
    coords = coords[None].expand(b, -1, -1).reshape(b * n, 3)
    h = patch_encoder(views, coords).reshape(b, n, -1)
    adj = torch.as_tensor(np.asarray(batch.adjacency), dtype=dtype)
    return graph_encoder(h, adj)


def graph_level_loss(
    batch: GraphBatch,
    patch_pair: MomentumPair,
    graph_pair: MomentumPair,
    queue: NegativeQueue | None,
    config: ContrastiveConfig,
    augment_config: AugmentConfig,
    rng,
):
    """Subject-level InfoNCE: two augmented graph views per subject, other
    subjects (and the graph queue) as negatives."""
    b = batch.patches.shape[0]
    queue_negs = None
    if queue is not None and config.use_graph_queue:
        queue_negs, _ = queue.entries()
    n_queue = 0 if queue_negs is None else queue_negs.shape[0]
    n_negatives = (b - 1) + n_queue
    if n_negatives < 1:
        raise ValueError("graph-level loss needs >= 2 subjects or a non-empty queue")

    patch_pair.momentum_update()
    graph_pair.momentum_update()
    q = l2_normalize(_encode_graph_view(patch_pair.online, graph_pair.online, batch, augment_config, rng))
    with torch.no_grad():
        k = l2_normalize(_encode_graph_view(patch_pair.key, graph_pair.key, batch, augment_config, rng))

    tau = config.temperature
    pos = (q * k).sum(dim=1) / tau
    in_batch = (q @ k.T) / tau
    in_batch.fill_diagonal_(float("-inf"))
    negs = [in_batch]
    if n_queue:
        negs.append((q @ queue_negs.to(q.dtype).T) / tau)
    loss = _batched_info_nce(pos, torch.cat(negs, dim=1))

    if queue is not None and config.use_graph_queue:
        queue.push(k, GRAPH_TAG)
    return loss, {"n_negatives": n_negatives, "batch": b}


def combined_loss(patch_loss, graph_loss, config: ContrastiveConfig):
    """Weighted sum of the two objectives (both weights default to 1)."""
    return config.patch_loss_weight * patch_loss + config.graph_loss_weight * graph_loss
