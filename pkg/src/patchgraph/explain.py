"""Per-region activation maps decomposing a linear probe's logit, heatmap
rendering into subject space, and embedding export for 2D projection.

For a probe trained on mean-pooled node features, the logit decomposes as
logit = bias + (1/N) * sum_j score_j with score_j = weights . node_j; node
scores are sigmoid-normalized for display, which preserves their ranking.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .atlas_graph import PatchGraph
from .volume_io import Volume

__all__ = [
    "ActivationMap",
    "region_activations",
    "render_heatmap",
    "export_embeddings",
    "pca_2d",
]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class ActivationMap:
    """Raw and sigmoid-normalized per-region scores for one probe class."""

    raw: np.ndarray  # (N,) logit-unit scores
    normalized: np.ndarray  # (N,) in (0, 1)
    bias: float
    target_class: object = None
    subject_id: str | None = None

    @property
    def logit(self):
        """The probe logit this map decomposes: bias + mean of raw scores."""
        return float(self.bias + self.raw.mean())


def region_activations(
    weights,
    bias,
    node_features,
    target_class=None,
    class_index=None,
    subject_id=None,
    prenormalize=False,
) -> ActivationMap:
    """Decompose a linear probe's logit into per-region scores.

    weights is (F,) for a binary probe or (C, F) with ``class_index``
    selecting the target class row; node_features is the (N, F) matrix of
    propagated node features the pooled probe input was averaged from.
    ``prenormalize`` optionally affine-rescales scores (zero mean, unit std)
    before the sigmoid to avoid display saturation; raw scores and the
    decomposition are unaffected.
    """
    weights = np.asarray(weights, dtype=np.float64)
    node_features = np.asarray(node_features, dtype=np.float64)
    if weights.ndim == 2:
        if class_index is None:
            raise ValueError("class_index required for multi-class weights")
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)[class_index]
        weights = weights[class_index]
    if weights.shape[0] != node_features.shape[1]:
        raise ValueError(
            f"probe width {weights.shape[0]} != feature width {node_features.shape[1]}"
        )
    raw = node_features @ weights
    scores = raw
    if prenormalize:
        scores = (raw - raw.mean()) / max(raw.std(), 1e-12)
    return ActivationMap(
        raw=raw,
        normalized=_sigmoid(scores),
        bias=float(bias),
        target_class=target_class,
        subject_id=subject_id,
    )


def render_heatmap(amap: ActivationMap, graph: PatchGraph, reference: Volume) -> Volume:
    """Paint normalized region scores over their patch footprints.

    Overlapping footprints average; voxels under no patch stay zero. The
    returned Volume shares the reference geometry.
    """
    patch_size = graph.patches.shape[1:]
    accum = np.zeros(reference.shape, dtype=np.float64)
    count = np.zeros(reference.shape, dtype=np.int32)
    idx = np.ceil(reference.world_to_index(graph.centers_subject) - 0.5).astype(np.int64)
    for n, c in enumerate(idx):
        lo = [c[d] - patch_size[d] // 2 for d in range(3)]
        sl = tuple(
            slice(max(lo[d], 0), min(lo[d] + patch_size[d], reference.shape[d]))
            for d in range(3)
        )
        if any(s.start >= s.stop for s in sl):
            continue
        accum[sl] += amap.normalized[n]
        count[sl] += 1
    out = np.divide(accum, count, out=np.zeros_like(accum), where=count > 0)
    return Volume(out.astype(np.float32), reference.spacing.copy(), reference.origin.copy())


def export_embeddings(path, subject_ids, features, labels=None) -> None:
    """Write one row per subject: id, feature columns, then label columns."""
    features = np.asarray(features)
    labels = labels or {}
    label_names = sorted({name for lab in labels.values() for name in lab})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["subject_id"]
            + [f"feature_{i:03d}" for i in range(features.shape[1])]
            + label_names
        )
        for sid, feat in zip(subject_ids, features):
            row = [sid] + [repr(float(v)) for v in feat]
            sub = labels.get(sid, {})
            row += ["" if sub.get(name) is None else sub.get(name) for name in label_names]
            writer.writerow(row)


def pca_2d(features) -> np.ndarray:
    """Deterministic 2D PCA projection (fallback for external projectors).

    Signs are fixed so the largest-magnitude loading of each component is
    positive.
    """
    x = np.asarray(features, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], vt.shape[1]))])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T
