"""Frozen-feature linear probing with five-fold cross-validation.

Regression probes are ridge regression scored by R^2; classification probes
are multinomial logistic regression scored by accuracy. Features are
standardized with train-fold statistics; encoder parameters are never
touched. Subjects with a missing target are excluded per task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

__all__ = [
    "ProbeResult",
    "kfold_split",
    "linear_probe_regression",
    "linear_probe_classification",
    "fit_full_probe",
]


@dataclass
class ProbeResult:
    task: str
    metric: str  # "r2" | "accuracy"
    fold_values: list  # float per fold, None where the metric was undefined

    @property
    def defined_values(self):
        return [v for v in self.fold_values if v is not None]

    @property
    def mean(self):
        vals = self.defined_values
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std(self):
        vals = self.defined_values
        return float(np.std(vals)) if vals else float("nan")

    def to_dict(self):
        return {
            "task": self.task,
            "metric": self.metric,
            "fold_values": self.fold_values,
            "mean": self.mean,
            "std": self.std,
        }


def kfold_split(subject_ids, k: int = 5, seed: int = 0):
    """Disjoint folds covering all ids, sizes differing by at most one."""
    ids = list(subject_ids)
    if len(ids) < k:
        raise ValueError(f"need at least {k} subjects for {k}-fold CV, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]


def _standardize(train_x):
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _fold_arrays(features, targets, folds, fold_idx):
    test_ids = [s for s in folds[fold_idx] if targets.get(s) is not None]
    train_ids = [
        s
        for j, fold in enumerate(folds)
        if j != fold_idx
        for s in fold
        if targets.get(s) is not None
    ]
    x_tr = np.asarray([features[s] for s in train_ids], dtype=np.float64)
    x_te = np.asarray([features[s] for s in test_ids], dtype=np.float64)
    y_tr = [targets[s] for s in train_ids]
    y_te = [targets[s] for s in test_ids]
    return x_tr, y_tr, x_te, y_te


def _ridge_fit(x, y, lam):
    """Closed-form ridge on standardized features; intercept unpenalized."""
    y = np.asarray(y, dtype=np.float64)
    y_mean = y.mean()
    gram = x.T @ x + lam * np.eye(x.shape[1])
    beta = np.linalg.solve(gram, x.T @ (y - y_mean))
    return beta, y_mean


def r_squared(y_true, y_pred):
    """1 - SS_res / SS_tot with SS_tot around the test mean; None if undefined."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return None
    ss_res = float(((y_true - y_pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def linear_probe_regression(features, targets, folds, ridge_lambda=1e-3, task="regression"):
    """Ridge probe on frozen features; per-fold R^2 on the held-out split."""
    fold_values = []
    for i in range(len(folds)):
        x_tr, y_tr, x_te, y_te = _fold_arrays(features, targets, folds, i)
        if len(y_te) == 0 or len(y_tr) == 0:
            fold_values.append(None)
            continue
        mean, std = _standardize(x_tr)
        beta, y_mean = _ridge_fit((x_tr - mean) / std, y_tr, ridge_lambda)
        y_pred = ((x_te - mean) / std) @ beta + y_mean
        fold_values.append(r_squared(y_te, y_pred))
    return ProbeResult(task=task, metric="r2", fold_values=fold_values)


def _logistic(l2_strength, tol):
    return LogisticRegression(C=1.0 / l2_strength, tol=tol, max_iter=5000)


def linear_probe_classification(features, labels, folds, l2_strength=1.0, tol=1e-6, task="classification"):
    """Multinomial logistic probe on frozen features; per-fold accuracy."""
    fold_values = []
    for i in range(len(folds)):
        x_tr, y_tr, x_te, y_te = _fold_arrays(features, labels, folds, i)
        if len(set(y_tr)) < 2:
            raise ValueError(f"fold {i}: training split has a single class")
        mean, std = _standardize(x_tr)
        clf = _logistic(l2_strength, tol).fit((x_tr - mean) / std, y_tr)
        if len(y_te) == 0:
            fold_values.append(None)
            continue
        fold_values.append(float(clf.score((x_te - mean) / std, y_te)))
    return ProbeResult(task=task, metric="accuracy", fold_values=fold_values)


def fit_full_probe(features, labels, l2_strength=1.0, tol=1e-6):
    """Fit one logistic probe on all labeled subjects and return weights in
    raw (unstandardized) feature space, so logit = bias + W . features holds
    directly on pooled features.

    Returns (weights (C, F), biases (C,), classes).
    """
    ids = [s for s in features if labels.get(s) is not None]
    x = np.asarray([features[s] for s in ids], dtype=np.float64)
    y = [labels[s] for s in ids]
    if len(set(y)) < 2:
        raise ValueError("full probe needs at least two classes")
    mean, std = _standardize(x)
    clf = _logistic(l2_strength, tol).fit((x - mean) / std, y)
    weights = clf.coef_ / std
    biases = clf.intercept_ - clf.coef_ @ (mean / std)
    return weights, biases, list(clf.classes_)
