"""Frozen-encoder evaluation: subject split, logistic head, ACC and AUCROC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mae import MaeModel, extract_features
from .rng import keyed_generator


class ProbeError(ValueError):
    pass


def split_subjects(ids: list, seed: int = 0) -> dict:
    """Seeded 8:1:1 split by subject; val and test sizes are floored, the rest trains.

    Below ten subjects the floor would leave nothing to evaluate on, so val
    and test get one subject each once there are at least three.
    """
    ids = list(ids)
    if not ids:
        raise ProbeError("no subjects to split")
    if len(set(ids)) != len(ids):
        dupes = sorted({str(i) for i in ids if ids.count(i) > 1})
        raise ProbeError(f"duplicate subject ids: {', '.join(dupes)}")
    order = keyed_generator(seed, "split", len(ids)).permutation(len(ids))
    n = len(ids)
    n_val = n_test = n // 10 if n >= 10 else int(n >= 3)
    n_train = n - n_val - n_test
    assignment = {}
    for rank, idx in enumerate(order.tolist()):
        if rank < n_train:
            assignment[ids[idx]] = "train"
        elif rank < n_train + n_val:
            assignment[ids[idx]] = "val"
        else:
            assignment[ids[idx]] = "test"
    return assignment


def features_for(model: MaeModel, volumes: list) -> np.ndarray:
    return np.stack([extract_features(model, v) for v in volumes])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic_loss(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float = 0.0) -> float:
    """Mean binary cross-entropy plus ``0.5 * l2 * |w|^2``."""
    logits = X @ w + b
    # log(1 + exp(-s)) for y=1, log(1 + exp(s)) for y=0, computed stably
    signed = np.where(y == 1, -logits, logits)
    ce = np.logaddexp(0.0, signed).mean()
    return float(ce + 0.5 * l2 * np.dot(w, w))


def logistic_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    resid = _sigmoid(X @ w + b) - y
    return X.T @ resid / len(y) + l2 * w, float(resid.mean())


@dataclass
class LogisticHead:
    weights: np.ndarray
    bias: float
    epoch: int = 0
    val_acc: float = float("nan")

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(self.scores(features))


def _accuracy(head_w, head_b, X, y) -> float:
    return float(np.mean(((X @ head_w + head_b) >= 0.0).astype(int) == y))


def train_head(
    features: np.ndarray,
    labels,
    val_features: np.ndarray | None = None,
    val_labels=None,
    l2: float = 1e-3,
    epochs: int = 500,
    lr: float = 0.1,
    seed: int = 0,
) -> LogisticHead:
    """Full-batch gradient descent on L2-regularised cross-entropy.

    Features are standardised with training statistics before optimisation;
    the scaling is folded back into the returned weights. Weights start at
    zero. Each epoch is one gradient step and yields a checkpoint; the one with
    the best validation accuracy wins (earliest on ties). Without a
    validation set the last epoch is returned. Descent from zero weights is
    deterministic, so ``seed`` has no effect; it is accepted so that every
    stage of a run takes the same arguments.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ProbeError("features must be (n_samples, n_features) matching the labels")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise ProbeError("training labels need at least one example of each class")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    has_val = val_features is not None and len(val_features) > 0
    if has_val:
        Zv = (np.asarray(val_features, dtype=np.float64) - mean) / scale
        yv = np.asarray(val_labels, dtype=np.int64)

    w = np.zeros(X.shape[1])
    b = 0.0
    # ties keep the earlier epoch; unlabelled runs fall back to the last one
    best = None
    for epoch in range(1, epochs + 1):
        gw, gb = logistic_grad(w, b, Z, y, l2)
        w = w - lr * gw
        b = b - lr * gb
        if has_val:
            acc = _accuracy(w, b, Zv, yv)
            if best is None or acc > best[0]:
                best = (acc, epoch, w.copy(), b)
    if has_val:
        acc, epoch, w, b = best
    else:
        acc, epoch = float("nan"), epochs
    weights = w / scale
    bias = float(b - np.dot(weights, mean))
    return LogisticHead(weights, bias, epoch=epoch, val_acc=acc)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted half; NaN when one class is absent."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(np.count_nonzero(y == 0))
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(head: LogisticHead, features, labels) -> tuple[float, float]:
    """``(accuracy at p >= 0.5, AUCROC)``; AUCROC is NaN for a one-class set."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ProbeError("evaluation set is empty")
    scores = head.scores(X)
    acc = float(np.mean((scores >= 0.0).astype(int) == y))
    auc = auc_roc(scores, y)
    return acc, auc


def auc_is_defined(auc: float) -> bool:
    return not math.isnan(auc)
