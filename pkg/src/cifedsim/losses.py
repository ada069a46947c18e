"""Training objectives, each returning its value and the gradient on logits.

Covers the supervised source losses (smoothed and balanced-softmax
cross-entropy), the unsupervised adaptation losses (information maximization,
centroid pseudo-labels with an optional certainty-based correction for
imbalanced targets, neighborhood attraction/dispersion over a feature bank),
and the proximal penalty, which is the one loss living in parameter space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head_model import HeadParams, forward, softmax

LOG_FLOOR = 1e-12


@dataclass
class LossValue:
    scalar: float
    grad_logits: np.ndarray


@dataclass
class FeatureBank:
    """Cached eval-mode head outputs for one client's train shard.

    `features` rows are L2-normalized (all retrieval here is cosine).
    Refreshed at local-epoch boundaries; `staleness` counts batches since.
    """

    features: np.ndarray
    probs: np.ndarray
    labels_pseudo: np.ndarray | None = None
    staleness: int = 0

    def __len__(self) -> int:
        return self.features.shape[0]


def build_feature_bank(params: HeadParams, vectors, batch_size=512) -> FeatureBank:
    """Full eval-mode pass over a shard's vectors."""
    feats, probs = [], []
    n = len(vectors)
    for start in range(0, n, batch_size):
        f, _, p = forward(params, vectors[start:start + batch_size], train=False)
        feats.append(f)
        probs.append(p)
    features = np.concatenate(feats, axis=0)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    features = features / np.maximum(norms, 1e-12)
    return FeatureBank(features=features, probs=np.concatenate(probs, axis=0))


def _one_hot(targets, num_classes):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and targets.max() >= num_classes:
        raise ValueError(f"target {targets.max()} out of range for {num_classes} classes")
    if targets.size and targets.min() < 0:
        raise ValueError("negative target")
    out = np.zeros((targets.shape[0], num_classes))
    out[np.arange(targets.shape[0]), targets] = 1.0
    return out


def ce_smooth(logits, targets, epsilon=0.0) -> LossValue:
    """Label-smoothed cross-entropy: targets (1-eps)*onehot + eps/C."""
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    logits = np.asarray(logits, dtype=np.float64)
    b, c = logits.shape
    smooth = (1 - epsilon) * _one_hot(targets, c) + epsilon / c
    p = softmax(logits)
    loss = -(smooth * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1).mean()
    return LossValue(float(loss), (p - smooth) / b)


def balanced_softmax_ce(logits, targets, class_counts) -> LossValue:
    """Cross-entropy of softmax(logits + ln class_counts).

    Corrects the decision rule with the label distribution; with uniform
    counts this is exactly the plain cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    counts = np.asarray(class_counts, dtype=np.float64)
    b, c = logits.shape
    onehot = _one_hot(targets, c)
    present = onehot.any(axis=0)
    if (counts[present] < 1).any():
        raise ValueError("zero class count for a class present in targets")
    with np.errstate(divide="ignore"):
        adjusted = logits + np.where(counts > 0, np.log(counts), -np.inf)
    p = softmax(adjusted)
    loss = -(onehot * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1).mean()
    return LossValue(float(loss), (p - onehot) / b)


def im_loss(probs_batch, mean_prediction=None) -> LossValue:
    """Information maximization: mean per-sample entropy minus entropy of the
    batch-mean prediction. Bounded in [-ln C, ln C]; gradient flows through
    both terms (mean_prediction, when given, must be the batch mean)."""
    p = np.asarray(probs_batch, dtype=np.float64)
    b = p.shape[0]
    logp = np.log(np.maximum(p, LOG_FLOOR))
    sample_entropy = -(p * logp).sum(axis=1)
    pbar = p.mean(axis=0) if mean_prediction is None else np.asarray(mean_prediction, dtype=np.float64)
    log_pbar = np.log(np.maximum(pbar, LOG_FLOOR))
    mean_entropy = -(pbar * log_pbar).sum()
    loss = sample_entropy.mean() - mean_entropy
    # d/dlogits of both entropy terms, using p = softmax(logits)
    row_self = (p * logp).sum(axis=1, keepdims=True)
    row_mean = (p * log_pbar).sum(axis=1, keepdims=True)
    grad = p * (-logp + row_self + log_pbar - row_mean) / b
    return LossValue(float(loss), grad)


def shot_pseudo_labels(bank: FeatureBank) -> np.ndarray:
    """Two-pass centroid pseudo-labels over the bank.

    Pass one builds prob-weighted class centroids and assigns each sample to
    the nearest by cosine distance, restricted to classes that received at
    least one argmax prediction; pass two recomputes centroids from the hard
    assignments (keeping the pass-one centroid for emptied classes) and
    reassigns.
    """
    feats = bank.features
    probs = bank.probs
    n, c = probs.shape
    argmax = probs.argmax(axis=1)
    candidate = np.flatnonzero(np.bincount(argmax, minlength=c) > 0)

    weighted = probs.T @ feats / (probs.sum(axis=0)[:, None] + 1e-8)
    centroids = weighted / np.maximum(np.linalg.norm(weighted, axis=1, keepdims=True), 1e-12)
    labels = candidate[(feats @ centroids[candidate].T).argmax(axis=1)]

    hard = _one_hot(labels, c)
    counts = hard.sum(axis=0)
    recomputed = hard.T @ feats / np.maximum(counts[:, None], 1.0)
    recomputed = recomputed / np.maximum(np.linalg.norm(recomputed, axis=1, keepdims=True), 1e-12)
    centroids = np.where((counts > 0)[:, None], recomputed, centroids)
    return candidate[(feats @ centroids[candidate].T).argmax(axis=1)]


def isfda_correct_labels(bank: FeatureBank, pseudo, margin_threshold=0.2) -> np.ndarray:
    """Certainty-based correction of pseudo-labels for imbalanced targets.

    A sample whose top-1/top-2 probability margin falls below the threshold is
    reassigned to its secondary class when that class holds strictly fewer
    pseudo-labels than the sample's current one; the histogram is taken once
    from the input, so the current majority class can never grow.
    """
    pseudo = np.asarray(pseudo, dtype=np.int64)
    probs = bank.probs
    order = np.argsort(probs, axis=1)
    top1, top2 = order[:, -1], order[:, -2]
    rows = np.arange(len(pseudo))
    margin = probs[rows, top1] - probs[rows, top2]
    hist = np.bincount(pseudo, minlength=probs.shape[1])
    move = (margin < margin_threshold) & (hist[top2] < hist[pseudo])
    corrected = pseudo.copy()
    corrected[move] = top2[move]
    return corrected


def knn_consistency_loss(bank: FeatureBank, batch_indices, probs_batch, k,
                         beta, affinity="uniform", reciprocal_discount=0.1) -> LossValue:
    """Neighborhood attraction with optional dispersion against the rest.

    Attraction pulls each prediction toward the mean-weighted agreement with
    its k nearest bank entries (cosine); dispersion pushes it away from the
    mean prediction of all non-neighbors, scaled by beta. Bank entries are
    constants; the gradient lands only on the batch logits.

    affinity="reciprocal" down-weights non-mutual neighbors by
    `reciprocal_discount` instead of treating all k neighbors equally.
    """
    if affinity not in ("uniform", "reciprocal"):
        raise ValueError(f"unknown affinity {affinity!r}")
    feats = bank.features
    n = feats.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    idx = np.asarray(batch_indices, dtype=np.int64)
    p = np.asarray(probs_batch, dtype=np.float64)
    b = p.shape[0]

    sims = feats @ feats.T
    np.fill_diagonal(sims, -np.inf)
    neighbor_sets = np.argpartition(sims, -k, axis=1)[:, -k:]  # [n, k]

    batch_neighbors = neighbor_sets[idx]
    weights = np.ones((b, k))
    if affinity == "reciprocal":
        member = np.zeros((n, n), dtype=bool)
        np.put_along_axis(member, neighbor_sets, True, axis=1)
        mutual = member[batch_neighbors, idx[:, None]]
        weights = np.where(mutual, 1.0, reciprocal_discount)

    q = bank.probs[batch_neighbors]  # [b, k, C]
    neighbor_mix = (weights[:, :, None] * q).sum(axis=1) / k
    attraction = (p * neighbor_mix).sum(axis=1)

    if n - 1 - k > 0:
        total = bank.probs.sum(axis=0)
        others = total[None, :] - bank.probs[idx] - q.sum(axis=1)
        non_neighbor_mean = others / (n - 1 - k)
    else:
        non_neighbor_mean = np.zeros_like(p)
    dispersion = (p * non_neighbor_mean).sum(axis=1)

    loss = (-attraction + beta * dispersion).mean()
    d_p = (-neighbor_mix + beta * non_neighbor_mean) / b
    grad = p * (d_p - (p * d_p).sum(axis=1, keepdims=True))
    return LossValue(float(loss), grad)


def prox_penalty(params: HeadParams, global_params: HeadParams, mu: float):
    """(mu/2) * ||theta - theta_global||^2 over trainable tensors.

    Returns (scalar, gradient dict keyed like the trainable tensors).
    """
    local = params.tensors()
    ref = global_params.tensors()
    total = 0.0
    grads = {}
    for name in params.trainable_names():
        if local[name].shape != ref[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        diff = local[name] - ref[name]
        total += float((diff * diff).sum())
        grads[name] = mu * diff
    return 0.5 * mu * total, grads
