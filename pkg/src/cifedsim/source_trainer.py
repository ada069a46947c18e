"""Supervised source-phase training of the head on frozen features.

Optionally draws class-balanced batches (equal per-class counts within every
batch, minority classes resampled with replacement) and keeps the parameter
snapshot with the best validation macro recall.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .feature_store import FeatureDataset
from .head_model import (
    DivergenceError,
    HeadParams,
    OptimizerState,
    backward,
    forward,
    sgd_step,
)
from .losses import ce_smooth
from .metrics_costs import evaluate_mar


@dataclass
class SourceConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    balanced_sampling: bool = False
    bottleneck_dim: int = 256
    classifier_mode: str = "trainable"  # etf_fixed for a fixed-prototype head
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch norm")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def balanced_batches(labels, batch_size, seed, num_classes=None):
    """Index batches with per-class counts equal within +-1 in every batch.

    Classes exhausted before the epoch ends are resampled with replacement,
    so even a 100:1 minority shows up in every batch at majority frequency.
    One epoch emits ceil(N / batch_size) batches, covering >= N indices.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    pools = [np.flatnonzero(labels == c) for c in range(num_classes)]
    empty = [c for c, pool in enumerate(pools) if len(pool) == 0]
    if empty:
        warnings.warn(f"classes {empty} have no samples and are skipped", stacklevel=2)
    present = [c for c in range(num_classes) if len(pools[c])]
    if not present:
        raise ValueError("no labeled samples at all")
    cursors = {c: rng.permutation(pools[c]) for c in present}
    offsets = {c: 0 for c in present}

    def draw(c, count):
        taken = []
        while count > 0:
            pool = cursors[c]
            left = len(pool) - offsets[c]
            if left == 0:
                # minority class exhausted: resample with replacement
                taken.append(rng.choice(pools[c], size=count, replace=True))
                count = 0
                break
            step = min(left, count)
            taken.append(pool[offsets[c]:offsets[c] + step])
            offsets[c] += step
            count -= step
        return np.concatenate(taken)

    num_batches = math.ceil(len(labels) / batch_size)
    base, extra = divmod(batch_size, len(present))
    batches = []
    for _ in range(num_batches):
        bonus = set(rng.permutation(len(present))[:extra])
        parts = [
            draw(c, base + (1 if j in bonus else 0))
            for j, c in enumerate(present)
        ]
        batch = np.concatenate(parts)
        rng.shuffle(batch)
        batches.append(batch)
    return batches


def uniform_batches(n, batch_size, seed):
    """Shuffled contiguous chunks; a trailing singleton is dropped (batch norm)."""
    perm = np.random.default_rng(seed).permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if chunks and len(chunks[-1]) < 2:
        chunks.pop()
    return chunks


def train_source(train: FeatureDataset, val: FeatureDataset, cfg: SourceConfig):
    """Train with smoothed cross-entropy; return the best-val-MAR snapshot.

    The report is one row per epoch: {"epoch", "train_loss", "val_mar"}.
    """
    if train.dim != val.dim or train.num_classes != val.num_classes:
        raise ValueError("train and val must share dim and num_classes")
    params = HeadParams.init(
        train.dim, train.num_classes, bottleneck_dim=cfg.bottleneck_dim,
        seed=cfg.seed, classifier_mode=cfg.classifier_mode,
    )
    opt = OptimizerState.init(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    labels = train.labels
    best_params = params.clone()
    best_mar = -1.0
    report = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_seed = (cfg.seed, epoch)
        if cfg.balanced_sampling:
            batches = balanced_batches(
                labels, cfg.batch_size, seed=epoch_seed, num_classes=train.num_classes
            )
        else:
            batches = uniform_batches(len(train), cfg.batch_size, seed=epoch_seed)
        losses, sizes = [], []
        for idx in batches:
            x = train.vectors[idx]
            _, logits, _ = forward(params, x, train=True)
            lv = ce_smooth(logits, labels[idx], cfg.label_smoothing)
            if not np.isfinite(lv.scalar):
                raise DivergenceError(
                    f"non-finite source loss at epoch {epoch} (lr={cfg.learning_rate})"
                )
            grads = backward(params, x, lv.grad_logits)
            sgd_step(params, grads, opt)
            losses.append(lv.scalar)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_mar = evaluate_mar(params, val)
        if val_mar > best_mar:
            best_mar = val_mar
            best_params = params.clone()
        report.append({"epoch": epoch, "train_loss": train_loss, "val_mar": val_mar})
    return best_params, report
