"""Macro-averaged recall, gap deltas between scenarios, and the FLOPs/bytes ledger.

Published per-image FLOPs and fine-tune checkpoint sizes are stored constants
(they were measured on the real backbones and are not recomputable here); the
head costs for synthetic runs are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head_model import DEFAULT_BOTTLENECK, forward, head_payload_bytes

# Measured per-image forward FLOPs. head_only_* entries carry head FLOPs only.
FORWARD_FLOPS = {
    "resnet50": 24.6e9,
    "resnet101": 46.9e9,
    "vit_s": 11.0e9,
    "vit_b": 43.9e9,
    "head_only_vit_s": 0.61e6,
    "head_only_vit_b": 1.20e6,
}

# Full-model checkpoint sizes when the backbone itself must be transmitted.
FINETUNE_PAYLOAD_BYTES = {
    "resnet50": 94 * 2**20,
    "resnet101": 169 * 2**20,
}

BACKBONE_WIDTH = {"vit_s": 384, "vit_b": 768}

BACKWARD_COST_FACTOR = 2  # backward pass assumed twice the forward pass


def confusion_matrix(labels_true, labels_pred, num_classes) -> np.ndarray:
    """counts[true, predicted] over the evaluated samples."""
    t = np.asarray(labels_true, dtype=np.int64)
    p = np.asarray(labels_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("label arrays must have the same length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def macro_recall(cm, include_zero_support=False) -> float:
    """Mean per-class recall; classes without support are excluded by default."""
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1)
    if not support.any():
        raise ValueError("confusion matrix has no evaluated samples")
    recalls = np.divide(np.diag(cm), support, out=np.zeros(len(cm)), where=support > 0)
    if include_zero_support:
        return float(recalls.mean())
    return float(recalls[support > 0].mean())


def accuracy(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    return float(np.trace(cm) / cm.sum())


def evaluate_mar(params, ds, batch_size=512) -> float:
    """Eval-mode MAR of a head on a labeled dataset."""
    preds = []
    for start in range(0, len(ds), batch_size):
        _, logits, _ = forward(params, ds.vectors[start:start + batch_size], train=False)
        preds.append(logits.argmax(axis=1))
    cm = confusion_matrix(ds.labels, np.concatenate(preds), ds.num_classes)
    return macro_recall(cm)


def _check_mar(value, name):
    if not 0 <= value <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def s2t_diff(source_mar, target_mar) -> float:
    """Accuracy decline after adaptation, in percentage points."""
    _check_mar(source_mar, "source_mar")
    _check_mar(target_mar, "target_mar")
    return 100.0 * (target_mar - source_mar)


def target_diff(target_mar_imbalanced, target_mar_balanced) -> float:
    """Target accuracy gap between the fully imbalanced and balanced scenarios."""
    _check_mar(target_mar_imbalanced, "target_mar_imbalanced")
    _check_mar(target_mar_balanced, "target_mar_balanced")
    return 100.0 * (target_mar_imbalanced - target_mar_balanced)


def s2t_diff_under_label_shift(target_mar_imbalanced, source_mar_balanced) -> float:
    """Decline from the balanced source to the fully imbalanced target."""
    _check_mar(target_mar_imbalanced, "target_mar_imbalanced")
    _check_mar(source_mar_balanced, "source_mar_balanced")
    return 100.0 * (target_mar_imbalanced - source_mar_balanced)


def gap_report(scenario_marks: dict) -> dict:
    """Deltas (percentage points) from per-scenario (source_mar, target_mar) pairs.

    Keys of `scenario_marks` are scenario tags like "sbtb"; the cross-scenario
    deltas appear when both "sbtb" and "siti" are present.
    """
    report = {"s2t_diff": {}}
    for tag, (src, tgt) in scenario_marks.items():
        report["s2t_diff"][tag] = s2t_diff(src, tgt)
    if "sbtb" in scenario_marks and "siti" in scenario_marks:
        report["target_diff"] = target_diff(
            scenario_marks["siti"][1], scenario_marks["sbtb"][1]
        )
        report["s2t_diff_under_ls"] = s2t_diff_under_label_shift(
            scenario_marks["siti"][1], scenario_marks["sbtb"][0]
        )
    return report


@dataclass(frozen=True)
class CostLedger:
    """Inputs of the per-run cost accounting."""

    model_kind: str
    mode: str  # fine_tune | frozen | skipped
    rounds: int
    clients: int
    num_classes: int = 65
    bottleneck_dim: int = DEFAULT_BOTTLENECK
    in_dim: int | None = None  # required for model_kind="synthetic"

    def __post_init__(self):
        if self.mode not in ("fine_tune", "frozen", "skipped"):
            raise ValueError(f"unknown mode {self.mode!r}")


def analytic_head_flops(in_dim, bottleneck_dim, num_classes) -> float:
    """Multiply-accumulate count of the two linear layers, per image forward."""
    return 2.0 * (in_dim * bottleneck_dim + bottleneck_dim * num_classes)


def _head_flops(ledger: CostLedger) -> float:
    base = ledger.model_kind.removeprefix("head_only_")
    if base in BACKBONE_WIDTH:
        return FORWARD_FLOPS[f"head_only_{base}"]
    if base == "synthetic":
        if ledger.in_dim is None:
            raise ValueError("synthetic cost ledger needs in_dim")
        return analytic_head_flops(ledger.in_dim, ledger.bottleneck_dim, ledger.num_classes)
    raise ValueError(f"no head cost for model_kind {ledger.model_kind!r}")


def cost_report(ledger: CostLedger) -> dict:
    """Per-image training FLOPs and total bytes moved over the whole run.

    fine_tune counts 3x the full forward; frozen counts the backbone forward
    plus 3x the head; skipped drops the backbone entirely. Bytes are
    rounds * 2 * clients * payload (one upload and one download per client
    per round).
    """
    kind = ledger.model_kind
    base = kind.removeprefix("head_only_")
    if ledger.mode == "fine_tune":
        if kind not in FINETUNE_PAYLOAD_BYTES:
            raise ValueError(f"model_kind {kind!r} has no fine-tune cost entry")
        forward_flops = FORWARD_FLOPS[kind]
        train_flops = (1 + BACKWARD_COST_FACTOR) * forward_flops
        payload = FINETUNE_PAYLOAD_BYTES[kind]
    else:
        head = _head_flops(ledger)
        if ledger.mode == "frozen":
            if base not in BACKBONE_WIDTH:
                raise ValueError(f"model_kind {kind!r} has no frozen backbone entry")
            forward_flops = FORWARD_FLOPS[base]
            train_flops = forward_flops + (1 + BACKWARD_COST_FACTOR) * head
        else:
            forward_flops = head
            train_flops = (1 + BACKWARD_COST_FACTOR) * head
        in_dim = ledger.in_dim if base == "synthetic" else BACKBONE_WIDTH[base]
        payload = head_payload_bytes(in_dim, ledger.bottleneck_dim, ledger.num_classes)
    return {
        "model_kind": kind,
        "mode": ledger.mode,
        "forward_flops_per_image": forward_flops,
        "train_flops_per_image": train_flops,
        "payload_bytes": payload,
        "bytes_total": ledger.rounds * 2 * ledger.clients * payload,
    }
