"""Federated source-free adaptation: broadcast, local epochs, aggregate, select.

Clients never read their train-shard labels; the shards' access counters are
asserted unchanged after every run. Per-client RNG streams are derived from
(master seed, round, client id), so serial and parallel execution produce
bitwise identical histories.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .head_model import (
    DivergenceError,
    HeadParams,
    OptimizerState,
    backward,
    forward,
    init_etf,
    serialize_head,
    sgd_step,
    write_head,
)
from .losses import (
    balanced_softmax_ce,
    build_feature_bank,
    ce_smooth,
    im_loss,
    isfda_correct_labels,
    knn_consistency_loss,
    prox_penalty,
    shot_pseudo_labels,
)
from .metrics_costs import evaluate_mar
from .partitioner import ClientShard, PartitionPlan

SFDA_METHODS = ("shot", "nrc", "aad", "isfda", "hard", "local-only", "source-only")
AGGREGATIONS = ("fedavg", "fedprox", "fedetf")


@dataclass
class FedConfig:
    rounds: int = 10
    local_epochs: int = 5
    aggregation: str = "fedavg"
    mu: float = 0.1  # fedprox proximal strength
    sfda_method: str = "shot"
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    ce_weight: float = 0.3  # pseudo-label self-training weight (shot family)
    isfda_margin: float = 0.2
    knn_k: int = 3
    aad_beta: float = 1.0  # dispersion strength, decayed linearly over rounds
    nrc_discount: float = 0.1
    lr_schedule: str = "constant"  # constant | shot_decay
    average_bn_stats: bool = True
    weighted_selection: bool = True
    parallel_clients: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.sfda_method not in SFDA_METHODS:
            raise ValueError(f"unknown sfda_method {self.sfda_method!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.rounds < 1 or self.local_epochs < 0:
            raise ValueError("rounds >= 1 and local_epochs >= 0 required")


@dataclass
class RoundLog:
    round_index: int
    client_val_mar: list
    weighted_val_mar: float
    test_mar: float
    bytes_transferred: int


def history_to_jsonl(history) -> str:
    return "\n".join(json.dumps(asdict(entry), sort_keys=True) for entry in history)


def client_rng(master_seed, round_index, client_id) -> np.random.Generator:
    """Stream that depends only on (seed, round, client), never on scheduling."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(round_index, client_id))
    return np.random.default_rng(ss)


def fedavg_aggregate(heads, weights) -> HeadParams:
    """Weighted mean of every state tensor, BN running statistics included.

    Fixed ETF prototypes are copied, not averaged.
    """
    if not heads:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(heads),) or (w < 0).any() or w.sum() == 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    ref = heads[0]
    for h in heads[1:]:
        if (h.in_dim, h.bottleneck_dim, h.num_classes, h.classifier_mode) != (
            ref.in_dim, ref.bottleneck_dim, ref.num_classes, ref.classifier_mode
        ):
            raise ValueError("heads are not congruent")
    wn = w / w.sum()
    out = ref.clone()
    skip = (
        ("classifier_weight", "classifier_bias")
        if ref.classifier_mode == "etf_fixed"
        else ()
    )
    out_tensors = out.tensors()
    ref_tensors = ref.tensors()
    for name in HeadParams.TENSOR_ORDER:
        if name in skip:
            continue
        # anchored mean: ref + sum_k w_k (h_k - ref); bit-exact for equal heads
        diffs = np.stack([h.tensors()[name] - ref_tensors[name] for h in heads])
        out_tensors[name][...] = ref_tensors[name] + np.tensordot(wn, diffs, axes=1)
    return out


def _effective_lr(cfg: FedConfig, round_index: int) -> float:
    if cfg.lr_schedule == "shot_decay":
        progress = (round_index - 1) / max(cfg.rounds, 1)
        return cfg.learning_rate * (1 + 10 * progress) ** -0.75
    return cfg.learning_rate


def _dispersion_beta(cfg: FedConfig, round_index: int) -> float:
    return cfg.aad_beta * max(0.0, 1 - (round_index - 1) / max(cfg.rounds, 1))


def _epoch_pseudo_labels(method, bank, cfg):
    if method in ("shot", "isfda"):
        labels = shot_pseudo_labels(bank)
        if method == "isfda":
            labels = isfda_correct_labels(bank, labels, cfg.isfda_margin)
        return labels
    if method == "hard":
        return bank.probs.argmax(axis=1)
    return None


def local_adapt(shard: ClientShard, global_head: HeadParams, cfg: FedConfig,
                round_index=1):
    """Run cfg.local_epochs of the chosen objective on one client's shard.

    Labels of shard.train are never read; pseudo-labels are refreshed from a
    full eval-mode bank pass at every epoch boundary. Returns the adapted head
    and a per-epoch mean-loss report.
    """
    head = global_head.clone()
    report = []
    x = shard.train.vectors
    if cfg.local_epochs == 0 or len(x) < 2:
        return head, report
    reads_before = shard.train.label_reads
    method = cfg.sfda_method if cfg.sfda_method != "local-only" else "shot"
    prox_ref = global_head.clone() if cfg.aggregation == "fedprox" else None
    beta = _dispersion_beta(cfg, round_index)
    opt = OptimizerState.init(
        head, _effective_lr(cfg, round_index), cfg.momentum, cfg.weight_decay
    )
    rng = client_rng(cfg.seed, round_index, shard.client_id)
    for epoch in range(cfg.local_epochs):
        bank = build_feature_bank(head, x)
        pseudo = _epoch_pseudo_labels(method, bank, cfg)
        pseudo_hist = (
            np.bincount(pseudo, minlength=head.num_classes)
            if pseudo is not None
            else None
        )
        perm = rng.permutation(len(x))
        batch_losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs batch statistics
            _, logits, probs = forward(head, x[idx], train=True)
            scalar = 0.0
            grad = np.zeros_like(logits)
            if method in ("shot", "isfda"):
                lv = im_loss(probs)
                scalar += lv.scalar
                grad += lv.grad_logits
                if cfg.aggregation == "fedetf":
                    ce = balanced_softmax_ce(logits, pseudo[idx], pseudo_hist)
                else:
                    ce = ce_smooth(logits, pseudo[idx])
                scalar += cfg.ce_weight * ce.scalar
                grad += cfg.ce_weight * ce.grad_logits
            elif method == "hard":
                if cfg.aggregation == "fedetf":
                    ce = balanced_softmax_ce(logits, pseudo[idx], pseudo_hist)
                else:
                    ce = ce_smooth(logits, pseudo[idx])
                scalar += ce.scalar
                grad += ce.grad_logits
            elif method in ("aad", "nrc"):
                lv = knn_consistency_loss(
                    bank, idx, probs,
                    k=min(cfg.knn_k, len(bank) - 1),
                    beta=beta if method == "aad" else 0.0,
                    affinity="reciprocal" if method == "nrc" else "uniform",
                    reciprocal_discount=cfg.nrc_discount,
                )
                scalar += lv.scalar
                grad += lv.grad_logits
            else:
                raise ValueError(f"method {method!r} does not train locally")
            grads = backward(head, x[idx], grad)
            if prox_ref is not None:
                prox_val, prox_grads = prox_penalty(head, prox_ref, cfg.mu)
                scalar += prox_val
                for name, g in prox_grads.items():
                    grads.tensors()[name] += g
            if not np.isfinite(scalar) or not grads.is_finite():
                raise DivergenceError(
                    f"non-finite loss on client {shard.client_id}, round {round_index}"
                )
            sgd_step(head, grads, opt)
            batch_losses.append(scalar)
            bank.staleness += 1
        report.append({
            "epoch": epoch + 1,
            "train_loss": float(np.mean(batch_losses)) if batch_losses else 0.0,
        })
    if shard.train.label_reads != reads_before:
        raise RuntimeError("target train labels were read during local adaptation")
    return head, report


def _to_etf_head(head: HeadParams) -> HeadParams:
    out = head.clone()
    out.classifier_weight = init_etf(head.num_classes, head.bottleneck_dim)
    out.classifier_bias = np.zeros(head.num_classes)
    out.classifier_mode = "etf_fixed"
    return out


def _client_val_mars(heads, shards):
    return [
        evaluate_mar(h, s.val) if len(s.val) else None
        for h, s in zip(heads, shards)
    ]


def _selection_score(client_mars, weights, weighted=True):
    pairs = [(m, w) for m, w in zip(client_mars, weights) if m is not None]
    if not pairs:
        return 0.0
    mars = np.array([m for m, _ in pairs])
    w = np.array([w for _, w in pairs], dtype=np.float64)
    if not weighted or w.sum() == 0:
        return float(mars.mean())
    return float(np.average(mars, weights=w))


def run_adaptation(plan: PartitionPlan, source_head: HeadParams, cfg: FedConfig,
                   checkpoint_dir=None):
    """The round loop: broadcast, adapt locally, aggregate, score, keep the best.

    Returns (best_global, history). The server keeps the post-aggregation
    global with the highest (train-size-weighted) mean of client validation
    MARs; ties go to the earliest round. With `checkpoint_dir`, each round's
    global head is written there in the wire format as round_###.head.
    """
    shards = plan.client_shards
    if source_head.in_dim != plan.target_test.dim:
        raise ValueError("source head dimension does not match the plan's datasets")
    reads_before = [s.train.label_reads for s in shards]
    weights = [len(s.train) for s in shards]

    global_head = source_head.clone()
    if cfg.aggregation == "fedetf" and global_head.classifier_mode != "etf_fixed":
        # fallback: the intended path trains the source head with an ETF
        # classifier from the start (SourceConfig.classifier_mode)
        global_head = _to_etf_head(global_head)

    if cfg.sfda_method == "source-only":
        client_mars = _client_val_mars([global_head] * len(shards), shards)
        history = [RoundLog(
            round_index=1,
            client_val_mar=client_mars,
            weighted_val_mar=_selection_score(client_mars, weights, cfg.weighted_selection),
            test_mar=evaluate_mar(global_head, plan.target_test),
            bytes_transferred=0,
        )]
        return global_head, history

    payload_len = len(serialize_head(global_head))
    local_only = cfg.sfda_method == "local-only"
    local_models = [global_head.clone() for _ in shards] if local_only else None
    client_bn = [None] * len(shards)

    best_head, best_score = None, -1.0
    history = []
    for round_index in range(1, cfg.rounds + 1):
        inbound = []
        for k in range(len(shards)):
            head_in = (local_models[k] if local_only else global_head).clone()
            if not cfg.average_bn_stats and client_bn[k] is not None:
                head_in.bn.running_mean = client_bn[k][0].copy()
                head_in.bn.running_var = client_bn[k][1].copy()
            inbound.append(head_in)

        def run_client(k):
            return local_adapt(shards[k], inbound[k], cfg, round_index)

        if cfg.parallel_clients and len(shards) > 1:
            with ThreadPoolExecutor(max_workers=len(shards)) as pool:
                results = list(pool.map(run_client, range(len(shards))))
        else:
            results = [run_client(k) for k in range(len(shards))]
        adapted = [head for head, _ in results]
        if not cfg.average_bn_stats:
            client_bn = [
                (h.bn.running_mean.copy(), h.bn.running_var.copy()) for h in adapted
            ]

        if local_only:
            local_models = adapted
            client_mars = _client_val_mars(adapted, shards)
            test_mar = float(np.mean([
                evaluate_mar(h, plan.target_test) for h in adapted
            ]))
            bytes_transferred = 0
        else:
            new_global = fedavg_aggregate(adapted, weights)
            if not cfg.average_bn_stats:
                new_global.bn.running_mean = global_head.bn.running_mean.copy()
                new_global.bn.running_var = global_head.bn.running_var.copy()
            global_head = new_global
            client_mars = _client_val_mars([global_head] * len(shards), shards)
            test_mar = evaluate_mar(global_head, plan.target_test)
            bytes_transferred = 2 * len(shards) * payload_len

        if checkpoint_dir is not None and not local_only:
            write_head(
                global_head,
                os.path.join(checkpoint_dir, f"round_{round_index:03d}.head"),
            )
        score = _selection_score(client_mars, weights, cfg.weighted_selection)
        history.append(RoundLog(
            round_index=round_index,
            client_val_mar=client_mars,
            weighted_val_mar=score,
            test_mar=test_mar,
            bytes_transferred=bytes_transferred,
        ))
        if score > best_score:
            best_score = score
            if local_only:
                candidates = [m for m in client_mars if m is not None]
                pick = int(np.argmax([
                    m if m is not None else -1.0 for m in client_mars
                ])) if candidates else 0
                best_head = adapted[pick].clone()
            else:
                best_head = global_head.clone()

    for before, shard in zip(reads_before, shards):
        if shard.train.label_reads != before:
            raise RuntimeError("target train labels were read during adaptation")
    return best_head, history


def select_best(history) -> int:
    """Round index (1-based) with the highest weighted val MAR; earliest wins ties."""
    if not history:
        raise ValueError("empty history")
    scores = [entry.weighted_val_mar for entry in history]
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return history[best].round_index
