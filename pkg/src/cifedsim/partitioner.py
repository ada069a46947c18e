"""Splitting protocol: imbalanced source train/val, balanced target test, Dirichlet client shards.

All splits are index-level and seed-deterministic, so a plan can be exported as
JSON index lists and replayed bit-exactly against the originating FEDF files.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .feature_store import FeatureDataset

TRAIN_FRACTION = 0.8  # stratified train share inside every split


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class count shape for subsampling: balanced, or exponential long tail.

    For longtail, max-class count / min-class count equals `ratio`, with the
    class order shuffled by `class_order_seed`.
    """

    kind: str
    ratio: float = 1.0
    class_order_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("balanced", "longtail"):
            raise ValueError(f"unknown imbalance kind {self.kind!r}")
        if self.kind == "balanced" and self.ratio != 1.0:
            raise ValueError("balanced profile requires ratio = 1")
        if self.kind == "longtail" and self.ratio <= 1.0:
            raise ValueError("longtail profile requires ratio > 1")


def induced_class_counts(profile: ImbalanceProfile, total: int, num_classes: int) -> np.ndarray:
    """Target per-class counts for a subsample of ~`total` records.

    Longtail counts follow n_j = n_max * ratio**(-j / (C-1)) over the
    seed-shuffled class order; every class keeps at least one record.
    """
    if total < num_classes:
        raise ValueError("total too small to give every class one record")
    if profile.kind == "balanced" or num_classes == 1:
        return np.full(num_classes, int(round(total / num_classes)), dtype=np.int64)
    exponents = -np.arange(num_classes) / (num_classes - 1)
    decay = profile.ratio ** exponents
    n_max = total / decay.sum()
    ranked = np.maximum(1, np.round(n_max * decay)).astype(np.int64)
    order = np.random.default_rng(profile.class_order_seed).permutation(num_classes)
    counts = np.empty(num_classes, dtype=np.int64)
    counts[order] = ranked
    return counts


def _stratified_split(indices_by_class):
    """Per class, first floor(0.8 * n) indices go to train, rest to val."""
    train, val = [], []
    for idx in indices_by_class:
        n_train = int(np.floor(TRAIN_FRACTION * len(idx)))
        train.append(idx[:n_train])
        val.append(idx[n_train:])
    cat = lambda parts: (
        np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    )
    return cat(train), cat(val)


def source_split_indices(ds: FeatureDataset, profile: ImbalanceProfile,
                         take_fraction: float, seed: int):
    """Index-level make_source_split: (train_idx, val_idx) into `ds`."""
    if not 0 < take_fraction <= 1:
        raise ValueError("take_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    total = int(round(take_fraction * len(ds)))
    counts = induced_class_counts(profile, total, ds.num_classes)
    picked = []
    for c in range(ds.num_classes):
        pool = np.flatnonzero(labels == c)
        if counts[c] > len(pool):
            raise ValueError(
                f"profile demands {counts[c]} samples of class {c}, only {len(pool)} exist"
            )
        picked.append(rng.permutation(pool)[: counts[c]])
    return _stratified_split(picked)


def make_source_split(ds: FeatureDataset, profile: ImbalanceProfile,
                      take_fraction: float, seed: int):
    """Subsample `ds` per the profile to ~take_fraction of it, 80/20 stratified."""
    train_idx, val_idx = source_split_indices(ds, profile, take_fraction, seed)
    return ds.subset(train_idx), ds.subset(val_idx)


def dirichlet_proportions(alpha: float, num_clients: int, num_classes: int,
                          seed: int) -> np.ndarray:
    """One Dirichlet(alpha * 1_K) draw per class: shape [C, K], rows sum to 1."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if num_clients < 1 or num_classes < 1:
        raise ValueError("need at least one client and one class")
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(num_clients, alpha, dtype=np.float64), size=num_classes)


@dataclass
class ClientShard:
    """One client's data: unlabeled-for-adaptation train set plus labeled val."""

    client_id: int
    train: FeatureDataset
    val: FeatureDataset
    label_histogram: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val)

    def top_class_share(self) -> float:
        total = self.label_histogram.sum()
        return float(self.label_histogram.max() / total) if total else 0.0


def class_capture_shares(shards) -> np.ndarray:
    """Per class, the largest fraction of its (non-test) samples one client holds.

    The non-IID-ness signature of low-alpha Dirichlet splits: a capture share
    above 0.5 means some client dominates that class.
    """
    hists = np.stack([s.label_histogram for s in shards]).astype(np.float64)
    totals = hists.sum(axis=0)
    return np.divide(
        hists.max(axis=0), totals, out=np.zeros_like(totals), where=totals > 0
    )


def target_split_indices(ds: FeatureDataset, num_clients: int, alpha: float,
                         test_fraction: float, seed: int, mode="dirichlet"):
    """Index-level make_target_split.

    Returns (test_idx, per_client) where per_client is a list of
    (train_idx, val_idx) pairs. The balanced test takes an equal per-class
    count, capped at the scarcest class; the remainder is assigned to clients
    class-by-class, by a Dirichlet draw or evenly for mode="stratified".
    """
    if mode not in ("dirichlet", "stratified"):
        raise ValueError(f"unknown target mode {mode!r}")
    if num_clients < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    num_classes = ds.num_classes
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    min_count = min(len(p) for p in pools)
    if min_count == 0:
        raise ValueError("a target class has no samples at all")
    per_class_test = int(round(test_fraction * len(ds) / num_classes))
    if per_class_test > min_count:
        warnings.warn(
            f"balanced test capped at {min_count} per class "
            f"(requested {per_class_test})",
            stacklevel=2,
        )
        per_class_test = min_count
    test_idx = np.concatenate([p[:per_class_test] for p in pools])

    if mode == "dirichlet":
        proportions = dirichlet_proportions(alpha, num_clients, num_classes, seed + 1)
    else:
        proportions = np.full((num_classes, num_clients), 1.0 / num_clients)
    client_class_indices = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        remainder = pools[c][per_class_test:]
        cuts = np.floor(np.cumsum(proportions[c][:-1]) * len(remainder)).astype(np.int64)
        for k, part in enumerate(np.split(remainder, cuts)):
            client_class_indices[k].append(part)
    per_client = [_stratified_split(parts) for parts in client_class_indices]
    return test_idx, per_client


def make_target_split(ds: FeatureDataset, num_clients: int, alpha: float,
                      test_fraction: float, seed: int, mode="dirichlet"):
    """Balanced test plus Dirichlet (or stratified) client shards.

    Returns (target_test, shards) as materialized datasets.
    """
    test_idx, per_client = target_split_indices(
        ds, num_clients, alpha, test_fraction, seed, mode=mode
    )
    shards = [
        _shard_from_indices(ds, k, tr, va) for k, (tr, va) in enumerate(per_client)
    ]
    return ds.subset(test_idx), shards


@dataclass
class PartitionPlan:
    """A full split: source train/val, K client shards, balanced target test.

    `doc` carries the originating index lists and arguments so the plan can be
    serialized to JSON and replayed against the same FEDF files.
    """

    source_train: FeatureDataset
    source_val: FeatureDataset
    client_shards: list
    target_test: FeatureDataset
    alpha: float
    seeds: dict
    doc: dict = field(repr=False, default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.client_shards)

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.doc, f, sort_keys=True)


def _shard_from_indices(ds, client_id, train_idx, val_idx):
    both = np.concatenate([train_idx, val_idx]) if len(train_idx) + len(val_idx) else np.empty(0, np.int64)
    hist = np.bincount(ds.labels[both.astype(np.int64)], minlength=ds.num_classes)
    return ClientShard(
        client_id=client_id,
        train=ds.subset(train_idx),
        val=ds.subset(val_idx),
        label_histogram=hist,
    )


def build_partition_plan(source_ds: FeatureDataset, target_ds: FeatureDataset,
                         profile: ImbalanceProfile, take_fraction: float,
                         num_clients: int, alpha: float, test_fraction: float,
                         source_seed: int, target_seed: int,
                         target_mode="dirichlet") -> PartitionPlan:
    """One-call construction of the whole splitting protocol."""
    src_train_idx, src_val_idx = source_split_indices(
        source_ds, profile, take_fraction, source_seed
    )
    test_idx, per_client = target_split_indices(
        target_ds, num_clients, alpha, test_fraction, target_seed, mode=target_mode
    )
    shards = [
        _shard_from_indices(target_ds, k, tr, va)
        for k, (tr, va) in enumerate(per_client)
    ]
    doc = {
        "alpha": alpha,
        "take_fraction": take_fraction,
        "test_fraction": test_fraction,
        "target_mode": target_mode,
        "profile": {
            "kind": profile.kind,
            "ratio": profile.ratio,
            "class_order_seed": profile.class_order_seed,
        },
        "seeds": {"source": source_seed, "target": target_seed},
        "source_domain": source_ds.domain_id,
        "target_domain": target_ds.domain_id,
        "source_train": src_train_idx.tolist(),
        "source_val": src_val_idx.tolist(),
        "target_test": test_idx.tolist(),
        "clients": [
            {"train": tr.tolist(), "val": va.tolist()} for tr, va in per_client
        ],
    }
    return PartitionPlan(
        source_train=source_ds.subset(src_train_idx),
        source_val=source_ds.subset(src_val_idx),
        client_shards=shards,
        target_test=target_ds.subset(test_idx),
        alpha=alpha,
        seeds=doc["seeds"],
        doc=doc,
    )


def plan_from_doc(doc: dict, source_ds: FeatureDataset,
                  target_ds: FeatureDataset) -> PartitionPlan:
    """Replay an exported plan document against its originating datasets."""
    shards = [
        _shard_from_indices(
            target_ds, k,
            np.asarray(entry["train"], dtype=np.int64),
            np.asarray(entry["val"], dtype=np.int64),
        )
        for k, entry in enumerate(doc["clients"])
    ]
    return PartitionPlan(
        source_train=source_ds.subset(np.asarray(doc["source_train"], dtype=np.int64)),
        source_val=source_ds.subset(np.asarray(doc["source_val"], dtype=np.int64)),
        client_shards=shards,
        target_test=target_ds.subset(np.asarray(doc["target_test"], dtype=np.int64)),
        alpha=doc["alpha"],
        seeds=doc["seeds"],
        doc=doc,
    )


def load_plan(path, source_ds, target_ds) -> PartitionPlan:
    with open(path) as f:
        return plan_from_doc(json.load(f), source_ds, target_ds)
