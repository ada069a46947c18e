import json

import numpy as np
import pytest

from cifedsim.partitioner import (
    ImbalanceProfile,
    build_partition_plan,
    dirichlet_proportions,
    induced_class_counts,
    load_plan,
    make_source_split,
    make_target_split,
)
from conftest import clustered_dataset


def balanced_pool(per_class=100, classes=2, **kw):
    return clustered_dataset(classes=classes, per_class=per_class, **kw)


def test_balanced_split_exact_arithmetic():
    ds = balanced_pool(per_class=100, classes=2)
    train, val = make_source_split(ds, ImbalanceProfile("balanced"), 1.0, seed=0)
    tc = np.bincount(train.labels, minlength=2)
    vc = np.bincount(val.labels, minlength=2)
    assert tc.tolist() == [80, 80]
    assert vc.tolist() == [20, 20]


def test_longtail_counts_match_closed_form():
    # closed form for C=5, ratio=10, total=1000:
    # decay_j = 10 ** (-j/4); n_max = 1000 / sum(decay); counts = round(n_max * decay)
    counts = induced_class_counts(ImbalanceProfile("longtail", 10.0, 3), 1000, 5)
    assert sorted(counts.tolist(), reverse=True) == [464, 261, 147, 82, 46]
    assert counts.sum() == 1000


def test_longtail_ratio_and_order_seed():
    a = induced_class_counts(ImbalanceProfile("longtail", 20.0, 1), 2000, 6)
    b = induced_class_counts(ImbalanceProfile("longtail", 20.0, 2), 2000, 6)
    assert sorted(a.tolist()) == sorted(b.tolist())
    assert a.tolist() != b.tolist()  # different class order
    assert a.max() / a.min() == pytest.approx(20.0, rel=0.05)


def test_take_fraction_total_within_rounding():
    ds = balanced_pool(per_class=100, classes=10, dim=8)
    train, val = make_source_split(ds, ImbalanceProfile("balanced"), 0.6, seed=1)
    assert abs(len(train) + len(val) - 600) <= 10


def test_demanding_more_than_available_fails():
    ds = balanced_pool(per_class=20, classes=4, dim=8)
    with pytest.raises(ValueError, match="class"):
        make_source_split(ds, ImbalanceProfile("longtail", 50.0), 1.0, seed=0)


def test_profile_validation():
    with pytest.raises(ValueError):
        ImbalanceProfile("balanced", ratio=2.0)
    with pytest.raises(ValueError):
        ImbalanceProfile("longtail", ratio=1.0)
    with pytest.raises(ValueError):
        ImbalanceProfile("bimodal")


def test_dirichlet_single_client_is_unit():
    rows = dirichlet_proportions(0.5, 1, 6, seed=3)
    assert rows.shape == (6, 1)
    assert np.allclose(rows, 1.0)


def test_dirichlet_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        alpha = float(rng.uniform(0.05, 5.0))
        k = int(rng.integers(1, 9))
        c = int(rng.integers(1, 12))
        rows = dirichlet_proportions(alpha, k, c, seed=int(rng.integers(1e6)))
        assert np.abs(rows.sum(axis=1) - 1.0).max() < 1e-9


def test_dirichlet_high_alpha_concentrates():
    # Monte-Carlo: alpha=1000, K=3 puts every entry in [0.2, 0.47] for
    # at least 99% of seeds
    hits = 0
    for seed in range(200):
        rows = dirichlet_proportions(1000.0, 3, 5, seed=seed)
        if ((rows >= 0.2) & (rows <= 0.47)).all():
            hits += 1
    assert hits >= 198


def test_target_split_exact_arithmetic():
    ds = balanced_pool(per_class=100, classes=2)
    test, shards = make_target_split(ds, 1, alpha=0.5, test_fraction=0.2, seed=0)
    assert np.bincount(test.labels, minlength=2).tolist() == [20, 20]
    assert len(shards) == 1
    assert len(shards[0].train) == 128 and len(shards[0].val) == 32


def test_target_split_partition_property():
    from cifedsim.partitioner import target_split_indices

    ds = balanced_pool(per_class=60, classes=5, dim=8)
    test_idx, per_client = target_split_indices(ds, 3, 0.5, 0.2, seed=4)
    seen = list(test_idx)
    for tr, va in per_client:
        seen.extend(tr)
        seen.extend(va)
    assert sorted(seen) == list(range(len(ds)))


def test_low_alpha_yields_dominant_client_class():
    # a client capturing over half of some class is the low-alpha signature
    from cifedsim.partitioner import class_capture_shares

    hits = 0
    ds = balanced_pool(per_class=100, classes=10, dim=8)
    for seed in range(100):
        _, shards = make_target_split(ds, 3, alpha=0.1, test_fraction=0.2, seed=seed)
        if class_capture_shares(shards).max() > 0.5:
            hits += 1
    assert hits >= 80


def test_stratified_target_mode_keeps_distribution():
    ds = balanced_pool(per_class=90, classes=3, dim=8)
    _, shards = make_target_split(ds, 3, alpha=0.5, test_fraction=0.2, seed=1,
                                  mode="stratified")
    for s in shards:
        hist = s.label_histogram
        assert hist.max() - hist.min() <= 2


def test_capped_test_warns():
    # class 0 has only 4 records; a balanced test of 11 per class must cap at 4
    ds = clustered_dataset(classes=2, per_class=40, dim=4)
    scarce = ds.subset(np.r_[np.flatnonzero(ds.labels == 0)[:4],
                             np.flatnonzero(ds.labels == 1)])
    with pytest.warns(UserWarning, match="capped"):
        test, _ = make_target_split(scarce, 1, alpha=0.5, test_fraction=0.5, seed=0)
    counts = np.bincount(test.labels, minlength=2)
    assert counts.tolist() == [4, 4]


def test_plan_determinism_and_roundtrip(tmp_path):
    src = balanced_pool(per_class=50, classes=4, dim=8, draw_seed=1)
    tgt = balanced_pool(per_class=50, classes=4, dim=8, draw_seed=2)
    kw = dict(take_fraction=0.6, num_clients=3, alpha=0.5, test_fraction=0.2,
              source_seed=11, target_seed=22)
    a = build_partition_plan(src, tgt, ImbalanceProfile("balanced"), **kw)
    b = build_partition_plan(src, tgt, ImbalanceProfile("balanced"), **kw)
    assert a.doc == b.doc

    path = tmp_path / "plan.json"
    a.to_json(path)
    replayed = load_plan(path, src, tgt)
    assert replayed.source_train == a.source_train
    assert replayed.target_test == a.target_test
    for x, y in zip(replayed.client_shards, a.client_shards):
        assert x.train == y.train and x.val == y.val
        assert (x.label_histogram == y.label_histogram).all()


def test_plan_disjointness_and_stratification():
    src = balanced_pool(per_class=80, classes=5, dim=8, draw_seed=3)
    tgt = balanced_pool(per_class=80, classes=5, dim=8, draw_seed=4)
    plan = build_partition_plan(
        src, tgt, ImbalanceProfile("longtail", 10.0, 1),
        take_fraction=0.3, num_clients=3, alpha=0.5, test_fraction=0.2,
        source_seed=0, target_seed=0,
    )
    # source train/val disjoint
    assert not set(plan.doc["source_train"]) & set(plan.doc["source_val"])
    # target pieces disjoint and cover everything
    pieces = [plan.doc["target_test"]]
    for entry in plan.doc["clients"]:
        pieces += [entry["train"], entry["val"]]
    flat = [i for piece in pieces for i in piece]
    assert sorted(flat) == list(range(len(tgt)))
    # balanced test: exactly equal per-class counts
    counts = np.bincount(plan.target_test.labels, minlength=5)
    assert counts.max() == counts.min()
    # stratified 80/20 within each shard, off by at most one per class
    for entry in plan.doc["clients"]:
        tr = np.asarray(entry["train"], dtype=np.int64)
        va = np.asarray(entry["val"], dtype=np.int64)
        tr_hist = np.bincount(tgt._labels[tr], minlength=5)
        all_hist = np.bincount(tgt._labels[np.concatenate([tr, va]).astype(np.int64)], minlength=5) if len(tr) + len(va) else np.zeros(5)
        for c in range(5):
            assert abs(tr_hist[c] - 0.8 * all_hist[c]) <= 1
