import numpy as np
import pytest

from cifedsim.head_model import HeadParams, softmax
from cifedsim.losses import (
    FeatureBank,
    balanced_softmax_ce,
    build_feature_bank,
    ce_smooth,
    im_loss,
    isfda_correct_labels,
    knn_consistency_loss,
    prox_penalty,
    shot_pseudo_labels,
)
from gradcheck import REL_TOL, check_loss_through_head, max_rel_error


def logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


# ---------------------------------------------------------------- ce_smooth

def test_ce_smooth_perfect_prediction_zero_loss():
    lv = ce_smooth(logits_for([[1 - 1e-12, 1e-12]]), [0], epsilon=0.0)
    assert lv.scalar == pytest.approx(0.0, abs=1e-9)


def test_ce_smooth_hand_value():
    # eps=0.1, C=2, p=(0.9, 0.1), true class 0:
    # loss = -0.95 ln 0.9 - 0.05 ln 0.1 = 0.21522
    lv = ce_smooth(logits_for([[0.9, 0.1]]), [0], epsilon=0.1)
    assert lv.scalar == pytest.approx(0.21522, abs=1e-5)


def test_ce_smooth_uniform_probs_is_log_c():
    for eps in (0.0, 0.1, 0.5):
        lv = ce_smooth(np.zeros((3, 4)), [0, 1, 3], epsilon=eps)
        assert lv.scalar == pytest.approx(np.log(4), abs=1e-12)


def test_ce_smooth_target_out_of_range():
    with pytest.raises(ValueError):
        ce_smooth(np.zeros((1, 3)), [3])


def test_ce_smooth_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.standard_normal((5, 6))
        lv = ce_smooth(logits, rng.integers(0, 6, 5), epsilon=rng.uniform(0, 0.9))
        assert lv.scalar >= 0


# ------------------------------------------------------- balanced softmax CE

def test_balanced_softmax_uniform_counts_equals_plain_ce():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 5))
    targets = rng.integers(0, 5, 6)
    a = balanced_softmax_ce(logits, targets, np.full(5, 7))
    b = ce_smooth(logits, targets, epsilon=0.0)
    assert a.scalar == pytest.approx(b.scalar, abs=1e-12)
    assert np.allclose(a.grad_logits, b.grad_logits, atol=1e-12)


def test_balanced_softmax_hand_value():
    # counts (3,1), logits (0,0), true class 1 -> adjusted probs (3/4, 1/4)
    lv = balanced_softmax_ce(np.zeros((1, 2)), [1], [3, 1])
    assert lv.scalar == pytest.approx(np.log(4), abs=1e-12)


def test_balanced_softmax_zero_count_for_present_class():
    with pytest.raises(ValueError):
        balanced_softmax_ce(np.zeros((1, 2)), [1], [3, 0])


# ----------------------------------------------------------------- im_loss

def test_im_loss_uniform_rows_zero():
    p = np.full((5, 4), 0.25)
    assert im_loss(p).scalar == pytest.approx(0.0, abs=1e-9)


def test_im_loss_one_hot_per_class_is_minimum():
    p = np.eye(4)
    assert im_loss(p).scalar == pytest.approx(-np.log(4), abs=1e-6)


def test_im_loss_single_one_hot_mode_zero():
    p = np.tile(np.array([[1.0, 0.0, 0.0]]), (6, 1))
    assert im_loss(p).scalar == pytest.approx(0.0, abs=1e-6)


def test_im_loss_bounds_random():
    rng = np.random.default_rng(2)
    for _ in range(30):
        p = softmax(rng.standard_normal((7, 5)) * 3)
        v = im_loss(p).scalar
        assert -np.log(5) - 1e-9 <= v <= np.log(5) + 1e-9


# ------------------------------------------------------- pseudo-label ops

def separated_bank(n_per=20, seed=0):
    """Two crisp clusters whose classifier is already right."""
    rng = np.random.default_rng(seed)
    f0 = rng.normal([3, 0, 0, 0], 0.05, size=(n_per, 4))
    f1 = rng.normal([0, 3, 0, 0], 0.05, size=(n_per, 4))
    feats = np.concatenate([f0, f1])
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    probs = np.zeros((2 * n_per, 2))
    probs[:n_per, 0] = 0.9
    probs[:n_per, 1] = 0.1
    probs[n_per:, 0] = 0.1
    probs[n_per:, 1] = 0.9
    labels = np.repeat([0, 1], n_per)
    return FeatureBank(features=feats, probs=probs), labels


def test_shot_pseudo_labels_recover_clusters():
    bank, truth = separated_bank()
    # oracle: brute-force nearest centroid from the true assignments
    centroids = np.stack([
        bank.features[truth == c].mean(axis=0) for c in (0, 1)
    ])
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    oracle = (bank.features @ centroids.T).argmax(axis=1)
    labels = shot_pseudo_labels(bank)
    assert (labels == oracle).all()
    assert (labels == truth).all()


def test_shot_pseudo_labels_single_sample_keeps_argmax():
    feats = np.array([[1.0, 0.0]])
    probs = np.array([[0.2, 0.8]])
    bank = FeatureBank(features=feats, probs=probs)
    assert shot_pseudo_labels(bank).tolist() == [1]


def test_shot_pseudo_labels_permutation_equivariant():
    bank, _ = separated_bank(seed=3)
    labels = shot_pseudo_labels(bank)
    rng = np.random.default_rng(4)
    perm = rng.permutation(len(labels))
    permuted = FeatureBank(features=bank.features[perm], probs=bank.probs[perm])
    assert (shot_pseudo_labels(permuted) == labels[perm]).all()


def test_isfda_high_margin_is_noop():
    bank, _ = separated_bank()
    pseudo = shot_pseudo_labels(bank)
    corrected = isfda_correct_labels(bank, pseudo, margin_threshold=0.2)
    assert (corrected == pseudo).all()


def test_isfda_low_margin_minority_reassigned():
    probs = np.array([
        [0.52, 0.48],  # low margin, secondary is the minority class 1
        [0.95, 0.05],
        [0.9, 0.1],
        [0.85, 0.15],
    ])
    bank = FeatureBank(features=np.eye(4), probs=probs)
    pseudo = np.array([0, 0, 0, 0])
    corrected = isfda_correct_labels(bank, pseudo, margin_threshold=0.2)
    assert corrected.tolist() == [1, 0, 0, 0]


def test_isfda_permutation_equivariant():
    rng = np.random.default_rng(11)
    probs = softmax(rng.standard_normal((12, 3)) * 2)
    pseudo = rng.integers(0, 3, 12)
    bank = FeatureBank(features=np.eye(12), probs=probs)
    corrected = isfda_correct_labels(bank, pseudo, margin_threshold=0.4)
    perm = rng.permutation(12)
    permuted = isfda_correct_labels(
        FeatureBank(features=np.eye(12), probs=probs[perm]), pseudo[perm],
        margin_threshold=0.4,
    )
    assert (permuted == corrected[perm]).all()


def test_isfda_never_grows_majority():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n, c = int(rng.integers(3, 12)), int(rng.integers(2, 5))
        probs = softmax(rng.standard_normal((n, c)) * 2)
        pseudo = rng.integers(0, c, n)
        hist = np.bincount(pseudo, minlength=c)
        corrected = isfda_correct_labels(
            FeatureBank(features=np.eye(n), probs=probs), pseudo,
            margin_threshold=0.5,
        )
        new_hist = np.bincount(corrected, minlength=c)
        for majority in np.flatnonzero(hist == hist.max()):
            assert new_hist[majority] <= hist[majority]


# ------------------------------------------------------ knn consistency

def test_knn_identical_one_hot_attraction_is_minus_one():
    n = 8
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((n, 4))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    probs = np.tile(np.array([[0.0, 1.0, 0.0]]), (n, 1))
    bank = FeatureBank(features=feats, probs=probs)
    lv = knn_consistency_loss(bank, np.arange(n), probs, k=3, beta=0.0)
    assert lv.scalar == pytest.approx(-1.0, abs=1e-12)


def test_knn_orthogonal_one_hot_attraction_zero():
    feats = np.eye(4)
    probs = np.eye(4)
    bank = FeatureBank(features=feats, probs=probs)
    lv = knn_consistency_loss(bank, np.arange(4), probs, k=1, beta=0.0)
    assert lv.scalar == pytest.approx(0.0, abs=1e-12)


def test_knn_matches_brute_force_oracle():
    # independent evaluation of the attraction/dispersion formula with
    # explicitly enumerated neighbor sets (N=6, C=2, k=2, beta=1)
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((6, 5))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    probs = softmax(rng.standard_normal((6, 2)))
    bank = FeatureBank(features=feats, probs=probs)
    k, beta = 2, 1.0

    expected = 0.0
    for i in range(6):
        sims = [(feats[i] @ feats[j], j) for j in range(6) if j != i]
        sims.sort(reverse=True)
        neighbors = [j for _, j in sims[:k]]
        rest = [j for j in range(6) if j != i and j not in neighbors]
        attraction = sum(probs[i] @ probs[j] for j in neighbors) / k
        dispersion = probs[i] @ (sum(probs[j] for j in rest) / len(rest))
        expected += -attraction + beta * dispersion
    expected /= 6

    lv = knn_consistency_loss(bank, np.arange(6), probs, k=k, beta=beta)
    assert lv.scalar == pytest.approx(expected, abs=1e-12)


def test_knn_k_too_large():
    bank, _ = separated_bank(n_per=2)
    with pytest.raises(ValueError):
        knn_consistency_loss(bank, [0], bank.probs[:1], k=4, beta=0.0)


# --------------------------------------------------------------- proximal

def test_prox_zero_at_reference():
    h = HeadParams.init(6, 3, bottleneck_dim=4, seed=0)
    value, grads = prox_penalty(h, h.clone(), mu=0.5)
    assert value == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_prox_direct_formula():
    h = HeadParams.init(6, 3, bottleneck_dim=4, seed=1)
    ref = h.clone()
    h.bottleneck_bias = ref.bottleneck_bias + 2.0  # ||diff||^2 = 4 * 4 dims
    value, grads = prox_penalty(h, ref, mu=0.1)
    assert value == pytest.approx(0.05 * 4.0 * 4, abs=1e-12)
    assert np.allclose(grads["bottleneck_bias"], 0.2)


def test_prox_gradient_matches_finite_differences():
    h = HeadParams.init(6, 3, bottleneck_dim=4, seed=2)
    ref = HeadParams.init(6, 3, bottleneck_dim=4, seed=3)
    mu = 0.7
    _, grads = prox_penalty(h, ref, mu)
    worst = 0.0
    for name in h.trainable_names():
        flat = h.tensors()[name].reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-3
            up, _ = prox_penalty(h, ref, mu)
            flat[i] = orig - 1e-3
            down, _ = prox_penalty(h, ref, mu)
            flat[i] = orig
            numeric[i] = (up - down) / 2e-3
        worst = max(worst, max_rel_error(grads[name].reshape(-1), numeric))
    assert worst < REL_TOL


# ------------------------------------------- gradients composed with head

def test_loss_gradients_through_head():
    rng = np.random.default_rng(8)
    h = HeadParams.init(in_dim=9, num_classes=3, bottleneck_dim=6, seed=9)
    x = rng.standard_normal((6, 9))
    y = rng.integers(0, 3, 6)
    counts = np.array([5, 2, 9])
    bank = build_feature_bank(h, rng.standard_normal((12, 9)).astype(np.float32))

    cases = {
        "ce_smooth": lambda logits, probs: ce_smooth(logits, y, 0.1),
        "balanced_softmax": lambda logits, probs: balanced_softmax_ce(logits, y, counts),
        "im": lambda logits, probs: im_loss(probs),
        "knn": lambda logits, probs: knn_consistency_loss(
            bank, np.arange(6), probs, k=3, beta=0.5
        ),
    }
    for name, fn in cases.items():
        err = check_loss_through_head(h, x, fn)
        assert err < REL_TOL, f"{name}: {err}"
