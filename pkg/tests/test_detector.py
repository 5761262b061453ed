import numpy as np
import pytest

from gradgate.detector import (
    assemble_detection_sets,
    aupr,
    auroc,
    detection_accuracy,
    evaluate,
    load_scores_csv,
    msp_scores,
    save_scores_csv,
    score,
    train_detector,
    ScoredSamples,
)
from gradgate.gradfeat import FeatureSet
from gradgate.nn import build_classifier, mlp


def auroc_pairwise_oracle(labels, scores):
    """O(n^2) comparison count: ties earn half credit."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def aupr_sweep_oracle(labels, scores):
    """Recompute precision/recall by explicit counting at every distinct
    threshold, descending, and accumulate the step areas."""
    n_pos = labels.sum()
    area = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def make_features(values, label, tag):
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    return FeatureSet(values, np.arange(n), np.full(n, label, dtype=np.int64),
                      [tag] * n, [f"f{j}" for j in range(values.shape[1])])


class TestAuroc:
    def test_perfect_separation_exact_one(self):
        labels = np.array([0, 0, 0, 1, 1])
        scores = np.array([0.1, 0.2, 0.3, 0.9, 0.8])
        assert auroc(labels, scores) == 1.0

    def test_all_ties_exact_half(self):
        labels = np.array([0, 1, 0, 1])
        scores = np.full(4, 0.42)
        assert auroc(labels, scores) == 0.5

    def test_matches_pairwise_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = 50
            labels = (rng.uniform(size=n) < 0.4).astype(np.int64)
            labels[0], labels[1] = 0, 1  # keep both classes present
            scores = np.round(rng.uniform(size=n), 2)  # rounding forces ties
            assert abs(auroc(labels, scores) - auroc_pairwise_oracle(labels, scores)) < 1e-12

    def test_label_flip_complements_when_no_ties(self):
        rng = np.random.default_rng(1)
        labels = np.array([0] * 10 + [1] * 10)
        scores = rng.permutation(20).astype(np.float64)
        assert abs(auroc(1 - labels, scores) - (1.0 - auroc(labels, scores))) < 1e-12

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        labels = (rng.uniform(size=30) < 0.5).astype(np.int64)
        labels[:2] = [0, 1]
        scores = rng.standard_normal(30)
        assert auroc(labels, scores) == auroc(labels, np.exp(scores) * 3.0 + 1.0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auroc(np.zeros(5, dtype=np.int64), np.arange(5.0))


class TestAupr:
    def test_perfect_separation(self):
        labels = np.array([0, 0, 1, 1])
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        assert aupr(labels, scores) == 1.0

    def test_constant_scores_give_prevalence(self):
        labels = np.array([1, 0, 0, 0, 1])
        scores = np.full(5, 0.5)
        assert aupr(labels, scores) == labels.mean()

    def test_matches_sweep_oracle_on_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = 50
            labels = (rng.uniform(size=n) < 0.3).astype(np.int64)
            labels[0] = 1
            scores = np.round(rng.uniform(size=n), 2)
            assert abs(aupr(labels, scores) - aupr_sweep_oracle(labels, scores)) < 1e-12

    def test_prevalence_is_the_uninformed_baseline(self):
        # Step-wise AP can dip below prevalence on adversarial orderings
        # (worst case below), but equals it for constant scores and sits at
        # or above it on average for uninformative scores (small-sample AP
        # bias is positive).
        rng = np.random.default_rng(4)
        gaps = []
        for _ in range(200):
            labels = (rng.uniform(size=40) < 0.35).astype(np.int64)
            labels[0] = 1
            scores = rng.uniform(size=40)
            gaps.append(aupr(labels, scores) - labels.mean())
        assert -0.02 < float(np.mean(gaps)) < 0.15

    def test_worst_case_ordering_value(self):
        # positives ranked last among four: area is 1/2 * 1/3 + 1/2 * 1/2
        labels = np.array([0, 0, 1, 1])
        scores = np.array([4.0, 3.0, 2.0, 1.0])
        assert abs(aupr(labels, scores) - 5.0 / 12.0) < 1e-15

    def test_no_positives_rejected(self):
        with pytest.raises(ValueError):
            aupr(np.zeros(4, dtype=np.int64), np.arange(4.0))


class TestDetectionAccuracy:
    def test_hand_counted_ten_samples(self):
        labels = np.array([1, 1, 1, 0, 0, 0, 1, 0, 1, 0])
        scores = np.array([0.9, 0.4, 0.6, 0.2, 0.7, 0.1, 0.5, 0.3, 0.8, 0.6])
        # predictions at 0.5: 1,0,1,0,1,0,1,0,1,1 -> correct: 1,0,1,1,0,1,1,1,1,0 = 7
        assert detection_accuracy(labels, scores) == 0.7

    def test_flip_complement(self):
        labels = np.array([1, 0, 1, 0])
        scores = np.array([0.6, 0.6, 0.2, 0.1])
        assert detection_accuracy(1 - labels, scores) == 1.0 - detection_accuracy(labels, scores)

    def test_all_correct(self):
        assert detection_accuracy(np.array([0, 1]), np.array([0.1, 0.9])) == 1.0


class TestMsp:
    @pytest.fixture
    def model(self):
        m = build_classifier(mlp(num_classes=4, input_shape=(1, 2, 2), hidden=3), seed=0)
        return m

    def test_uniform_logits_score(self, model):
        for ps in model.params:
            ps.tensor.data[:] = 0.0
        s = msp_scores(model, np.full((3, 1, 2, 2), 0.5))
        np.testing.assert_allclose(s, 1.0 - 1.0 / 4.0, rtol=1e-15)

    def test_saturated_logit_scores_near_zero(self, model):
        for ps in model.params:
            ps.tensor.data[:] = 0.0
        model.params[-1].tensor.data[0] = 500.0
        s = msp_scores(model, np.full((2, 1, 2, 2), 0.5))
        assert np.all(s < 1e-12)

    def test_shift_invariance(self):
        # softmax shift invariance; rounding of z + c makes this a close
        # comparison rather than a bitwise one
        logits = np.random.default_rng(5).standard_normal((6, 4))

        def score_from(z):
            shifted = z - z.max(axis=1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            return 1.0 - p.max(axis=1)

        np.testing.assert_allclose(score_from(logits), score_from(logits + 13.5),
                                   rtol=1e-12, atol=1e-15)


class TestAssemble:
    def test_sizes_100_100(self):
        normal = make_features(np.random.default_rng(0).uniform(size=(100, 3)), -1, "clean")
        anom = make_features(np.random.default_rng(1).uniform(size=(100, 3)), -1, "adv")
        train, val, test = assemble_detection_sets(normal, anom, seed=0)
        assert (len(train), len(val), len(test)) == (80, 80, 40)

    def test_each_part_contains_both_labels(self):
        normal = make_features(np.random.default_rng(2).uniform(size=(30, 2)), -1, "clean")
        anom = make_features(np.random.default_rng(3).uniform(size=(25, 2)), -1, "adv")
        for part in assemble_detection_sets(normal, anom, seed=1):
            assert set(np.unique(part.anomaly_labels)) == {0, 1}

    def test_union_reconstructs_input(self):
        rng = np.random.default_rng(4)
        normal = make_features(rng.uniform(size=(37, 2)), -1, "clean")
        anom = make_features(rng.uniform(size=(23, 2)), -1, "adv")
        parts = assemble_detection_sets(normal, anom, seed=2)
        merged = np.concatenate([p.values for p in parts])
        original = np.concatenate([normal.values, anom.values])
        assert sorted(map(tuple, merged)) == sorted(map(tuple, original))

    def test_empty_side_rejected(self):
        filled = make_features(np.zeros((4, 2)), -1, "x")
        empty = make_features(np.zeros((0, 2)), -1, "y")
        with pytest.raises(ValueError):
            assemble_detection_sets(filled, empty, seed=0)

    def test_deterministic(self):
        normal = make_features(np.random.default_rng(5).uniform(size=(50, 2)), -1, "clean")
        anom = make_features(np.random.default_rng(6).uniform(size=(50, 2)), -1, "adv")
        a = assemble_detection_sets(normal, anom, seed=3)
        b = assemble_detection_sets(normal, anom, seed=3)
        for pa, pb in zip(a, b):
            assert pa.values.tobytes() == pb.values.tobytes()


def separable_sets(seed, n=200, dim=4, margin=3.0):
    """Dimension 0 separates the classes with a hard gap when margin > 2."""
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal((n, dim))
    anom = rng.standard_normal((n, dim))
    normal[:, 0] = rng.uniform(-1.0, 1.0, size=n)
    anom[:, 0] = margin + rng.uniform(-1.0, 1.0, size=n)
    return (make_features(normal, -1, "clean"), make_features(anom, -1, "adv"))


class TestDetectorTraining:
    def test_separable_features_reach_auroc_one(self):
        normal, anom = separable_sets(seed=0, margin=6.0)
        train, val, test = assemble_detection_sets(normal, anom, seed=0)
        det = train_detector(train, val, hidden=16, seed=0)
        assert auroc(val.anomaly_labels, det.score(val.values)) == 1.0
        scored = score(det, test)
        assert evaluate(scored)["auroc"] == 1.0

    def test_shuffled_labels_give_chance_auroc(self):
        # permutation null: averaged over seeds, val AUROC sits near 0.5
        rng = np.random.default_rng(7)
        aurocs = []
        for seed in range(5):
            normal, anom = separable_sets(seed=seed, margin=0.0)  # no signal
            train, val, _ = assemble_detection_sets(normal, anom, seed=seed)
            det = train_detector(train, val, hidden=8, seed=seed, max_epochs=40)
            aurocs.append(auroc(val.anomaly_labels, det.score(val.values)))
        assert 0.35 < float(np.mean(aurocs)) < 0.65

    def test_same_seed_identical_detector(self):
        normal, anom = separable_sets(seed=1)
        train, val, _ = assemble_detection_sets(normal, anom, seed=1)
        d1 = train_detector(train, val, hidden=8, seed=4, max_epochs=30)
        d2 = train_detector(train, val, hidden=8, seed=4, max_epochs=30)
        for p1, p2 in zip(d1._params(), d2._params()):
            assert p1.data.tobytes() == p2.data.tobytes()

    def test_scores_in_open_unit_interval(self):
        normal, anom = separable_sets(seed=2)
        train, val, _ = assemble_detection_sets(normal, anom, seed=2)
        det = train_detector(train, val, hidden=8, seed=0, max_epochs=20)
        s = det.score(np.vstack([normal.values, anom.values]))
        assert np.all((s > 0.0) & (s < 1.0))
        assert np.array_equal(det.score(normal.values), det.score(normal.values))

    def test_standardization_applied(self):
        normal, anom = separable_sets(seed=3)
        train, val, _ = assemble_detection_sets(normal, anom, seed=3)
        det = train_detector(train, val, hidden=8, seed=0, max_epochs=10)
        raw = train.values[:5]
        direct = det.score(raw)
        manual_logit = det.logit(det.standardize(raw)).data[:, 0]
        np.testing.assert_allclose(direct, 1.0 / (1.0 + np.exp(-manual_logit)), rtol=1e-12)

    def test_dim_mismatch_rejected(self):
        normal, anom = separable_sets(seed=4)
        train, val, _ = assemble_detection_sets(normal, anom, seed=4)
        det = train_detector(train, val, hidden=8, seed=0, max_epochs=5)
        with pytest.raises(ValueError):
            det.score(np.zeros((3, 7)))


class TestScoresCsv:
    def test_round_trip(self, tmp_path):
        scored = ScoredSamples(np.array([3, 1, 4]), np.array([0, 1, 1]),
                               np.array([0.25, 0.5, 0.125]), ["a", "b", "b"])
        path = tmp_path / "scores.csv"
        save_scores_csv(scored, path)
        loaded = load_scores_csv(path)
        assert np.array_equal(loaded.sample_ids, scored.sample_ids)
        assert np.array_equal(loaded.labels, scored.labels)
        assert np.array_equal(loaded.scores, scored.scores)
        assert loaded.tags == scored.tags

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope\n")
        with pytest.raises(ValueError):
            load_scores_csv(path)
