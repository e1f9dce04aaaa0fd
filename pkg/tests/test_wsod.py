"""Tests for the detection head: cosine classifier, sigmoid cross-entropy
training, pseudo-label construction, and per-class detection."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from scipy.special import expit

from conftest import random_unit, unit
from vmfmil.background import ObjectnessBackground, UniformBackground
from vmfmil.col import ColConfig, run_col
from vmfmil.dataio import ProposalSet, SyntheticWorldSpec, generate_synthetic
from vmfmil.errors import DimensionMismatchError, ValidationError
from vmfmil.wsod import (
    CosineClassifier,
    PseudoLabelSet,
    TrainConfig,
    _bce_loss_grad,
    build_pseudo_labels,
    detect,
    load_detections,
    run_wsod,
    save_classifiers,
    save_detections,
    train_classifier,
)


def make_pset(features, image_id="img", objectness=None):
    features = np.asarray(features, dtype=np.float64)
    p = features.shape[0]
    boxes = np.stack([[float(i), float(i), float(i + 2), float(i + 2)] for i in range(p)])
    return ProposalSet(image_id=image_id, boxes=boxes, features=features,
                       objectness=objectness)


class TestCosineClassifier:
    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal(8)
        feats = rng.standard_normal((20, 8))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        base = CosineClassifier(v=v, tau=20.0, class_id="c").scores(feats)
        for c in (5.0, 1e-3, 1e4):
            scaled = CosineClassifier(v=c * v, tau=20.0, class_id="c").scores(feats)
            assert np.max(np.abs(scaled - base)) < 1e-9

    def test_score_range(self):
        v = unit([1.0, 0.0])
        clf = CosineClassifier(v=v, tau=20.0, class_id="c")
        assert clf.scores(v[None, :])[0] == pytest.approx(20.0)
        assert clf.scores(-v[None, :])[0] == pytest.approx(-20.0)

    def test_validation(self):
        with pytest.raises(ValidationError):
            CosineClassifier(v=np.zeros(3), tau=20.0, class_id="c")
        with pytest.raises(ValidationError):
            CosineClassifier(v=np.ones(3), tau=0.0, class_id="c")
        clf = CosineClassifier(v=np.ones(3), tau=20.0, class_id="c")
        with pytest.raises(DimensionMismatchError):
            clf.scores(np.ones((2, 4)))

    def test_json_round_trip(self):
        clf = CosineClassifier(v=np.array([0.6, 0.8]), tau=15.0, class_id="cat")
        back = CosineClassifier.from_json(clf.to_json())
        assert back.class_id == "cat" and back.tau == 15.0
        assert np.allclose(back.v, clf.v)


class TestLossGradient:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        d, n = 6, 15
        x = rng.standard_normal((n, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = (rng.uniform(0, 1, n) > 0.5).astype(float)
        for _ in range(20):
            v = rng.standard_normal(d) * rng.uniform(0.3, 3.0)
            _, grad = _bce_loss_grad(v, x, y, 20.0, 1e-3)
            h = 1e-6
            for k in range(d):
                e = np.zeros(d)
                e[k] = h
                f_plus, _ = _bce_loss_grad(v + e, x, y, 20.0, 1e-3)
                f_minus, _ = _bce_loss_grad(v - e, x, y, 20.0, 1e-3)
                fd = (f_plus - f_minus) / (2 * h)
                denom = max(abs(fd), abs(grad[k]), 1.0)
                assert abs(grad[k] - fd) / denom <= 1e-5

    def test_loss_value_hand_case(self):
        # Single positive aligned with v: loss = softplus(tau) - tau + ridge.
        v = np.array([1.0, 0.0])
        x = np.array([[1.0, 0.0]])
        y = np.array([1.0])
        loss, _ = _bce_loss_grad(v, x, y, 20.0, 0.0)
        assert loss == pytest.approx(np.logaddexp(0.0, 20.0) - 20.0, abs=1e-9)


class TestTraining:
    def test_single_positive_stationary_point(self, caplog):
        x_pos = random_unit(5, np.random.default_rng(2))
        labels = PseudoLabelSet("c", [("img", 1, x_pos)], np.zeros((0, 5)))
        with caplog.at_level(logging.WARNING):
            clf = train_classifier(labels, TrainConfig(l2_reg=1e-3))
        # The optimum aligns with the positive; its score approaches tau.
        cos = float(clf.v @ x_pos) / np.linalg.norm(clf.v)
        assert cos > 1.0 - 1e-8
        assert clf.scores(x_pos[None, :])[0] == pytest.approx(20.0, rel=1e-6)

    def test_separable_margin_perfect_accuracy(self):
        rng = np.random.default_rng(3)
        axis = random_unit(8, rng)
        pos = np.stack([axis] * 6) + 0.2 * rng.standard_normal((6, 8))
        pos /= np.linalg.norm(pos, axis=1, keepdims=True)
        pos = np.stack([p if p @ axis > 0.5 else axis for p in pos])
        neg = np.stack(
            [v for v in (random_unit(8, rng) for _ in range(200)) if v @ axis < 0.0][:40]
        )
        labels = PseudoLabelSet(
            "c", [(f"p{i}", 0, f) for i, f in enumerate(pos)], neg
        )
        clf = train_classifier(labels)
        assert np.all(clf.scores(pos) > 0)
        assert np.all(clf.scores(neg) < 0)

    def test_empty_negative_warning(self, caplog):
        positives = [
            make_pset(np.eye(3)[[0, 1]], "a"),
        ]
        result = run_col(ColConfig(kappa_init=1.0), positives)
        with caplog.at_level(logging.WARNING):
            labels = build_pseudo_labels("c", positives, [], result)
        assert "no negative images" in caplog.text
        assert labels.negatives.shape == (0, 3)
        train_classifier(labels)  # still trains against the ridge alone

    def test_needs_positive(self):
        with pytest.raises(ValidationError):
            train_classifier(PseudoLabelSet("c", [], np.zeros((0, 3))))


class TestPseudoLabels:
    def test_top_index_selected(self):
        rng = np.random.default_rng(4)
        theta = random_unit(4, rng)
        sets = []
        for i in range(3):
            feats = np.stack([random_unit(4, rng), theta, random_unit(4, rng)])
            sets.append(make_pset(feats, f"s{i}"))
        result = run_col(ColConfig(kappa_init=10.0), sets)
        neg = [make_pset(np.eye(4)[:2], "n0")]
        labels = build_pseudo_labels("c", sets, neg, result)
        assert len(labels.positives) == 3
        for (image_id, idx, feat), pset in zip(labels.positives, sets):
            assert image_id == pset.image_id
            assert np.allclose(feat, pset.features[idx].astype(np.float64))
        assert labels.negatives.shape == (2, 4)

    def test_mismatched_col_result(self):
        rng = np.random.default_rng(5)
        sets = [make_pset(np.eye(3), f"s{i}") for i in range(2)]
        result = run_col(ColConfig(kappa_init=1.0), sets)
        with pytest.raises(ValidationError):
            build_pseudo_labels("c", sets[::-1], [], result)


class TestDetect:
    def _classifiers(self):
        return [
            CosineClassifier(v=np.array([1.0, 0.0]), tau=20.0, class_id="cat"),
            CosineClassifier(v=np.array([0.0, 1.0]), tau=20.0, class_id="dog"),
        ]

    def test_probabilities_and_classes(self):
        query = make_pset(np.eye(2), "q")
        dets = detect(self._classifiers(), query, nms_iou=None)
        assert len(dets) == 4
        by = {(d.class_id, tuple(d.box[:2])): d.score for d in dets}
        assert by[("cat", (0.0, 0.0))] == pytest.approx(expit(20.0))
        assert by[("cat", (1.0, 1.0))] == pytest.approx(expit(0.0))

    def test_nms_removes_duplicate_boxes(self):
        feats = np.array([[1.0, 0.0], [math.sqrt(0.5), math.sqrt(0.5)]])
        boxes = np.array([[0.0, 0.0, 4.0, 4.0], [0.0, 0.0, 4.0, 4.0]])
        query = ProposalSet("q", boxes, feats)
        dets = detect(self._classifiers()[:1], query, nms_iou=0.5)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(expit(20.0))

    def test_score_threshold(self):
        query = make_pset(np.eye(2), "q")
        dets = detect(self._classifiers(), query, nms_iou=None, score_thresh=0.9)
        assert {d.class_id for d in dets} == {"cat", "dog"}
        assert len(dets) == 2

    def test_detection_io_round_trip(self, tmp_path):
        query = make_pset(np.eye(2), "q")
        dets = detect(self._classifiers(), query, nms_iou=None)
        path = tmp_path / "dets.jsonl"
        save_detections(dets, path)
        back = load_detections(path)
        assert len(back) == len(dets)
        assert back[0].image_id == "q"


class TestRunWsod:
    @pytest.fixture(scope="class")
    @staticmethod
    def tight_world():
        spec = SyntheticWorldSpec(
            d=32, num_classes=3, kappa_class=200.0, kappa_background=20.0,
            proposals_per_image=10, seed=21,
        )
        index, sets, truth = generate_synthetic(spec, 8)
        proposals = {p.image_id: p for p in sets}
        return index, proposals, truth

    def _episode_inputs(self, index, proposals, classes, k=3, q=2):
        support = {}
        queries = []
        for cls in classes:
            imgs = [r.image_id for r in index.records if cls in r.labels]
            support[cls] = [proposals[i] for i in imgs[:k]]
            queries.extend(proposals[i] for i in imgs[k : k + q])
        return support, queries

    def test_localizes_planted_objects(self, tight_world):
        index, proposals, truth = tight_world
        classes = sorted({c for r in index.records for c in r.labels})
        support, queries = self._episode_inputs(index, proposals, classes)
        # Moderate kappa_init lets the E-step warm up instead of hard-locking
        # onto whichever proposal the prototype initialization favours.
        result = run_wsod(
            support, queries, ColConfig(kappa_init=50.0),
            bg=ObjectnessBackground(),
        )
        assert set(result.classifiers) == set(classes)
        # COL pseudo-labels pick planted positives on this easy world.
        for cls, col_result in result.col_results.items():
            for image_id, idx in zip(col_result.image_ids, col_result.top_index):
                assert idx in truth.positive_indices[image_id]
        # Top detection of the right class hits the planted proposal's box.
        for query in queries:
            cls = truth.image_class[query.image_id]
            best = max(
                (d for d in result.detections
                 if d.image_id == query.image_id and d.class_id == cls),
                key=lambda d: d.score,
            )
            pos_boxes = query.boxes[truth.positive_indices[query.image_id]]
            assert any(np.allclose(best.box, b) for b in pos_boxes)

    def test_class_order_invariance(self, tight_world):
        index, proposals, _ = tight_world
        classes = sorted({c for r in index.records for c in r.labels})
        support, queries = self._episode_inputs(index, proposals, classes)
        fwd = run_wsod(support, queries, ColConfig(kappa_init=50.0),
                       bg=ObjectnessBackground())
        rev_support = {c: support[c] for c in reversed(classes)}
        rev = run_wsod(rev_support, queries, ColConfig(kappa_init=50.0),
                       bg=ObjectnessBackground())
        for cls in classes:
            assert np.allclose(fwd.classifiers[cls].v, rev.classifiers[cls].v)
        key = lambda d: (d.image_id, d.class_id, tuple(d.box), d.score)
        assert sorted(map(key, fwd.detections)) == sorted(map(key, rev.detections))

    def test_save_classifiers(self, tight_world, tmp_path):
        index, proposals, _ = tight_world
        classes = sorted({c for r in index.records for c in r.labels})[:2]
        support, queries = self._episode_inputs(index, proposals, classes, k=2, q=1)
        result = run_wsod(support, queries, ColConfig(kappa_init=200.0),
                          bg=ObjectnessBackground())
        path = tmp_path / "clf.json"
        save_classifiers(result.classifiers, path)
        assert path.exists() and path.stat().st_size > 0
