"""
Loss terms, bipartite matching and the combined training loss
"""
import itertools

import numpy as np
import pytest

from nearquery.config import LossWeights
from nearquery.exceptions import ShapeError
from nearquery.lossmatch import (
    LOSS_TERMS,
    SegTargets,
    cross_entropy_loss,
    dice_loss,
    hungarian_match,
    mask_bce_loss,
    matching_cost,
    solve_assignment,
    total_loss,
)
from nearquery.model.query_decoder import PredictionSet
from nearquery.model.segmodel import DecoderOutputs, SegModel
from nearquery.numcore.tensor import Tensor
from tests.conftest import micro_config


def _t(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


def _brute_force(cost):
    n_rows, n_cols = cost.shape
    best = np.inf
    if n_rows >= n_cols:
        for rows in itertools.permutations(range(n_rows), n_cols):
            best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    else:
        for cols in itertools.permutations(range(n_cols), n_rows):
            best = min(best, sum(cost[r, c] for r, c in enumerate(cols)))
    return best


def _block_label():
    """16x16 label whose regions line up with the 4x4 mask grid"""
    label = np.zeros((16, 16), dtype=np.uint8)
    label[0:8, 0:8] = 1
    label[8:16, 12:16] = 2
    return label


class TestTargets:
    def test_present_classes_and_coverage(self):
        label = np.zeros((8, 8), dtype=np.uint8)
        label[0:2, 0:2] = 1
        label[4:8, 4:6] = 3
        targets = SegTargets.from_label_map(label, n_classes=3)
        assert targets.classes.tolist() == [0, 2]
        assert targets.masks.shape == (2, 8, 8)
        assert targets.coverage.shape == (2, 2, 2)
        assert targets.coverage[0, 0, 0] == pytest.approx(0.25)
        assert targets.coverage[1, 1, 1] == pytest.approx(0.5)

    def test_empty_label_has_no_targets(self):
        targets = SegTargets.from_label_map(np.zeros((8, 8), dtype=np.uint8), n_classes=2)
        assert targets.n_targets == 0
        assert targets.coverage.shape == (0, 2, 2)

    def test_label_beyond_class_count(self):
        with pytest.raises(ShapeError):
            SegTargets.from_label_map(np.full((8, 8), 4, dtype=np.uint8), n_classes=3)


class TestLossTerms:
    def test_dice_perfect_and_disjoint(self):
        target = np.zeros((4, 4))
        target[:2] = 1.0
        assert float(dice_loss(_t(target), target).data) == pytest.approx(0.0)
        disjoint = float(dice_loss(_t(1.0 - target), target).data)
        assert disjoint == pytest.approx(1.0 - 1.0 / 17.0)

    def test_dice_empty_pair_is_zero(self):
        assert float(dice_loss(_t(np.zeros((3, 3))), np.zeros((3, 3))).data) == pytest.approx(0.0)

    def test_dice_averages_leading_axis(self):
        target = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
        pred = np.stack([np.ones((2, 2)), np.ones((2, 2))])
        expected = (0.0 + (1.0 - 1.0 / 5.0)) / 2.0
        assert float(dice_loss(_t(pred), target).data) == pytest.approx(expected)

    def test_cross_entropy_uniform_logits(self):
        loss = cross_entropy_loss(_t(np.zeros((4, 5))), [0, 1, 2, 4])
        assert float(loss.data) == pytest.approx(np.log(5.0))

    def test_cross_entropy_class_weights_form_weighted_mean(self):
        logits = np.array([[2.0, 0.0], [0.0, 1.0]])
        log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        weights = np.array([1.0, 0.1])
        expected = -(1.0 * log_p[0, 0] + 0.1 * log_p[1, 1]) / 1.1
        loss = cross_entropy_loss(_t(logits), [0, 1], weights)
        assert float(loss.data) == pytest.approx(expected)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(_t(np.zeros((2, 3))), [0, 3])

    def test_bce_matches_closed_form(self, rng):
        x = rng.normal(size=(2, 3, 3))
        t = (rng.uniform(size=(2, 3, 3)) > 0.5).astype(np.float64)
        expected = np.mean(np.logaddexp(0.0, x) - x * t)
        assert float(mask_bce_loss(_t(x), t).data) == pytest.approx(expected)

    def test_bce_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mask_bce_loss(_t(np.zeros((2, 2))), np.zeros((3, 2)))


class TestAssignment:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            q = int(rng.integers(1, 7))
            t = int(rng.integers(1, 7))
            cost = rng.normal(size=(q, t))
            result = solve_assignment(cost)
            assert len(result.assignment) == min(q, t)
            assert len(set(result.queries)) == len(result.queries)
            assert len(set(result.targets)) == len(result.targets)
            assert result.total_cost == pytest.approx(_brute_force(cost))

    def test_empty_cost(self):
        assert solve_assignment(np.zeros((3, 0))).assignment == []

    def test_no_targets_no_match(self, rng):
        targets = SegTargets.from_label_map(np.zeros((8, 8), dtype=np.uint8), n_classes=2)
        match = hungarian_match(rng.normal(size=(3, 3)), rng.normal(size=(3, 2, 2)), targets, LossWeights())
        assert match.assignment == []

    def test_cost_prefers_right_query(self):
        targets = SegTargets.from_label_map(_block_label(), n_classes=2)
        mask_logits = np.full((2, 4, 4), -30.0)
        mask_logits[1, 0:2, 0:2] = 30.0
        mask_logits[0, 2:4, 3] = 30.0
        class_logits = np.array([[0.0, 10.0, 0.0], [10.0, 0.0, 0.0]])
        cost = matching_cost(class_logits, mask_logits, targets.classes, targets.coverage, LossWeights())
        assert cost.shape == (2, 2)
        match = hungarian_match(class_logits, mask_logits, targets, LossWeights())
        assert sorted(match.assignment) == [(0, 1), (1, 0)]

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            matching_cost(np.zeros((2, 3)), np.zeros((2, 3, 3)), np.array([0]), np.zeros((1, 2, 2)), LossWeights())

    def test_more_targets_than_queries(self):
        targets = SegTargets.from_label_map(_block_label(), n_classes=2)
        with pytest.raises(ShapeError, match="2 targets but only 1 queries"):
            hungarian_match(np.zeros((1, 3)), np.zeros((1, 4, 4)), targets, LossWeights())


class TestTotalLoss:
    def test_perfect_predictions_have_small_loss(self):
        label = _block_label()
        targets = SegTargets.from_label_map(label, n_classes=2)
        class_logits = np.full((3, 3), -40.0)
        class_logits[0, 0] = 40.0
        class_logits[1, 1] = 40.0
        class_logits[2, 2] = 40.0
        mask_logits = np.full((3, 4, 4), -40.0)
        mask_logits[0, 0:2, 0:2] = 40.0
        mask_logits[1, 2:4, 3] = 40.0
        ps = PredictionSet(class_logits=_t(class_logits), mask_logits=_t(mask_logits))
        outputs = DecoderOutputs(predictions=[ps, ps], image_size=(16, 16))
        loss, breakdown = total_loss(outputs, targets, LossWeights())
        assert float(loss.data) < 1e-3
        assert breakdown["bls_a"] == 0.0

    def test_breakdown_sums_to_total(self, rng):
        model = SegModel(micro_config(n_classes=2, bls_mode="two"), dtype="f64")
        image = Tensor(rng.uniform(size=(3, 32, 32)))
        label = np.zeros((32, 32), dtype=np.uint8)
        label[4:12, 4:16] = 1
        label[20:24, 24:28] = 2
        loss, breakdown = total_loss(model(image), SegTargets.from_label_map(label, 2), LossWeights())
        assert set(breakdown) == set(LOSS_TERMS)
        assert sum(breakdown.values()) == pytest.approx(float(loss.data), rel=1e-9)
        assert all(v > 0 for v in breakdown.values())

    def test_empty_image_only_classification(self, rng):
        model = SegModel(micro_config(n_classes=2), dtype="f64")
        targets = SegTargets.from_label_map(np.zeros((32, 32), dtype=np.uint8), 2)
        loss, breakdown = total_loss(model(Tensor(rng.uniform(size=(3, 32, 32)))), targets, LossWeights())
        assert breakdown["bce"] == 0.0
        assert breakdown["dice"] == 0.0
        assert float(loss.data) == pytest.approx(breakdown["cls"])

    def test_gradients_reach_queries(self, rng):
        model = SegModel(micro_config(n_classes=2), dtype="f64")
        label = np.zeros((32, 32), dtype=np.uint8)
        label[8:16, 8:16] = 1
        loss, _ = total_loss(model(Tensor(rng.uniform(size=(3, 32, 32)))), SegTargets.from_label_map(label, 2), LossWeights())
        loss.backward()
        assert np.abs(model.query_decoder.query_feat.grad).sum() > 0
