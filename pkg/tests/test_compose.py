"""Unit tests for hisop.compose module."""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hisop.compose import (
    LossWeights,
    SemanticVoxelGrid,
    UnifiedGridSpec,
    class_frequency_weights,
    confusion_matrix,
    depth_bce,
    evaluate,
    frustum_mask,
    naive_concat_compose,
    oracle_head_weights,
    semantic_ce,
    semantic_head,
    total_loss,
    voxel_pool,
    zero_gated_compose,
)
from hisop.geometry import Intrinsics, build_hypotheses, look_from
from hisop.selftest import monotonicity_sweep, naive_confusion, naive_miou, naive_voxel_pool, random_pool_case
from utils.common import ArgumentError, ShapeError, UndefinedLossError

GRID = UnifiedGridSpec(extents=(4, 3, 2), voxel_size=0.5, origin=np.array([-1.0, 0.0, 0.0]))


def grid_of(labels, num_classes=2):
    return SemanticVoxelGrid(labels=np.asarray(labels).reshape(-1, 1, 1), num_classes=num_classes)


class TestUnifiedGridSpec:
    """Tests for the UnifiedGridSpec type."""

    def test_cell_indices(self):
        """Test flat indexing along x, y, z and -1 outside."""
        points = np.array(
            [
                [-1.0, 0.0, 0.0],  # first cell
                [-0.75, 0.25, 0.25],
                [0.99, 1.49, 0.99],  # last cell
                [-1.01, 0.0, 0.0],
                [0.0, 1.5, 0.0],
            ]
        )
        np.testing.assert_array_equal(GRID.cell_indices(points), [0, 0, 23, -1, -1])

    def test_index_order(self):
        """Test that z varies fastest, then y, then x."""
        point = GRID.origin + np.array([1.25, 0.75, 0.75])  # cell (2, 1, 1)
        assert GRID.cell_indices(point) == (2 * 3 + 1) * 2 + 1

    def test_centers_map_to_their_cells(self):
        """Test that every voxel center lies in its own cell."""
        flat = GRID.cell_indices(GRID.centers()).reshape(-1)
        np.testing.assert_array_equal(flat, np.arange(GRID.size))

    @pytest.mark.parametrize("kwargs", [{"extents": (0, 2, 2), "voxel_size": 1.0}, {"extents": (2, 2, 2), "voxel_size": 0.0}])
    def test_invalid_grid_raises(self, kwargs):
        """Test that empty extents and non-positive voxel sizes are rejected."""
        with pytest.raises(ArgumentError):
            UnifiedGridSpec(**kwargs)


class TestVoxelPool:
    """Tests for voxel_pool function."""

    @settings(max_examples=20)
    @given(st.integers(0, 10_000))
    def test_conserves_mass(self, seed):
        """Test that pooled plus dropped mass equals the input mass per channel."""
        vol, hyps, K, pose, grid = random_pool_case(np.random.default_rng(seed))
        pooled = voxel_pool(vol, hyps, K, pose, grid)
        np.testing.assert_allclose(
            pooled.values.sum(axis=(1, 2, 3)) + pooled.dropped_mass, vol.sum(axis=(1, 2, 3)), atol=1e-9
        )

    @settings(max_examples=10)
    @given(st.integers(0, 10_000))
    def test_matches_sequential_oracle(self, seed):
        """Test bitwise agreement with a pixel-major, hypothesis-minor loop."""
        vol, hyps, K, pose, grid = random_pool_case(np.random.default_rng(seed))
        np.testing.assert_array_equal(voxel_pool(vol, hyps, K, pose, grid).values, naive_voxel_pool(vol, hyps, K, pose, grid))

    def test_mean_reduce_averages(self):
        """Test that mean pooling divides each cell by its sample count."""
        hyps = build_hypotheses(1.0, 1.1, 2)
        K = Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
        grid = UnifiedGridSpec(extents=(1, 1, 1), voxel_size=4.0, origin=np.array([-2.0, 0.0, -2.0]))
        vol = np.array([[[[2.0]], [[4.0]]]])
        pose = look_from(np.zeros(3))
        assert voxel_pool(vol, hyps, K, pose, grid).values[0, 0, 0, 0] == 6.0
        assert voxel_pool(vol, hyps, K, pose, grid, reduce="mean").values[0, 0, 0, 0] == 3.0

    def test_out_of_grid_samples_are_dropped(self):
        """Test that a grid behind the camera receives nothing."""
        hyps = build_hypotheses(1.0, 2.0, 2)
        grid = UnifiedGridSpec(extents=(2, 2, 2), voxel_size=0.5, origin=np.array([0.0, -5.0, 0.0]))
        vol = np.ones((1, 2, 3, 3))
        pooled = voxel_pool(vol, hyps, Intrinsics(fx=2.0, fy=2.0, cx=1.0, cy=1.0), look_from(np.zeros(3)), grid)
        assert not pooled.values.any()
        assert pooled.dropped == 18

    def test_depth_mismatch_raises(self):
        """Test that the volume depth must match the hypothesis count."""
        with pytest.raises(ShapeError, match="depth slices"):
            voxel_pool(np.zeros((1, 3, 2, 2)), build_hypotheses(1.0, 2.0, 2), Intrinsics.identity(), look_from(np.zeros(3)), GRID)

    def test_unknown_reduction_raises(self):
        """Test that reductions other than sum and mean are rejected."""
        with pytest.raises(ArgumentError, match="pool reduction"):
            voxel_pool(np.zeros((1, 2, 2, 2)), build_hypotheses(1.0, 2.0, 2), Intrinsics.identity(), look_from(np.zeros(3)), GRID, reduce="max")


class TestComposition:
    """Tests for zero_gated_compose, naive_concat_compose and frustum_mask."""

    def test_zero_gate_is_bitwise_identity(self, rng):
        """Test that a zero gate returns the geometric volume byte for byte, signed zeros included."""
        pooled, vvox = rng.normal(size=(2, 3, 4, 4, 2))
        vvox[1, 0, 0, 0] = -0.0
        composed = zero_gated_compose(pooled, vvox, 0.0)
        assert composed.values.tobytes() == vvox.tobytes()

    def test_per_channel_gate(self, rng):
        """Test that each channel uses its own gate."""
        pooled, vvox = rng.normal(size=(2, 2, 3, 3, 3))
        composed = zero_gated_compose(pooled, vvox, np.array([0.0, 2.0])).values
        np.testing.assert_array_equal(composed[0], vvox[0])
        np.testing.assert_allclose(composed[1], 2.0 * pooled[1] + vvox[1])

    def test_shape_mismatch_raises(self):
        """Test that pooled and geometric volumes must agree."""
        with pytest.raises(ShapeError, match="differs"):
            zero_gated_compose(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)), 1.0)

    def test_naive_concat_shape(self, rng):
        """Test that the concat baseline stacks both volumes on the grid extents."""
        composed = naive_concat_compose(rng.normal(size=(3, 4, 5, 2)), rng.normal(size=(6, 7, 8, 9)))
        assert composed.values.shape == (9, 4, 5, 2)

    def test_frustum_mask(self):
        """Test that voxels ahead of the camera are visible and voxels behind are not."""
        grid = UnifiedGridSpec(extents=(1, 2, 1), voxel_size=1.0, origin=np.array([-0.5, 0.0, -0.5]))
        K = Intrinsics(fx=4.0, fy=4.0, cx=3.5, cy=3.5)
        camera = look_from(np.array([0.0, 1.0, 0.0]))
        mask = frustum_mask(grid, K, camera, 8, 8)
        np.testing.assert_array_equal(mask[0, :, 0], [False, True])
        assert not frustum_mask(grid, K, camera, 8, 8, depth_range=(2.0, 5.0)).any()


class TestSemanticHead:
    """Tests for oracle_head_weights and semantic_head."""

    def test_oracle_head_reads_class_channels(self):
        """Test that the selector picks class channels and thresholds empty space."""
        weights, bias = oracle_head_weights(texture_channels=2, num_classes=2, threshold=0.5)
        vcom = np.zeros((4, 3, 1, 1))
        vcom[2, 0] = 0.9  # class 1 above threshold
        vcom[3, 1] = 0.2  # class 2 below threshold
        _, grid = semantic_head(vcom, weights, bias)
        np.testing.assert_array_equal(grid.labels[:, 0, 0], [1, 0, 0])

    def test_blocks_are_summed(self):
        """Test that a multi-block head adds the class channel of every block."""
        weights, _ = oracle_head_weights(texture_channels=1, num_classes=1, threshold=0.0, blocks=2)
        assert weights.shape == (2, 4)
        np.testing.assert_array_equal(weights[1], [0.0, 1.0, 0.0, 1.0])

    def test_ties_pick_lowest_index(self):
        """Test that equal logits resolve to the lowest class."""
        _, grid = semantic_head(np.zeros((2, 1, 1, 1)), np.eye(3, 2))
        assert grid.labels[0, 0, 0] == 0

    def test_channel_mismatch_raises(self):
        """Test that the head must match the composed channel count."""
        with pytest.raises(ShapeError, match="Head expects"):
            semantic_head(np.zeros((3, 1, 1, 1)), np.eye(2))


class TestLosses:
    """Tests for class weights, depth_bce, semantic_ce and total_loss."""

    def test_frequency_weights(self):
        """Test inverse-log-frequency weights with an unseen class."""
        weights = class_frequency_weights(grid_of([0, 0, 0, 1], num_classes=2))
        np.testing.assert_allclose(weights, [1 / np.log(1.77), 1 / np.log(1.27), 1 / np.log(1.02)])

    def test_depth_bce_one_pixel(self):
        """Test the summed binary cross-entropy of a single pixel."""
        dist = np.array([0.7, 0.2, 0.1]).reshape(3, 1, 1)
        expected = -np.log(0.7) - np.log(0.8) - np.log(0.9)
        assert depth_bce(dist, np.array([[0]])) == pytest.approx(expected)

    def test_depth_bce_skips_unsupervised(self):
        """Test that pixels with bin -1 do not contribute."""
        dist = np.full((2, 1, 2), 0.5)
        dist[:, 0, 1] = [0.01, 0.99]
        assert depth_bce(dist, np.array([[0, -1]])) == pytest.approx(-2 * np.log(0.5))

    def test_depth_bce_without_supervision_raises(self):
        """Test that an all-unsupervised image has no defined depth loss."""
        with pytest.raises(UndefinedLossError):
            depth_bce(np.full((2, 1, 1), 0.5), np.array([[-1]]))

    def test_semantic_ce_uniform_logits(self):
        """Test that uniform logits give ln(N + 1)."""
        gt = grid_of([0, 1, 2], num_classes=2)
        assert semantic_ce(np.zeros((3, 3, 1, 1)), gt) == pytest.approx(np.log(3))

    def test_semantic_ce_respects_ignore(self):
        """Test that ignored voxels and masked voxels are skipped."""
        gt = grid_of([1, 255, 1], num_classes=1)
        logits = np.zeros((2, 3, 1, 1))
        logits[1, 0] = 10.0
        masked = semantic_ce(logits, gt, ignore_mask=np.array([False, False, True]).reshape(3, 1, 1))
        assert masked == pytest.approx(np.log1p(np.exp(-10.0)))

    def test_semantic_ce_zero_weights_raise(self):
        """Test that all-zero supervised weights leave the loss undefined."""
        gt = grid_of([1, 1], num_classes=1)
        with pytest.raises(UndefinedLossError, match="sum to zero"):
            semantic_ce(np.zeros((2, 2, 1, 1)), gt, class_weights=(1.0, 0.0))

    def test_semantic_ce_all_ignored_raises(self):
        """Test that a grid with nothing supervised raises."""
        with pytest.raises(UndefinedLossError):
            semantic_ce(np.zeros((2, 1, 1, 1)), grid_of([255], num_classes=1))

    def test_total_loss_combines_terms(self):
        """Test that the total is L_depth + lambda_ce * L_ce."""
        gt = grid_of([0, 1], num_classes=1)
        report = total_loss(
            np.zeros((2, 2, 1, 1)), gt, np.full((2, 1, 1), 0.5), np.array([[1]]), LossWeights(lambda_ce=2.0)
        )
        assert report.total == pytest.approx(report.l_depth + 2.0 * report.l_ce)

    def test_negative_lambda_rejected(self):
        """Test that lambda_ce must be non-negative."""
        with pytest.raises(ArgumentError):
            LossWeights(lambda_ce=-1.0)


class TestMetrics:
    """Tests for confusion_matrix and evaluate."""

    def test_perfect_prediction(self):
        """Test that a prediction equal to the ground truth scores 1."""
        gt = grid_of([0, 1, 2, 2])
        metrics = evaluate(gt, gt)
        assert metrics.iou == 1.0 and metrics.miou == 1.0

    def test_empty_union_scores_one(self):
        """Test that all-empty prediction and ground truth give IoU and mIoU 1."""
        empty = grid_of([0, 0, 0])
        metrics = evaluate(empty, empty)
        assert metrics.iou == 1.0 and metrics.miou == 1.0
        assert all(np.isnan(v) for v in metrics.per_class_iou)

    def test_absent_class_is_nan_and_skipped(self):
        """Test that a class absent from both grids does not enter the mean."""
        metrics = evaluate(grid_of([0, 1, 1, 0]), grid_of([0, 1, 0, 0]))
        assert metrics.per_class_iou[0] == 0.5
        assert np.isnan(metrics.per_class_iou[1])
        assert metrics.miou == 0.5

    def test_ignore_labels_are_excluded(self):
        """Test that voxels labeled 255 count in neither grid."""
        cm = confusion_matrix(grid_of([1, 2, 0]), grid_of([1, 255, 0]))
        assert cm.sum() == 2

    def test_matches_oracle(self, rng):
        """Test confusion counts and scores against the nested-loop oracle."""
        for _ in range(20):
            gt = rng.integers(0, 4, size=(3, 4, 2))
            pred = rng.integers(0, 4, size=(3, 4, 2))
            pred_grid, gt_grid = SemanticVoxelGrid(labels=pred, num_classes=3), SemanticVoxelGrid(labels=gt, num_classes=3)
            cm = naive_confusion(pred, gt, 4)
            np.testing.assert_array_equal(confusion_matrix(pred_grid, gt_grid), cm)
            metrics = evaluate(pred_grid, gt_grid)
            assert (metrics.iou, metrics.miou) == naive_miou(cm)

    def test_fixing_a_voxel_never_lowers_miou(self):
        """Test monotonicity over every 2x2x1 pair of label grids."""
        assert monotonicity_sweep(num_classes=2)

    def test_extent_mismatch_raises(self):
        """Test that prediction and ground truth must share extents."""
        with pytest.raises(ShapeError):
            confusion_matrix(grid_of([0, 1]), grid_of([0, 1, 1]))

    def test_out_of_range_label_rejected(self):
        """Test that labels above num_classes are rejected."""
        with pytest.raises(ArgumentError, match="Labels must lie"):
            grid_of([0, 3], num_classes=2)
