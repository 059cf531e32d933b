"""Unit tests for hisop.pipeline module."""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from hisop.pipeline import StageTimer, believed_poses, make_trajectory, run_pipeline
from utils.config import BENCH_CONFIG_NAME, default_config_path, load_config, parse_config, with_ablations, with_run_overrides

SMALL_CONFIG = """
[run]
frames = 3

[camera]
height = 12
width = 16
fx = 10.0
fy = 10.0
cx = 7.5
cy = 5.5

[hypotheses]
count = 6

[grid]
extents = 16 16 4
voxel_size = 0.8
"""


@pytest.fixture(scope="module")
def small_config():
    return parse_config(SMALL_CONFIG)


@pytest.fixture(scope="module")
def small_run(small_config):
    return run_pipeline(small_config)


class TestTrajectory:
    """Tests for make_trajectory and believed_poses."""

    def test_current_pose_first(self, small_config):
        """Test that frame i sits i steps behind the configured position."""
        poses = make_trajectory(small_config)
        assert len(poses) == 3
        np.testing.assert_allclose(poses[0].center, [0.0, 0.0, 1.2], atol=1e-12)
        np.testing.assert_allclose(poses[2].center, [-0.5, -0.8, 1.2], atol=1e-12)

    def test_noise_free_poses_are_kept(self, small_config):
        """Test that zero noise hands the true poses through."""
        poses = make_trajectory(small_config)
        assert believed_poses(small_config, poses) == poses

    def test_noise_jitters_only_history(self):
        """Test that pose noise leaves the current frame alone."""
        config = parse_config(SMALL_CONFIG + "\n[trajectory]\nrotation_noise = 0.01\ntranslation_noise = 0.05\n")
        poses = make_trajectory(config)
        believed = believed_poses(config, poses)
        assert believed[0] is poses[0]
        assert not np.allclose(believed[1].translation, poses[1].translation)


class TestStageTimer:
    """Tests for the StageTimer type."""

    def test_stages_accumulate(self):
        """Test that repeated stages add up and every stage is recorded."""
        timer = StageTimer()
        with timer.stage("a"):
            pass
        with timer.stage("a"):
            pass
        with timer.stage("b"):
            pass
        assert set(timer.timings) == {"a", "b"}
        assert all(ms >= 0.0 for ms in timer.timings.values())


class TestRunPipeline:
    """Tests for run_pipeline function."""

    def test_outputs_cover_the_grid(self, small_run):
        """Test prediction and ground-truth extents, metric ranges and the affinity layout."""
        assert small_run.prediction.extents == (16, 16, 4)
        assert small_run.ground_truth.extents == (16, 16, 4)
        assert small_run.ignore_mask.shape == (16, 16, 4)
        report = small_run.report
        assert 0.0 <= report.miou <= 1.0 and 0.0 <= report.iou <= 1.0
        assert np.isfinite(report.l_depth)
        assert small_run.affinity.values.shape == (3, 6, 12, 16)
        assert small_run.plain_affinity is not None

    def test_stages_are_timed(self, small_run):
        """Test that every pipeline stage reports a wall time."""
        assert set(small_run.report.timings) == {"scene", "gcl", "pool", "tvc", "cpa", "adr", "dhbt", "head"}

    def test_report_row(self, small_run):
        """Test the CSV row layout and that timing is zero unless recorded."""
        row = small_run.report.to_row()
        assert list(row) == ["run_id", "iou", "miou", "class_1", "class_2", "class_3", "class_4", "l_depth", "l_ce", "wall_ms"]
        assert row["wall_ms"] == 0.0
        assert small_run.report.to_row(record_timing=True)["wall_ms"] > 0.0

    def test_deterministic_across_threads(self, small_config, small_run):
        """Test that worker count does not change the prediction or the scores."""
        again = run_pipeline(with_run_overrides(small_config, threads=4))
        np.testing.assert_array_equal(again.prediction.labels, small_run.prediction.labels)
        assert again.report.miou == small_run.report.miou
        np.testing.assert_array_equal(again.affinity.values, small_run.affinity.values)

    def test_zero_gate_equals_geometric_only(self, small_config):
        """Test that a zero gate predicts exactly what the geometric branch alone predicts."""
        gated = run_pipeline(parse_config(SMALL_CONFIG + "\n[compose]\ngate = 0.0\n"))
        geometric = run_pipeline(with_ablations(small_config, ["temporal=off"]))
        np.testing.assert_array_equal(gated.prediction.labels, geometric.prediction.labels)
        assert geometric.affinity is None

    @pytest.mark.parametrize(
        "assignments",
        [
            ["pose_shuffle=on"],
            ["cpa=off", "adr=off"],
            ["warp=off"],
            ["cost_volume_mode=on"],
            ["gcl_confidence=off"],
            ["dhbt=off"],
            ["scale_isolation=off"],
            ["multigroup=off"],
            ["affinity_weights=off"],
            ["deformable=off"],
            ["cascade=off"],
        ],
    )
    def test_ablation_variants_run(self, small_config, assignments):
        """Test that every ablation switch yields a valid prediction."""
        artifacts = run_pipeline(with_ablations(small_config, assignments))
        assert artifacts.prediction.extents == (16, 16, 4)
        assert 0.0 <= artifacts.report.miou <= 1.0

    def test_single_group_affinity(self, small_config):
        """Test that switching multigroup off leaves one affinity group."""
        artifacts = run_pipeline(with_ablations(small_config, ["multigroup=off"]))
        assert artifacts.affinity.group_count == 1

    def test_plane_scene_file(self):
        """Test a run over the bundled plane scene."""
        artifacts = run_pipeline(parse_config(SMALL_CONFIG + "\n[scene]\npath = scenes/plane.scene\n"))
        assert (artifacts.ground_truth.labels == 1).any()
        assert artifacts.current_depth.max() == pytest.approx(3.6)


class TestAlignmentDirection:
    """Tests that aligned history helps on the bench scenes."""

    SEEDS = range(4)

    @pytest.fixture(scope="class")
    def bench_scores(self):
        config = load_config(default_config_path(BENCH_CONFIG_NAME))
        scores = {"aligned": [], "shuffled": [], "plain": []}
        for seed in self.SEEDS:
            seeded = with_run_overrides(config, seed=seed)
            scores["aligned"].append(run_pipeline(seeded).report.miou)
            scores["shuffled"].append(run_pipeline(with_ablations(seeded, ["pose_shuffle=on"])).report.miou)
            scores["plain"].append(run_pipeline(with_ablations(seeded, ["cpa=off", "adr=off"])).report.miou)
        return {name: float(np.mean(values)) for name, values in scores.items()}

    def test_aligned_beats_shuffled_poses(self, bench_scores):
        """Test that correct poses score higher than shuffled ones on average."""
        assert bench_scores["aligned"] > bench_scores["shuffled"]

    def test_aligned_beats_unaligned_history(self, bench_scores):
        """Test that affinity gating with refinement beats plain averaged history on average."""
        assert bench_scores["aligned"] > bench_scores["plain"]
