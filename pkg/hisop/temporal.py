"""Temporal volume construction by plane-sweep warping of historical frames."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Final, Sequence

import numpy as np

from hisop.geometry import DepthHypothesisSet, Intrinsics, RigidPose, relative_pose, warp_grid
from hisop.lifting import ContextFeature
from hisop.numerics import bilinear_sample_grid, parallel_map
from utils.common import ArgumentError, ShapeError, check_choice

MATCH_HADAMARD: Final[str] = "hadamard"
MATCH_ABSDIFF: Final[str] = "absdiff"
MATCH_MODES: Final[tuple[str, ...]] = (MATCH_HADAMARD, MATCH_ABSDIFF)


@dataclass(frozen=True, eq=False)
class FrameObservation:
    feature: ContextFeature
    intrinsics: Intrinsics
    pose: RigidPose
    index: int = 0


@dataclass(frozen=True, eq=False)
class TemporalFeatureVolume:
    """V_tem [2C, D, H, W]: current block then historical block on the channel axis."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 4 or self.values.shape[0] % 2:
            raise ShapeError(f"Temporal volume needs an even channel extent, got {self.values.shape}")

    @property
    def block_channels(self) -> int:
        return self.values.shape[0] // 2

    @property
    def current(self) -> np.ndarray:
        return self.values[: self.block_channels]

    @property
    def historical(self) -> np.ndarray:
        return self.values[self.block_channels :]


def lift_current(frame: FrameObservation, hyps: DepthHypothesisSet) -> np.ndarray:
    """Replicate the current feature map across every hypothesis slice."""
    feature = frame.feature.values
    return np.repeat(feature[:, None, :, :], hyps.count, axis=1)


def warp_historical(
    hist: FrameObservation, cur: FrameObservation, hyps: DepthHypothesisSet
) -> np.ndarray:
    """Sample the historical map at each current pixel's warp for every hypothesis.

    Behind-camera and out-of-image samples are zero. An identity relative pose
    with equal intrinsics reproduces the historical map without resampling.
    """
    if hist.feature.extents != cur.feature.extents:
        raise ShapeError(
            f"Historical extents {hist.feature.extents} differ from current {cur.feature.extents}"
        )
    pose = relative_pose(cur.pose, hist.pose)
    if pose.is_identity() and hist.intrinsics == cur.intrinsics:
        return lift_current(hist, hyps)

    height, width = cur.feature.extents
    us, vs, valid = warp_grid(cur.intrinsics, hist.intrinsics, pose, height, width, hyps.values)

    def sample_slice(j: int) -> np.ndarray:
        sampled = bilinear_sample_grid(hist.feature.values, us[j], vs[j], border="zero")
        return np.where(valid[j], sampled, 0.0)

    return np.stack(parallel_map(sample_slice, list(range(hyps.count))), axis=1)


def _check_frames(frames: Sequence[FrameObservation]) -> None:
    if len(frames) < 2:
        raise ArgumentError(f"Temporal construction needs a current and >= 1 historical frame, got {len(frames)}")
    channels = frames[0].feature.channels
    for frame in frames[1:]:
        if frame.feature.channels != channels:
            raise ShapeError(
                f"Frame {frame.index} has {frame.feature.channels} channels, expected {channels}"
            )


def build_temporal_volume(
    frames: Sequence[FrameObservation], hyps: DepthHypothesisSet
) -> TemporalFeatureVolume:
    """Concat(Lift(F_t), mean of Warp(F_t-i)) on the channel axis; frames[0] is current."""
    _check_frames(frames)
    current, *history = frames
    warped = [warp_historical(frame, current, hyps) for frame in history]
    historical = np.mean(warped, axis=0)
    return TemporalFeatureVolume(values=np.concatenate([lift_current(current, hyps), historical], axis=0))


def stack_historical(
    frames: Sequence[FrameObservation], hyps: DepthHypothesisSet
) -> TemporalFeatureVolume:
    """Stacking baseline: historical maps replicated along depth without warping."""
    _check_frames(frames)
    current, *history = frames
    historical = np.mean([lift_current(frame, hyps) for frame in history], axis=0)
    return TemporalFeatureVolume(values=np.concatenate([lift_current(current, hyps), historical], axis=0))


def build_cost_volume(
    frames: Sequence[FrameObservation], hyps: DepthHypothesisSet, mode: str = MATCH_ABSDIFF
) -> np.ndarray:
    """C(d) = (1/N) sum_i Match(f_ref, warp_i) per hypothesis slice, [C, D, H, W]."""
    check_choice(mode, MATCH_MODES, "match mode")
    _check_frames(frames)
    current, *history = frames
    reference = lift_current(current, hyps)
    cost = np.zeros_like(reference)
    for frame in history:
        warped = warp_historical(frame, current, hyps)
        cost += reference * warped if mode == MATCH_HADAMARD else np.abs(reference - warped)
    return cost / len(history)


def cost_volume_depth(cost: np.ndarray, mode: str = MATCH_ABSDIFF) -> np.ndarray:
    """Best hypothesis index per pixel: argmin of mean absdiff, argmax of mean product."""
    check_choice(mode, MATCH_MODES, "match mode")
    mean_cost = cost.mean(axis=0)
    return mean_cost.argmin(axis=0) if mode == MATCH_ABSDIFF else mean_cost.argmax(axis=0)


def shuffle_poses(
    frames: Sequence[FrameObservation], rng: np.random.Generator
) -> list[FrameObservation]:
    """Give every historical frame the pose of a different frame in the sequence.

    The current frame keeps its pose. No historical frame keeps its own pose.
    """
    count = len(frames)
    shuffled = [frames[0]] if frames else []
    for i in range(1, count):
        others = [j for j in range(count) if j != i]
        source = others[int(rng.integers(len(others)))]
        shuffled.append(replace(frames[i], pose=frames[source].pose))
    return shuffled
