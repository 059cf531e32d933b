"""End-to-end forward pass: scene oracle, geometric and temporal branches, composition, evaluation."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Final, Iterator

import numpy as np

from hisop.alignment import (
    GROUP_DILATIONS,
    PatternAffinity,
    RefineParams,
    TapSet,
    context_kernels,
    identity_kernels,
    load_refine_params,
    multilevel_refine,
    temporal_affinity,
    temporal_reducer,
)
from hisop.compose import (
    ComposedVolume,
    LossWeights,
    SemanticVoxelGrid,
    UnifiedGridSpec,
    class_frequency_weights,
    evaluate,
    frustum_mask,
    naive_concat_compose,
    oracle_head_weights,
    semantic_head,
    total_loss,
    voxel_pool,
    zero_gated_compose,
)
from hisop.geometry import DepthHypothesisSet, Intrinsics, RigidPose, build_hypotheses, look_from, perturb_pose
from hisop.lifting import ContextFeature, depth_confidence, lift_to_voxel_volume, plain_lift
from hisop.numerics import Conv3DKernel, set_num_threads, softmax
from hisop.scenes import (
    Scene,
    build_scene,
    depth_logits,
    frames_for_trajectory,
    load_scene_spec,
    random_scene_spec,
    voxelize_ground_truth,
)
from hisop.temporal import (
    FrameObservation,
    TemporalFeatureVolume,
    build_cost_volume,
    build_temporal_volume,
    shuffle_poses,
    stack_historical,
)
from utils.common import UndefinedLossError
from utils.config import RANDOM_SCENE, RunConfig, resolve_input_file

#seed offsets of the independent random streams within one run
POSE_NOISE_STREAM: Final[int] = 1
ORACLE_STREAM: Final[int] = 2
SHUFFLE_STREAM: Final[int] = 3
KERNEL_STREAM: Final[int] = 4
TAP_STREAM: Final[int] = 5


@dataclass(frozen=True)
class RunReport:
    run_id: str
    miou: float
    iou: float
    per_class_iou: tuple[float, ...]
    l_depth: float
    l_ce: float
    total_loss: float
    dropped: int
    dropped_mass: float
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def wall_ms(self) -> float:
        return sum(self.timings.values())

    def to_row(self, record_timing: bool = False) -> dict[str, object]:
        row: dict[str, object] = {"run_id": self.run_id, "iou": self.iou, "miou": self.miou}
        for cls, value in enumerate(self.per_class_iou, start=1):
            row[f"class_{cls}"] = value
        row["l_depth"] = self.l_depth
        row["l_ce"] = self.l_ce
        row["wall_ms"] = self.wall_ms if record_timing else 0.0
        return row


@dataclass(frozen=True, eq=False)
class RunArtifacts:
    report: RunReport
    prediction: SemanticVoxelGrid
    ground_truth: SemanticVoxelGrid
    ignore_mask: np.ndarray
    hypotheses: DepthHypothesisSet
    affinity: PatternAffinity | None = None
    plain_affinity: PatternAffinity | None = None
    current_depth: np.ndarray | None = None


class StageTimer:
    """Wall-clock milliseconds per named stage."""

    def __init__(self) -> None:
        self.timings: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + (time.perf_counter() - start) * 1000.0


#setup
def grid_from_config(config: RunConfig) -> UnifiedGridSpec:
    return UnifiedGridSpec(
        extents=tuple(config.grid.extents),
        voxel_size=config.grid.voxel_size,
        origin=np.array(config.grid.origin),
    )


def intrinsics_from_config(config: RunConfig) -> Intrinsics:
    cam = config.camera
    return Intrinsics(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy)


def hypotheses_from_config(config: RunConfig) -> DepthHypothesisSet:
    hyp = config.hypotheses
    return build_hypotheses(hyp.d_min, hyp.d_max, hyp.count, hyp.spacing)


def load_scene(config: RunConfig) -> Scene:
    """The configured scene file, or a seeded random scene when the path is 'random'."""
    if config.scene.path == RANDOM_SCENE:
        spec = random_scene_spec(config.run.seed, grid_from_config(config), config.scene.num_classes)
    else:
        spec = load_scene_spec(resolve_input_file(config.scene.path))
    return build_scene(spec)


def make_trajectory(config: RunConfig) -> list[RigidPose]:
    """True poses, current first; frame i sits i steps behind the current camera."""
    traj = config.trajectory
    position = np.array(traj.position)
    step = np.array(traj.step)
    return [
        look_from(position - i * step, math.radians(traj.yaw - i * traj.yaw_step))
        for i in range(config.run.frames)
    ]


def believed_poses(config: RunConfig, poses: list[RigidPose]) -> list[RigidPose]:
    """Poses handed to the pipeline: historical ones jittered by the configured noise."""
    traj = config.trajectory
    if traj.rotation_noise <= 0 and traj.translation_noise <= 0:
        return list(poses)
    rng = np.random.default_rng(config.run.seed + POSE_NOISE_STREAM)
    jittered = [poses[0]]
    for pose in poses[1:]:
        jittered.append(perturb_pose(pose, traj.rotation_noise, traj.translation_noise, rng))
    return jittered


#temporal branch
def _context_kernels(config: RunConfig, channels: int) -> list[Conv3DKernel]:
    groups = config.alignment.groups if config.ablation.multigroup else 1
    dilations = GROUP_DILATIONS[groups]
    if config.alignment.kernels == "identity":
        return identity_kernels(channels, dilations)
    return context_kernels(
        channels,
        channels,
        dilations,
        seed=config.run.seed + KERNEL_STREAM,
        noise=config.alignment.kernel_noise,
    )


def _refine_params(config: RunConfig, channels: int) -> RefineParams:
    if config.refine.params:
        return load_refine_params(resolve_input_file(config.refine.params))
    if not config.ablation.adr:
        return RefineParams(levels=(TapSet.identity(),), reducer=temporal_reducer(channels, 1))
    return RefineParams.seeded(
        2 * channels,
        levels=config.refine.levels,
        window=config.refine.window,
        seed=config.run.seed + TAP_STREAM,
        deformable=config.ablation.deformable,
        reducer=temporal_reducer(channels, config.refine.levels),
    )


def _cost_lift(observations: list[FrameObservation], hyps: DepthHypothesisSet, match: str) -> np.ndarray:
    """Current features lifted by the matching-score distribution of the cost volume."""
    cost = build_cost_volume(observations, hyps, match).mean(axis=0)
    scores = -cost if match == "absdiff" else cost
    scale = float(np.abs(scores).max()) or 1.0
    distribution = softmax(scores / scale * hyps.count, axis=0)
    feature = observations[0].feature.values
    return feature[:, None] * distribution[None]


@dataclass(frozen=True, eq=False)
class TemporalBranch:
    refined: np.ndarray
    affinity: PatternAffinity | None
    plain_affinity: PatternAffinity | None


def temporal_branch(
    config: RunConfig,
    observations: list[FrameObservation],
    hyps: DepthHypothesisSet,
    timer: StageTimer,
) -> TemporalBranch:
    flags = config.ablation
    channels = observations[0].feature.channels
    if flags.pose_shuffle:
        observations = shuffle_poses(observations, np.random.default_rng(config.run.seed + SHUFFLE_STREAM))
    if flags.cost_volume_mode:
        with timer.stage("tvc"):
            return TemporalBranch(_cost_lift(observations, hyps, config.alignment.match), None, None)

    with timer.stage("tvc"):
        if flags.warp:
            vtem: TemporalFeatureVolume = build_temporal_volume(observations, hyps)
        else:
            vtem = stack_historical(observations, hyps)

    extents = vtem.values.shape[1:]
    affinity = plain = None
    with timer.stage("cpa"):
        if flags.cpa:
            kernels = _context_kernels(config, channels)
            affinity = temporal_affinity(vtem, kernels, isolate=flags.scale_isolation)
            if config.export.heatmaps:
                plain = temporal_affinity(vtem, kernels, isolate=False)
        gating = affinity if affinity is not None else PatternAffinity.constant(1.0, 1, extents)

    with timer.stage("adr"):
        params = _refine_params(config, channels)
        refined = multilevel_refine(
            vtem,
            gating,
            params,
            cascade=flags.cascade,
            use_affinity=flags.affinity_weights,
        )
    return TemporalBranch(refined.values, affinity, plain)


#run
def run_pipeline(config: RunConfig, run_id: str = "run") -> RunArtifacts:
    """Forward pass of one configured run; deterministic given the config."""
    set_num_threads(config.run.threads)
    flags = config.ablation
    timer = StageTimer()

    with timer.stage("scene"):
        grid = grid_from_config(config)
        hyps = hypotheses_from_config(config)
        K = intrinsics_from_config(config)
        scene = load_scene(config)
        height, width = config.camera.height, config.camera.width
        poses = make_trajectory(config)
        frames = frames_for_trajectory(scene, K, poses, height, width)
        current = frames[0]
        fd = depth_logits(
            current.depth,
            hyps,
            config.oracle.sharpness,
            config.oracle.noise,
            np.random.default_rng(config.run.seed + ORACLE_STREAM),
        )
        fc: ContextFeature = current.feature

    with timer.stage("gcl"):
        if flags.gcl_confidence:
            vvox = lift_to_voxel_volume(fc, fd, depth_confidence(fd))
        else:
            vvox = plain_lift(fc, fd)

    with timer.stage("pool"):
        pooled_vox = voxel_pool(vvox.values, hyps, K, current.pose, grid, config.compose.pool_reduce)
    dropped = pooled_vox.dropped
    dropped_mass = float(np.sum(pooled_vox.dropped_mass))

    affinity = plain = None
    blocks = 1
    if flags.temporal:
        observations = [
            FrameObservation(feature=frame.feature, intrinsics=K, pose=pose, index=i)
            for i, (frame, pose) in enumerate(zip(frames, believed_poses(config, poses)))
        ]
        branch = temporal_branch(config, observations, hyps, timer)
        affinity, plain = branch.affinity, branch.plain_affinity
        with timer.stage("dhbt"):
            if flags.dhbt:
                pooled_tem = voxel_pool(branch.refined, hyps, K, current.pose, grid, config.compose.pool_reduce)
                dropped += pooled_tem.dropped
                dropped_mass += float(np.sum(pooled_tem.dropped_mass))
                composed = zero_gated_compose(pooled_tem.values, pooled_vox.values, config.compose.gate)
            else:
                composed = naive_concat_compose(pooled_vox.values, branch.refined)
                blocks = 2
    else:
        composed = ComposedVolume(values=pooled_vox.values)

    with timer.stage("head"):
        spec = scene.spec
        weights, bias = oracle_head_weights(spec.texture_channels, spec.num_classes, config.compose.threshold, blocks)
        logits, prediction = semantic_head(composed, weights, bias)
        ground_truth = voxelize_ground_truth(scene, grid)
        ignore = ~frustum_mask(grid, K, current.pose, height, width, (hyps.values[0], hyps.values[-1]))
        metrics = evaluate(prediction, ground_truth, ignore)
        class_weights = (
            class_frequency_weights(ground_truth, ignore)
            if config.compose.class_weighting == "frequency"
            else None
        )
        try:
            losses = total_loss(
                logits,
                ground_truth,
                vvox.distribution,
                hyps.depth_bins(current.depth),
                LossWeights(lambda_ce=config.compose.lambda_ce, class_weights=class_weights),
                ignore,
            )
            l_depth, l_ce, l_total = losses.l_depth, losses.l_ce, losses.total
        except UndefinedLossError:
            l_depth = l_ce = l_total = float("nan")

    report = RunReport(
        run_id=run_id,
        miou=metrics.miou,
        iou=metrics.iou,
        per_class_iou=metrics.per_class_iou,
        l_depth=l_depth,
        l_ce=l_ce,
        total_loss=l_total,
        dropped=dropped,
        dropped_mass=dropped_mass,
        timings=dict(timer.timings),
    )
    return RunArtifacts(
        report=report,
        prediction=prediction,
        ground_truth=ground_truth,
        ignore_mask=ignore,
        hypotheses=hyps,
        affinity=affinity,
        plain_affinity=plain,
        current_depth=current.depth,
    )
