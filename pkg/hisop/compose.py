"""Unified-grid composition, semantic head, losses and occupancy metrics.

Grid axes: index i runs along world x, j along world y and k along world z,
so a grid volume is [C, Hg, Wg, Zg] with Hg <-> x, Wg <-> y, Zg <-> z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Final

import numpy as np

from hisop.geometry import DepthHypothesisSet, Intrinsics, RigidPose, backproject_grid
from hisop.numerics import scatter_add, softmax
from utils.common import (
    EMPTY_CLASS,
    IGNORE_LABEL,
    LOG_EPS,
    ArgumentError,
    ShapeError,
    UndefinedLossError,
    as_dense,
    check_choice,
    ensure_shape,
)

REDUCE_SUM: Final[str] = "sum"
REDUCE_MEAN: Final[str] = "mean"
REDUCTIONS: Final[tuple[str, ...]] = (REDUCE_SUM, REDUCE_MEAN)

#inverse-log-frequency offset for class weights
FREQUENCY_OFFSET: Final[float] = 1.02


@dataclass(frozen=True, eq=False)
class UnifiedGridSpec:
    """World-aligned voxel grid: extents (Hg, Wg, Zg), cubic voxel size (m), origin of cell (0, 0, 0)."""

    extents: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        extents = tuple(int(e) for e in self.extents)
        if len(extents) != 3 or min(extents) < 1:
            raise ArgumentError(f"Grid extents must be three positive integers, got {self.extents}")
        if not self.voxel_size > 0:
            raise ArgumentError(f"Voxel size must be positive, got {self.voxel_size}")
        origin = as_dense(self.origin, rank=1, name="grid origin")
        ensure_shape(origin, (3,), "grid origin")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return int(np.prod(self.extents))

    def centers(self) -> np.ndarray:
        """World coordinates of every voxel center, [Hg, Wg, Zg, 3]."""
        axes = [np.arange(n, dtype=np.float64) for n in self.extents]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return self.origin + (grid + 0.5) * self.voxel_size

    def cell_indices(self, points: np.ndarray) -> np.ndarray:
        """Flat cell index of each [..., 3] world point; -1 outside the grid."""
        cells = np.floor((np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size)
        extents = np.array(self.extents)
        inside = np.all((cells >= 0) & (cells < extents), axis=-1)
        cells = np.where(inside[..., None], cells, 0).astype(np.int64)
        flat = (cells[..., 0] * extents[1] + cells[..., 1]) * extents[2] + cells[..., 2]
        return np.where(inside, flat, -1)


@dataclass(frozen=True, eq=False)
class PoolResult:
    values: np.ndarray
    dropped: int
    dropped_mass: np.ndarray


@dataclass(frozen=True, eq=False)
class ComposedVolume:
    values: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError("Composed volume contains non-finite values")


@dataclass(frozen=True, eq=False)
class SemanticVoxelGrid:
    """Integer labels [Hg, Wg, Zg] in [0, num_classes]; 0 is empty space, 255 is ignored."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeError(f"Expected labels of rank 3, got shape {labels.shape}")
        known = labels[labels != IGNORE_LABEL]
        if known.size and (known.min() < 0 or known.max() > self.num_classes):
            raise ArgumentError(
                f"Labels must lie in [0, {self.num_classes}], got range [{known.min()}, {known.max()}]"
            )
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.lambda_ce < 0:
            raise ArgumentError(f"lambda_ce must be >= 0, got {self.lambda_ce}")
        if self.class_weights is not None and min(self.class_weights) < 0:
            raise ArgumentError(f"Class weights must be >= 0, got {self.class_weights}")


@dataclass(frozen=True)
class LossReport:
    total: float
    l_depth: float
    l_ce: float


@dataclass(frozen=True)
class Metrics:
    iou: float
    per_class_iou: tuple[float, ...]
    miou: float


#pooling
def voxel_pool(
    vol: np.ndarray,
    hyps: DepthHypothesisSet,
    K: Intrinsics,
    pose: RigidPose,
    grid: UnifiedGridSpec,
    reduce: str = REDUCE_SUM,
) -> PoolResult:
    """Scatter every (pixel, hypothesis) feature into the unified grid.

    Cells are visited pixel-major, then hypothesis. With reduce="mean" each
    cell holds the average of the samples it received instead of their sum.

    Args:
        vol: Frustum volume [C, D, H, W]
        hyps: Depth hypotheses along D
        K: Intrinsics of the frustum camera
        pose: World-to-camera pose of the frustum camera
        grid: Target grid
        reduce: "sum" or "mean"

    Returns:
        PoolResult: Grid volume [C, Hg, Wg, Zg] with the dropped sample count and mass
    """
    vol = as_dense(vol, rank=4, name="frustum volume")
    check_choice(reduce, REDUCTIONS, "pool reduction")
    channels, depth, height, width = vol.shape
    if depth != hyps.count:
        raise ShapeError(f"Volume has {depth} depth slices, hypothesis set has {hyps.count}")

    points = backproject_grid(K, height, width, hyps.values).transpose(1, 2, 0, 3)
    world = pose.inverse().apply(points)
    indices = grid.cell_indices(world).reshape(-1)
    samples = vol.transpose(2, 3, 1, 0).reshape(-1, channels)

    scattered = scatter_add(grid.size, indices, samples)
    values = scattered.values
    if reduce == REDUCE_MEAN:
        counts = np.bincount(indices[indices >= 0], minlength=grid.size).astype(np.float64)
        values = values / np.maximum(counts, 1.0)[:, None]
    return PoolResult(
        values=values.T.reshape(channels, *grid.extents),
        dropped=scattered.dropped,
        dropped_mass=scattered.dropped_mass,
    )


def zero_gated_compose(pooled: np.ndarray, vvox_grid: np.ndarray, gate: np.ndarray | float) -> ComposedVolume:
    """V_com = gate * pooled + vvox_grid with a per-channel gate.

    Channels whose gate is exactly 0 are copied from vvox_grid unchanged.
    """
    pooled = as_dense(pooled, rank=4, name="pooled volume")
    vvox_grid = as_dense(vvox_grid, rank=4, name="geometric grid volume")
    if pooled.shape != vvox_grid.shape:
        raise ShapeError(f"Pooled shape {pooled.shape} differs from geometric shape {vvox_grid.shape}")
    gate = np.broadcast_to(np.asarray(gate, dtype=np.float64), (pooled.shape[0],))
    scale = gate[:, None, None, None]
    blended = scale * pooled + vvox_grid
    return ComposedVolume(values=np.where(scale == 0.0, vvox_grid, blended))


def naive_concat_compose(vvox_grid: np.ndarray, vtem: np.ndarray) -> ComposedVolume:
    """Channel concat of the geometric grid and the frustum volume resampled by index scaling.

    Grid x follows image width, grid y follows the hypothesis axis and grid z
    follows image rows bottom-up; no camera geometry is used.
    """
    vvox_grid = as_dense(vvox_grid, rank=4, name="geometric grid volume")
    vtem = as_dense(vtem, rank=4, name="temporal volume")
    _, hg, wg, zg = vvox_grid.shape
    _, depth, height, width = vtem.shape
    cols = np.minimum(((np.arange(hg) + 0.5) * width / hg).astype(np.int64), width - 1)
    slices = np.minimum(((np.arange(wg) + 0.5) * depth / wg).astype(np.int64), depth - 1)
    rows = height - 1 - np.minimum(((np.arange(zg) + 0.5) * height / zg).astype(np.int64), height - 1)
    resampled = vtem[:, slices[None, :, None], rows[None, None, :], cols[:, None, None]]
    return ComposedVolume(values=np.concatenate([vvox_grid, resampled], axis=0))


def frustum_mask(
    grid: UnifiedGridSpec,
    K: Intrinsics,
    pose: RigidPose,
    height: int,
    width: int,
    depth_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """True for voxels whose centers project inside the image with positive depth.

    With depth_range set, the center's camera depth must also lie within it.
    """
    cam = pose.apply(grid.centers())
    z = cam[..., 2]
    safe = np.where(z > 0, z, 1.0)
    u = K.fx * cam[..., 0] / safe + K.cx
    v = K.fy * cam[..., 1] / safe + K.cy
    visible = (z > 0) & (u >= -0.5) & (u < width - 0.5) & (v >= -0.5) & (v < height - 0.5)
    if depth_range is not None:
        visible &= (z >= depth_range[0]) & (z <= depth_range[1])
    return visible


#head
def oracle_head_weights(
    texture_channels: int, num_classes: int, threshold: float, blocks: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Selector head over the class-embedding channels.

    Class c reads channel texture_channels + c - 1 of every block; the empty
    class is a constant logit equal to threshold.

    Returns:
        tuple: (weights [N+1, blocks * C], bias [N+1])
    """
    channels = texture_channels + num_classes
    weights = np.zeros((num_classes + 1, blocks * channels))
    for block in range(blocks):
        for cls in range(1, num_classes + 1):
            weights[cls, block * channels + texture_channels + cls - 1] = 1.0
    bias = np.zeros(num_classes + 1)
    bias[EMPTY_CLASS] = threshold
    return weights, bias


def semantic_head(
    vcom: ComposedVolume | np.ndarray,
    class_weights: np.ndarray,
    bias: np.ndarray | None = None,
) -> tuple[np.ndarray, SemanticVoxelGrid]:
    """Per-voxel linear map to N+1 logits; labels are the argmax, lowest index on ties."""
    values = vcom.values if isinstance(vcom, ComposedVolume) else as_dense(vcom, rank=4, name="composed volume")
    class_weights = as_dense(class_weights, rank=2, name="head weights")
    if class_weights.shape[1] != values.shape[0]:
        raise ShapeError(
            f"Head expects {class_weights.shape[1]} channels, composed volume has {values.shape[0]}"
        )
    logits = np.tensordot(class_weights, values, axes=(1, 0))
    if bias is not None:
        logits = logits + as_dense(bias, rank=1, name="head bias")[:, None, None, None]
    labels = np.argmax(logits, axis=0)
    return logits, SemanticVoxelGrid(labels=labels, num_classes=class_weights.shape[0] - 1)


#losses
def class_frequency_weights(
    gt: SemanticVoxelGrid, ignore_mask: np.ndarray | None = None
) -> tuple[float, ...]:
    """Inverse-log-frequency weight 1 / ln(1.02 + f_c) per class over the supervised voxels."""
    labels = gt.labels if ignore_mask is None else gt.labels[~ignore_mask]
    labels = labels[labels != IGNORE_LABEL]
    counts = np.bincount(labels.reshape(-1), minlength=gt.num_classes + 1)[: gt.num_classes + 1]
    freq = counts / max(int(counts.sum()), 1)
    return tuple(float(w) for w in 1.0 / np.log(FREQUENCY_OFFSET + freq))


def depth_bce(depth_dist: np.ndarray, gt_depth_bins: np.ndarray) -> float:
    """Binary cross-entropy against one-hot bins, summed over D, averaged over supervised pixels.

    Raises:
        UndefinedLossError: If no pixel has a valid bin (>= 0)
    """
    depth_dist = as_dense(depth_dist, rank=3, name="depth distribution")
    bins = np.asarray(gt_depth_bins, dtype=np.int64)
    ensure_shape(bins, depth_dist.shape[1:], "depth bins")
    supervised = bins >= 0
    if not supervised.any():
        raise UndefinedLossError("Depth loss has no supervised pixel")
    target = np.arange(depth_dist.shape[0])[:, None, None] == bins[None]
    p = depth_dist
    terms = np.where(target, -np.log(np.maximum(p, LOG_EPS)), -np.log(np.maximum(1.0 - p, LOG_EPS)))
    return float(terms.sum(axis=0)[supervised].mean())


def semantic_ce(
    logits: np.ndarray,
    gt: SemanticVoxelGrid,
    class_weights: tuple[float, ...] | None = None,
    ignore_mask: np.ndarray | None = None,
) -> float:
    """Class-weighted mean cross-entropy over non-ignored voxels.

    Raises:
        UndefinedLossError: If no voxel is supervised or every supervised weight is 0
    """
    logits = as_dense(logits, rank=4, name="logits")
    ensure_shape(logits, (gt.num_classes + 1, *gt.labels.shape), "logits")
    supervised = gt.labels != IGNORE_LABEL
    if ignore_mask is not None:
        supervised &= ~np.asarray(ignore_mask, dtype=bool)
    if not supervised.any():
        raise UndefinedLossError("Semantic loss has no supervised voxel")
    probs = softmax(logits, axis=0)
    labels = gt.labels[supervised]
    picked = probs.reshape(probs.shape[0], -1)[:, supervised.reshape(-1)][labels, np.arange(labels.size)]
    nll = -np.log(np.maximum(picked, LOG_EPS))
    weights = np.ones(gt.num_classes + 1) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    ensure_shape(weights, (gt.num_classes + 1,), "class weights")
    per_voxel = weights[labels]
    if per_voxel.sum() <= 0:
        raise UndefinedLossError("Semantic loss weights sum to zero over the supervised voxels")
    return float((per_voxel * nll).sum() / per_voxel.sum())


def total_loss(
    logits: np.ndarray,
    gt: SemanticVoxelGrid,
    depth_dist: np.ndarray,
    gt_depth_bins: np.ndarray,
    weights: LossWeights = LossWeights(),
    ignore_mask: np.ndarray | None = None,
) -> LossReport:
    """L = L_depth + lambda_ce * L_ce."""
    l_depth = depth_bce(depth_dist, gt_depth_bins)
    l_ce = semantic_ce(logits, gt, weights.class_weights, ignore_mask)
    return LossReport(total=l_depth + weights.lambda_ce * l_ce, l_depth=l_depth, l_ce=l_ce)


#metrics
def confusion_matrix(
    pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, ignore_mask: np.ndarray | None = None
) -> np.ndarray:
    """Counts [N+1, N+1] with gt on rows and prediction on columns."""
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError(f"Prediction extents {pred.labels.shape} differ from ground truth {gt.labels.shape}")
    size = max(pred.num_classes, gt.num_classes) + 1
    valid = (gt.labels != IGNORE_LABEL) & (pred.labels != IGNORE_LABEL)
    if ignore_mask is not None:
        valid &= ~np.asarray(ignore_mask, dtype=bool)
    flat = gt.labels[valid] * size + pred.labels[valid]
    return np.bincount(flat, minlength=size * size).reshape(size, size)


def evaluate(
    pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, ignore_mask: np.ndarray | None = None
) -> Metrics:
    """Occupancy IoU, per-class IoU (NaN for classes absent from both) and mIoU.

    mIoU averages the classes present in gt or pred; an empty union gives 1.0.
    """
    cm = confusion_matrix(pred, gt, ignore_mask)
    occupied_tp = cm[1:, 1:].sum()
    occupied_union = cm.sum() - cm[0, 0]
    iou = float(occupied_tp / occupied_union) if occupied_union else 1.0

    per_class = []
    for cls in range(1, gt.num_classes + 1):
        inter = cm[cls, cls]
        union = cm[cls, :].sum() + cm[:, cls].sum() - inter
        per_class.append(float(inter / union) if union else float("nan"))
    present = [v for v in per_class if not np.isnan(v)]
    miou = float(np.mean(present)) if present else 1.0
    return Metrics(iou=iou, per_class_iou=tuple(per_class), miou=miou)
