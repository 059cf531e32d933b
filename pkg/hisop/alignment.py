"""Cross-frame pattern affinity and affinity-gated deformable refinement.

Both temporal blocks pass through the same multi-group dilated context
kernels and share their normalization statistics. Per voxel and group, the
affinity is the centered cosine between the current and historical context
vectors along the channel axis. Refinement gathers the temporal volume at
offset taps, gates every tap by the affinity at the tap location, and stacks
several such levels before a 1x1x1 reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Sequence

import numpy as np

from hisop.numerics import (
    BORDER_CLAMP,
    Conv3DKernel,
    dilated_conv3d,
    gelu,
    group_norm,
    parallel_map,
    shifted_trilinear,
    trilinear_sample_grid,
)
from hisop.temporal import TemporalFeatureVolume
from utils.common import AFFINITY_EPS, ArgumentError, FormatError, ShapeError, as_dense, ensure_shape
from utils.formats import decode_params, encode_params

GROUP_DILATIONS: Final[dict[int, tuple[int, ...]]] = {
    1: (1,),
    3: (1, 2, 4),
    5: (1, 2, 4, 8, 16),
}
LEVEL_COUNTS: Final[tuple[int, ...]] = (1, 3, 5)
GN_GROUPS: Final[int] = 4
DEFAULT_WINDOW: Final[int] = 3
MAX_DELTA: Final[float] = 0.5


@dataclass(frozen=True, eq=False)
class GroupContext:
    """One [C, D, H, W] context volume per dilation rate."""

    groups: tuple[np.ndarray, ...]
    dilations: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.groups) != len(self.dilations) or not self.groups:
            raise ShapeError(
                f"Expected one volume per dilation, got {len(self.groups)} volumes for {self.dilations}"
            )

    @property
    def count(self) -> int:
        return len(self.groups)


@dataclass(frozen=True, eq=False)
class PatternAffinity:
    """Per-group affinity [G, D, H, W] with entries in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", as_dense(self.values, rank=4, name="affinity"))

    @property
    def group_count(self) -> int:
        return self.values.shape[0]

    @classmethod
    def constant(cls, value: float, groups: int, extents: tuple[int, int, int]) -> "PatternAffinity":
        return cls(values=np.full((groups, *extents), float(value)))


@dataclass(frozen=True, eq=False)
class TapSet:
    """Deformable taps of one refinement level.

    base: integer window offsets [K, 3] as (dz, dy, dx).
    deltas: fractional offsets, shared [K, 3] or per voxel [K, 3, D, H, W].
    weights: spatial weights [K].
    """

    base: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        base = np.asarray(self.base, dtype=np.int64)
        deltas = as_dense(self.deltas, name="tap deltas")
        weights = as_dense(self.weights, rank=1, name="tap weights")
        if base.ndim != 2 or base.shape[1] != 3:
            raise ShapeError(f"Expected tap offsets of shape [K, 3], got {base.shape}")
        count = base.shape[0]
        if deltas.ndim not in (2, 5) or deltas.shape[:2] != (count, 3):
            raise ShapeError(f"Expected tap deltas [K, 3] or [K, 3, D, H, W], got {deltas.shape}")
        ensure_shape(weights, (count,), "tap weights")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.base.shape[0]

    @property
    def shared(self) -> bool:
        return self.deltas.ndim == 2

    @classmethod
    def identity(cls) -> "TapSet":
        """Single center tap with zero offset and unit weight."""
        return cls(base=np.zeros((1, 3), dtype=np.int64), deltas=np.zeros((1, 3)), weights=np.ones(1))

    @classmethod
    def window(
        cls, size: int = DEFAULT_WINDOW, seed: int = 0, deformable: bool = True
    ) -> "TapSet":
        """A size^3 window with seeded offsets in [-0.5, 0.5] and positive weights summing to 1.

        The center tap carries the largest weight.
        """
        if size < 1 or size % 2 == 0:
            raise ArgumentError(f"Tap window size must be a positive odd integer, got {size}")
        half = size // 2
        span = np.arange(-half, half + 1)
        base = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)
        rng = np.random.default_rng(seed)
        deltas = rng.uniform(-MAX_DELTA, MAX_DELTA, size=base.shape)
        if not deformable:
            deltas = np.zeros(base.shape)
        distance = np.abs(base).sum(axis=1)
        raw = np.exp(-distance.astype(np.float64)) * rng.uniform(0.5, 1.0, size=base.shape[0])
        return cls(base=base, deltas=deltas, weights=raw / raw.sum())

    def without_deltas(self) -> "TapSet":
        return TapSet(base=self.base, deltas=np.zeros((self.count, 3)), weights=self.weights)


@dataclass(frozen=True, eq=False)
class RefineParams:
    """Tap sets of every level and the reducer W [C_out, L * C_in]."""

    levels: tuple[TapSet, ...]
    reducer: np.ndarray

    def __post_init__(self) -> None:
        if len(self.levels) not in LEVEL_COUNTS:
            raise ArgumentError(f"Level count must be one of {list(LEVEL_COUNTS)}, got {len(self.levels)}")
        reducer = as_dense(self.reducer, rank=2, name="reducer")
        if reducer.shape[1] % len(self.levels):
            raise ShapeError(
                f"Reducer input extent {reducer.shape[1]} is not a multiple of {len(self.levels)} levels"
            )
        object.__setattr__(self, "reducer", reducer)

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def in_channels(self) -> int:
        return self.reducer.shape[1] // self.level_count

    @classmethod
    def identity(cls, channels: int, levels: int = 3) -> "RefineParams":
        return cls(levels=tuple(TapSet.identity() for _ in range(levels)), reducer=mean_reducer(channels, levels))

    @classmethod
    def seeded(
        cls,
        channels: int,
        levels: int = 3,
        window: int = DEFAULT_WINDOW,
        seed: int = 0,
        deformable: bool = True,
        reducer: np.ndarray | None = None,
    ) -> "RefineParams":
        taps = tuple(TapSet.window(window, seed=seed + level, deformable=deformable) for level in range(levels))
        return cls(levels=taps, reducer=mean_reducer(channels, levels) if reducer is None else reducer)


#parameters
def mean_reducer(channels: int, levels: int) -> np.ndarray:
    """W mapping L stacked copies of C channels back to C by averaging the levels."""
    reducer = np.zeros((channels, levels * channels))
    for level in range(levels):
        reducer[np.arange(channels), level * channels + np.arange(channels)] = 1.0 / levels
    return reducer


def temporal_reducer(channels: int, levels: int) -> np.ndarray:
    """W mapping L stacked [current; historical] blocks (2C each) to C channels.

    Output channel c averages channel c of both blocks over every level.
    """
    reducer = np.zeros((channels, levels * 2 * channels))
    rows = np.arange(channels)
    for level in range(levels):
        start = level * 2 * channels
        reducer[rows, start + rows] = 0.5 / levels
        reducer[rows, start + channels + rows] = 0.5 / levels
    return reducer


def context_kernels(
    in_channels: int,
    out_channels: int,
    dilations: Sequence[int] = GROUP_DILATIONS[3],
    seed: int = 0,
    noise: float = 0.1,
) -> list[Conv3DKernel]:
    """Seeded 3x3x3 kernels, one per dilation.

    Each output channel averages its input channel over the dilated
    neighbourhood; the noise is relative to one tap of that average.
    """
    rng = np.random.default_rng(seed)
    kernels = []
    for dilation in dilations:
        tap = 1.0 / 27
        weights = rng.normal(0.0, noise * tap / math.sqrt(in_channels), size=(out_channels, in_channels, 3, 3, 3))
        diagonal = np.arange(min(in_channels, out_channels))
        weights[diagonal, diagonal] += tap
        kernels.append(Conv3DKernel(weights=weights, dilation=int(dilation)))
    return kernels


def identity_kernels(channels: int, dilations: Sequence[int] = GROUP_DILATIONS[3]) -> list[Conv3DKernel]:
    return [Conv3DKernel.identity(channels, dilation=int(d)) for d in dilations]


#affinity
def _check_kernels(vol: np.ndarray, kernels: Sequence[Conv3DKernel]) -> np.ndarray:
    vol = as_dense(vol, rank=4, name="volume")
    if not kernels:
        raise ArgumentError("At least one context kernel is required")
    for kernel in kernels:
        if kernel.in_channels != vol.shape[0]:
            raise ShapeError(
                f"Kernel with dilation {kernel.dilation} expects {kernel.in_channels} channels, volume has {vol.shape[0]}"
            )
    return vol


def multigroup_context(vol: np.ndarray, kernels: Sequence[Conv3DKernel]) -> GroupContext:
    """GN(GELU(conv_i(vol))) for every kernel, all from the same input."""
    vol = _check_kernels(vol, kernels)
    groups = tuple(group_norm(gelu(dilated_conv3d(vol, kernel)), groups=GN_GROUPS) for kernel in kernels)
    return GroupContext(groups=groups, dilations=tuple(k.dilation for k in kernels))


def paired_context(
    cur: np.ndarray, his: np.ndarray, kernels: Sequence[Conv3DKernel]
) -> tuple[GroupContext, GroupContext]:
    """Contexts of both temporal blocks, group-normalized with statistics shared by the pair.

    Identical blocks give identical contexts, so their affinity is 1 wherever
    the context is not constant across channels.
    """
    cur = _check_kernels(cur, kernels)
    his = _check_kernels(his, kernels)
    if cur.shape != his.shape:
        raise ShapeError(f"Block shapes differ: current {cur.shape}, historical {his.shape}")
    cur_groups, his_groups = [], []
    for kernel in kernels:
        pair = np.stack([gelu(dilated_conv3d(cur, kernel)), gelu(dilated_conv3d(his, kernel))], axis=1)
        normalized = group_norm(pair, groups=GN_GROUPS)
        cur_groups.append(normalized[:, 0])
        his_groups.append(normalized[:, 1])
    dilations = tuple(k.dilation for k in kernels)
    return GroupContext(groups=tuple(cur_groups), dilations=dilations), GroupContext(
        groups=tuple(his_groups), dilations=dilations
    )


def _channel_cosine(a: np.ndarray, b: np.ndarray, isolate: bool) -> np.ndarray:
    if isolate:
        a = a - a.mean(axis=0, keepdims=True)
        b = b - b.mean(axis=0, keepdims=True)
    norm_a = np.sqrt((a * a).sum(axis=0))
    norm_b = np.sqrt((b * b).sum(axis=0))
    dot = (a * b).sum(axis=0)
    degenerate = (norm_a <= AFFINITY_EPS) | (norm_b <= AFFINITY_EPS)
    denom = np.where(degenerate, 1.0, norm_a * norm_b)
    return np.clip(np.where(degenerate, 0.0, dot / denom), -1.0, 1.0)


def pattern_affinity(cur: GroupContext, his: GroupContext, isolate: bool = True) -> PatternAffinity:
    """Per-voxel, per-group centered cosine over channels between current and historical contexts.

    With isolate off the mean is not subtracted (plain cosine similarity).
    Vectors with norm below the affinity epsilon give 0.
    """
    if cur.count != his.count:
        raise ShapeError(f"Group counts differ: current {cur.count}, historical {his.count}")
    values = []
    for i, (c, h) in enumerate(zip(cur.groups, his.groups)):
        if c.shape != h.shape:
            raise ShapeError(f"Group {i} shapes differ: {c.shape} vs {h.shape}")
        values.append(_channel_cosine(c, h, isolate))
    return PatternAffinity(values=np.stack(values, axis=0))


def temporal_affinity(
    vtem: TemporalFeatureVolume, kernels: Sequence[Conv3DKernel], isolate: bool = True
) -> PatternAffinity:
    """Affinity between the two blocks of V_tem using paired contexts.

    Voxels where either block is all zero (nothing observed) get affinity 0.
    """
    cur, his = paired_context(vtem.current, vtem.historical, kernels)
    values = pattern_affinity(cur, his, isolate=isolate).values
    observed = np.any(vtem.current != 0.0, axis=0) & np.any(vtem.historical != 0.0, axis=0)
    return PatternAffinity(values=np.where(observed[None], values, 0.0))


#refinement
def _check_level(aff: PatternAffinity, level: int) -> int:
    if level < 1:
        raise ArgumentError(f"Refinement level must be >= 1, got {level}")
    return min(level, aff.group_count) - 1


def affinity_deformable_sample(
    vtem: TemporalFeatureVolume | np.ndarray,
    taps: TapSet,
    aff: PatternAffinity,
    level: int = 1,
    use_affinity: bool = True,
) -> np.ndarray:
    """V_def(p) = sum_k w_k * V(p + p_k + dp_k) * a_k.

    V is sampled with zero borders. a_k is the affinity of group ``level``
    (capped at the group count) sampled at the same displaced position with
    clamped borders, so taps leaving the volume are gated by the nearest edge
    affinity. With use_affinity off every a_k is 1.

    Returns:
        np.ndarray: Refined volume with the input's shape
    """
    values = vtem.values if isinstance(vtem, TemporalFeatureVolume) else as_dense(vtem, rank=4, name="volume")
    extents = values.shape[1:]
    if aff.values.shape[1:] != extents:
        raise ShapeError(f"Affinity extents {aff.values.shape[1:]} differ from volume extents {extents}")
    if not taps.shared and taps.deltas.shape[2:] != extents:
        raise ShapeError(f"Per-voxel tap deltas {taps.deltas.shape[2:]} differ from volume extents {extents}")
    group = aff.values[_check_level(aff, level)][None]
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extents), indexing="ij")

    def contribution(k: int) -> np.ndarray:
        zs, ys, xs = (axis + taps.base[k, i] + taps.deltas[k, i] for i, axis in enumerate(grid))
        if taps.shared:
            dz, dy, dx = (float(o) for o in taps.base[k] + taps.deltas[k])
            sampled = shifted_trilinear(values, dz, dy, dx)
        else:
            sampled = trilinear_sample_grid(values, xs, ys, zs)
        gate = trilinear_sample_grid(group, xs, ys, zs, border=BORDER_CLAMP) if use_affinity else None
        weighted = taps.weights[k] * sampled
        return weighted if gate is None else weighted * gate

    out = np.zeros_like(values)
    for part in parallel_map(contribution, list(range(taps.count))):
        out += part
    return out


@dataclass(frozen=True, eq=False)
class RefinedTemporalVolume:
    values: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError("Refined temporal volume contains non-finite values")


def multilevel_refine(
    vtem: TemporalFeatureVolume | np.ndarray,
    aff: PatternAffinity,
    params: RefineParams,
    cascade: bool = True,
    use_affinity: bool = True,
) -> RefinedTemporalVolume:
    """Stacked affinity-gated deformable levels reduced by a 1x1x1 convolution.

    In cascade mode level i consumes level i-1's output; otherwise every level
    consumes the input volume. Level outputs are concatenated on channels
    before the reducer.
    """
    values = vtem.values if isinstance(vtem, TemporalFeatureVolume) else as_dense(vtem, rank=4, name="volume")
    if params.in_channels != values.shape[0]:
        raise ShapeError(
            f"Reducer expects {params.in_channels} channels per level, volume has {values.shape[0]}"
        )
    outputs = []
    current = values
    for level, taps in enumerate(params.levels, start=1):
        source = current if cascade else values
        current = affinity_deformable_sample(source, taps, aff, level=level, use_affinity=use_affinity)
        outputs.append(current)
    stacked = np.concatenate(outputs, axis=0)
    return RefinedTemporalVolume(values=np.tensordot(params.reducer, stacked, axes=(1, 0)))


#parameter files
def refine_params_to_arrays(params: RefineParams) -> list[np.ndarray]:
    """Arrays in file order: (base, deltas, weights) per level, then the reducer."""
    arrays: list[np.ndarray] = []
    for taps in params.levels:
        arrays += [taps.base.astype(np.float64), taps.deltas, taps.weights]
    arrays.append(params.reducer)
    return arrays


def refine_params_from_arrays(arrays: Sequence[np.ndarray]) -> RefineParams:
    if len(arrays) < 4 or (len(arrays) - 1) % 3:
        raise FormatError(f"Expected 3 arrays per level plus a reducer, got {len(arrays)} arrays")
    levels = []
    for i in range(0, len(arrays) - 1, 3):
        base, deltas, weights = arrays[i : i + 3]
        if not np.array_equal(base, np.round(base)):
            raise FormatError(f"Tap offsets of level {i // 3 + 1} are not integers")
        levels.append(TapSet(base=np.round(base).astype(np.int64), deltas=deltas, weights=weights))
    return RefineParams(levels=tuple(levels), reducer=arrays[-1])


def save_refine_params(params: RefineParams, path: Path) -> int:
    data = encode_params(refine_params_to_arrays(params))
    Path(path).write_bytes(data)
    return len(data)


def load_refine_params(path: Path) -> RefineParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Refinement parameter file not found: {path}")
    return refine_params_from_arrays(decode_params(path.read_bytes()))
