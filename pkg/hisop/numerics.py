"""Dense-array substrate shared by every pipeline stage.

Volumes use the axis order [channel, depth, height, width] and maps use
[channel, height, width], always float64 and C-contiguous. Sample coordinates
follow the image convention: ``u``/``x`` runs along width, ``v``/``y`` along
height and ``z`` along depth.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
from scipy import special

from utils.common import (
    BORDER_CLAMP,
    BORDER_ZERO,
    BORDERS,
    GN_EPS,
    ArgumentError,
    ShapeError,
    as_dense,
    check_choice,
)

T = TypeVar("T")
R = TypeVar("R")

_NUM_THREADS = 1


#threading
def set_num_threads(count: int) -> None:
    """Set the worker count used for per-output-cell parallel work."""
    global _NUM_THREADS
    if count < 1:
        raise ArgumentError(f"Thread count must be >= 1, got {count}")
    _NUM_THREADS = int(count)


def get_num_threads() -> int:
    return _NUM_THREADS


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply fn to every item, returning results in input order.

    Each item must own a disjoint slice of the output, so the result does not
    depend on the worker count.
    """
    if _NUM_THREADS == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=_NUM_THREADS) as pool:
        return list(pool.map(fn, items))


#kernels
@dataclass(frozen=True, eq=False)
class Conv3DKernel:
    """Weights [out_ch, in_ch, k, k, k] of a same-padded dilated 3D convolution."""

    weights: np.ndarray
    dilation: int = 1
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        weights = as_dense(self.weights, rank=5, name="kernel weights")
        k = weights.shape[2]
        if weights.shape[3] != k or weights.shape[4] != k:
            raise ShapeError(f"Kernel support must be cubic, got shape {weights.shape}")
        if k % 2 == 0:
            raise ShapeError(f"Kernel support must be odd, got {k}")
        if self.dilation < 1:
            raise ArgumentError(f"Dilation must be a positive integer, got {self.dilation}")
        object.__setattr__(self, "weights", weights)
        if self.bias is not None:
            bias = as_dense(self.bias, rank=1, name="kernel bias")
            if bias.shape[0] != weights.shape[0]:
                raise ShapeError(
                    f"Expected {weights.shape[0]} bias values, got {bias.shape[0]}"
                )
            object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def identity(cls, channels: int, dilation: int = 1, size: int = 3) -> "Conv3DKernel":
        """Kernel whose center tap copies each input channel to itself."""
        weights = np.zeros((channels, channels, size, size, size))
        center = size // 2
        weights[np.arange(channels), np.arange(channels), center, center, center] = 1.0
        return cls(weights=weights, dilation=dilation)


#elementwise
def softmax(values: np.ndarray, axis: int) -> np.ndarray:
    """Numerically stable softmax along one axis (max-subtracted)."""
    values = as_dense(values)
    if not -values.ndim <= axis < values.ndim:
        raise ShapeError(f"Softmax axis {axis} out of range for shape {values.shape}")
    if values.shape[axis] < 1:
        raise ShapeError(f"Softmax axis {axis} has zero extent in shape {values.shape}")
    return special.softmax(values, axis=axis)


def gelu(values: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    values = as_dense(values)
    return 0.5 * values * (1.0 + special.erf(values / math.sqrt(2.0)))


def group_norm(volume: np.ndarray, groups: int = 4, eps: float = GN_EPS) -> np.ndarray:
    """Group normalization of a [C, ...] volume without affine parameters.

    Channels are split into ``gcd(C, groups)`` contiguous groups; each group is
    normalized over its channels and all spatial positions. An all-constant
    group maps to zeros.
    """
    volume = as_dense(volume)
    channels = volume.shape[0]
    count = math.gcd(channels, groups)
    grouped = volume.reshape(count, channels // count, -1)
    mean = grouped.mean(axis=(1, 2), keepdims=True)
    var = grouped.var(axis=(1, 2), keepdims=True)
    return ((grouped - mean) / np.sqrt(var + eps)).reshape(volume.shape)


#resampling
def _sanitize(coords: Sequence[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
    arrays = np.broadcast_arrays(*[np.asarray(c, dtype=np.float64) for c in coords])
    finite = np.ones(arrays[0].shape, dtype=bool)
    for array in arrays:
        finite &= np.isfinite(array)
    cleaned = [np.where(finite, array, -2.0) for array in arrays]
    return cleaned, finite


def bilinear_sample_grid(
    feature_map: np.ndarray,
    us: np.ndarray,
    vs: np.ndarray,
    border: str = BORDER_ZERO,
) -> np.ndarray:
    """Sample a [C, H, W] map at many (u, v) positions.

    Returns an array of shape [C, *us.shape]. Non-finite coordinates sample
    zero under both border policies.
    """
    feature_map = as_dense(feature_map, rank=3, name="feature map")
    check_choice(border, BORDERS, "border policy")
    _, height, width = feature_map.shape
    (us, vs), finite = _sanitize([us, vs])
    if border == BORDER_CLAMP:
        us = np.clip(us, 0.0, width - 1)
        vs = np.clip(vs, 0.0, height - 1)

    x0 = np.floor(us).astype(np.int64)
    y0 = np.floor(vs).astype(np.int64)
    wx = us - x0
    wy = vs - y0

    out = np.zeros((feature_map.shape[0],) + us.shape)
    for dx, dy, weight in (
        (0, 0, (1.0 - wx) * (1.0 - wy)),
        (1, 0, wx * (1.0 - wy)),
        (0, 1, (1.0 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height) & finite
        values = feature_map[:, np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)]
        out += np.where(inside, weight, 0.0) * values
    return out


def bilinear_sample(
    feature_map: np.ndarray, u: float, v: float, border: str = BORDER_ZERO
) -> np.ndarray:
    """Sample a [C, H, W] map at one continuous pixel position (u = column, v = row)."""
    return bilinear_sample_grid(feature_map, np.asarray(u), np.asarray(v), border)


def trilinear_sample_grid(
    volume: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    zs: np.ndarray,
    border: str = BORDER_ZERO,
) -> np.ndarray:
    """Sample a [C, D, H, W] volume at many (x, y, z) positions.

    x indexes width, y height and z depth. Returns [C, *xs.shape].
    """
    volume = as_dense(volume, rank=4, name="volume")
    check_choice(border, BORDERS, "border policy")
    _, depth, height, width = volume.shape
    (xs, ys, zs), finite = _sanitize([xs, ys, zs])
    if border == BORDER_CLAMP:
        xs = np.clip(xs, 0.0, width - 1)
        ys = np.clip(ys, 0.0, height - 1)
        zs = np.clip(zs, 0.0, depth - 1)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    z0 = np.floor(zs).astype(np.int64)
    fx, fy, fz = xs - x0, ys - y0, zs - z0

    out = np.zeros((volume.shape[0],) + xs.shape)
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        zi = z0 + dz
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            yi = y0 + dy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                xi = x0 + dx
                inside = (
                    (xi >= 0) & (xi < width)
                    & (yi >= 0) & (yi < height)
                    & (zi >= 0) & (zi < depth)
                    & finite
                )
                values = volume[
                    :,
                    np.clip(zi, 0, depth - 1),
                    np.clip(yi, 0, height - 1),
                    np.clip(xi, 0, width - 1),
                ]
                out += np.where(inside, wz * wy * wx, 0.0) * values
    return out


def trilinear_sample(
    volume: np.ndarray, x: float, y: float, z: float, border: str = BORDER_ZERO
) -> np.ndarray:
    """Sample a [C, D, H, W] volume at one continuous position."""
    return trilinear_sample_grid(volume, np.asarray(x), np.asarray(y), np.asarray(z), border)


def shift_volume(volume: np.ndarray, dz: int, dy: int, dx: int) -> np.ndarray:
    """out[..., d, h, w] = volume[..., d + dz, h + dy, w + dx], zero outside."""
    out = np.zeros_like(volume)
    *_, depth, height, width = volume.shape

    def span(offset: int, extent: int) -> tuple[slice, slice]:
        lo = max(0, -offset)
        hi = min(extent, extent - offset)
        if hi <= lo:
            return slice(0, 0), slice(0, 0)
        return slice(lo, hi), slice(lo + offset, hi + offset)

    (od, sd), (oh, sh), (ow, sw) = span(dz, depth), span(dy, height), span(dx, width)
    out[..., od, oh, ow] = volume[..., sd, sh, sw]
    return out


def shifted_trilinear(volume: np.ndarray, dz: float, dy: float, dx: float) -> np.ndarray:
    """Sample every lattice point p of a [..., D, H, W] volume at p + (dz, dy, dx).

    Equivalent to trilinear_sample_grid with zero border when the offset is
    shared by all positions, computed as a blend of integer shifts.
    """
    volume = as_dense(volume)
    iz, iy, ix = math.floor(dz), math.floor(dy), math.floor(dx)
    fz, fy, fx = dz - iz, dy - iy, dx - ix
    out = np.zeros_like(volume)
    for cz in (0, 1):
        wz = fz if cz else 1.0 - fz
        for cy in (0, 1):
            wy = fy if cy else 1.0 - fy
            for cx in (0, 1):
                wx = fx if cx else 1.0 - fx
                weight = wz * wy * wx
                if weight == 0.0:
                    continue
                out += weight * shift_volume(volume, iz + cz, iy + cy, ix + cx)
    return out


#reduction
@dataclass(frozen=True, eq=False)
class ScatterResult:
    values: np.ndarray
    dropped: int
    dropped_mass: np.ndarray


def scatter_add(size: int, indices: np.ndarray, values: np.ndarray) -> ScatterResult:
    """Sum values into ``size`` cells by index, in input order.

    values may be [N] or [N, C]; the output is [size] or [size, C]. Indices
    outside [0, size) are dropped; their count and summed mass are reported.
    Accumulation is sequential in input order, so repeated calls are bitwise
    equal.
    """
    if size < 0:
        raise ArgumentError(f"Scatter size must be >= 0, got {size}")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    values = as_dense(values)
    if values.shape[:1] != indices.shape:
        raise ShapeError(
            f"Expected {indices.shape[0]} values to match indices, got shape {values.shape}"
        )
    keep = (indices >= 0) & (indices < size)
    out = np.zeros((size,) + values.shape[1:])
    np.add.at(out, indices[keep], values[keep])
    dropped_mass = values[~keep].sum(axis=0) if values.ndim > 1 else np.asarray(values[~keep].sum())
    return ScatterResult(values=out, dropped=int((~keep).sum()), dropped_mass=dropped_mass)


#convolution
def dilated_conv3d(volume: np.ndarray, kernel: Conv3DKernel) -> np.ndarray:
    """Same-padded (zeros) dilated 3D convolution of a [C, D, H, W] volume.

    Taps are spaced ``kernel.dilation`` voxels apart; output spatial extents
    equal the input's. Work is split across output channels when more than one
    thread is configured.
    """
    volume = as_dense(volume, rank=4, name="volume")
    if kernel.in_channels != volume.shape[0]:
        raise ShapeError(
            f"Kernel expects {kernel.in_channels} input channels, volume has {volume.shape[0]}"
        )
    _, depth, height, width = volume.shape
    dil, k = kernel.dilation, kernel.size
    pad = dil * (k // 2)
    padded = np.pad(volume, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))

    def convolve(rows: np.ndarray) -> np.ndarray:
        out = np.zeros((rows.size, depth, height, width))
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    window = padded[
                        :,
                        a * dil : a * dil + depth,
                        b * dil : b * dil + height,
                        c * dil : c * dil + width,
                    ]
                    out += np.tensordot(kernel.weights[rows, :, a, b, c], window, axes=(1, 0))
        if kernel.bias is not None:
            out += kernel.bias[rows, None, None, None]
        return out

    chunks = np.array_split(np.arange(kernel.out_channels), min(_NUM_THREADS, kernel.out_channels))
    return np.concatenate(parallel_map(convolve, [c for c in chunks if c.size]), axis=0)
