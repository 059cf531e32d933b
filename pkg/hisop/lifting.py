"""Confidence-aware lifting of 2D context features into a frustum volume.

The depth feature F_d holds D depth-cost logits per pixel. Its softmax maximum
(winner-takes-all) is the per-pixel confidence C_d, which gates a linear
cross-attention between depth-aware queries and the context tokens. The
attention output re-sharpens each pixel's depth distribution before the outer
product with the context feature F_c produces V_vox.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hisop.numerics import softmax
from utils.common import ShapeError, as_dense, ensure_finite, ensure_shape


@dataclass(frozen=True, eq=False)
class DepthFeature:
    """Depth cost logits [D, H, W]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", as_dense(self.values, rank=3, name="depth feature"))

    @property
    def depth_count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class ContextFeature:
    """Context feature map [C, H, W]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = as_dense(self.values, rank=3, name="context feature")
        ensure_finite(values, "context feature")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def extents(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Per-pixel winner-takes-all depth probability [H, W], within [1/D, 1]."""

    values: np.ndarray


@dataclass(frozen=True, eq=False)
class VoxelFeatureVolume:
    """Lifted volume V_vox [C, D, H, W] and the depth distribution that built it."""

    values: np.ndarray
    distribution: np.ndarray


def depth_confidence(fd: DepthFeature) -> ConfidenceMap:
    """Softmax over the depth axis, then the maximum probability per pixel."""
    if fd.depth_count < 2:
        raise ShapeError(f"Depth confidence needs at least 2 hypotheses, got {fd.depth_count}")
    return ConfidenceMap(values=softmax(fd.values, axis=0).max(axis=0))


def linear_cross_attention(
    qd: np.ndarray, kc: np.ndarray, vc: np.ndarray, conf: np.ndarray
) -> np.ndarray:
    """Confidence-gated linear cross-attention.

    F_I = phi_q(Q) (phi_k(K)^T V) scaled row-wise by conf, where phi_q is a
    softmax over the channels of each query row and phi_k a softmax over the
    tokens of each key column.

    Args:
        qd: Queries [Nq, C]
        kc: Keys [Nk, C]
        vc: Values [Nk, C]
        conf: Per-query confidence [Nq]

    Returns:
        np.ndarray: Interacted feature [Nq, C]
    """
    qd = as_dense(qd, rank=2, name="queries")
    kc = as_dense(kc, rank=2, name="keys")
    vc = as_dense(vc, rank=2, name="values")
    conf = as_dense(conf, rank=1, name="confidence")
    channels = qd.shape[1]
    ensure_shape(kc, (None, channels), "keys")
    ensure_shape(vc, (kc.shape[0], channels), "values")
    ensure_shape(conf, (qd.shape[0],), "confidence")

    global_context = softmax(kc, axis=0).T @ vc
    return conf[:, None] * (softmax(qd, axis=1) @ global_context)


def _check_pair(fc: ContextFeature, fd: DepthFeature) -> None:
    if fc.extents != fd.values.shape[1:]:
        raise ShapeError(
            f"Context extents {fc.extents} do not match depth extents {fd.values.shape[1:]}"
        )


def depth_distribution(fc: ContextFeature, fd: DepthFeature, conf: ConfidenceMap) -> np.ndarray:
    """Per-pixel depth distribution [D, H, W] after confidence-gated interaction.

    Queries are one token per (depth, pixel), holding the pixel's context scaled
    by its depth probability; keys and values are the per-pixel context tokens.
    The interacted feature only modulates the sharpness of the depth logits:
    its mean absolute channel response s scales the max-centered logits by
    (1 + s). It never adds to them, so every pixel keeps its argmax and the
    result is invariant to constant logit shifts.
    """
    _check_pair(fc, fd)
    depth = fd.depth_count
    channels = fc.channels
    height, width = fc.extents
    ensure_shape(conf.values, (height, width), "confidence map")

    probability = softmax(fd.values, axis=0)
    tokens = fc.values.reshape(channels, -1).T
    queries = (probability.reshape(depth, 1, -1) * tokens.T[None]).transpose(0, 2, 1)
    queries = queries.reshape(-1, channels)
    token_conf = np.broadcast_to(conf.values.reshape(1, -1), (depth, height * width)).reshape(-1)

    interacted = linear_cross_attention(queries, tokens, tokens, token_conf)
    strength = np.abs(interacted).mean(axis=1).reshape(depth, height, width)
    centered = fd.values - fd.values.max(axis=0, keepdims=True)
    return softmax(centered * (1.0 + strength), axis=0)


def _outer(fc: ContextFeature, distribution: np.ndarray) -> VoxelFeatureVolume:
    values = fc.values[:, None, :, :] * distribution[None, :, :, :]
    return VoxelFeatureVolume(values=values, distribution=distribution)


def lift_to_voxel_volume(
    fc: ContextFeature, fd: DepthFeature, conf: ConfidenceMap
) -> VoxelFeatureVolume:
    """V_vox[c, d, h, w] = F_c[c, h, w] * dist[d, h, w] with the gated distribution."""
    return _outer(fc, depth_distribution(fc, fd, conf))


def plain_lift(fc: ContextFeature, fd: DepthFeature) -> VoxelFeatureVolume:
    """Typical lifting without confidence: dist = softmax over D of F_d."""
    _check_pair(fc, fd)
    return _outer(fc, softmax(fd.values, axis=0))
