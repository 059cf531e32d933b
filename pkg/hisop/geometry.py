"""Pinhole cameras, rigid poses, depth hypotheses and the plane-sweep warp.

Pose convention: a RigidPose maps world points into the camera frame,
``X_cam = R @ X_world + t``, with points as column vectors. Camera frames are
x right, y down, z forward. The world frame is z-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Final, NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from utils.common import ArgumentError, BehindCameraError, ShapeError, as_dense, check_choice

SPACING_LINEAR: Final[str] = "linear"
SPACING_INVERSE: Final[str] = "inverse"
SPACINGS: Final[tuple[str, ...]] = (SPACING_LINEAR, SPACING_INVERSE)

ORTHONORMAL_TOL: Final[float] = 1e-9

#camera axes expressed in a z-up world when looking along +y
_FORWARD_BASIS: Final[np.ndarray] = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0],
        [0.0, 1.0, 0.0],
    ]
)


@dataclass(frozen=True)
class Intrinsics:
    """Skewless pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ArgumentError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def identity(cls) -> "Intrinsics":
        return cls(fx=1.0, fy=1.0, cx=0.0, cy=0.0)


@dataclass(frozen=True, eq=False)
class RigidPose:
    """World-to-camera rotation and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = as_dense(self.rotation, rank=2, name="rotation")
        translation = as_dense(self.translation, rank=1, name="translation")
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ShapeError(
                f"Expected 3x3 rotation and 3-vector translation, got {rotation.shape} and {translation.shape}"
            )
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ArgumentError("Rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ArgumentError(f"Rotation determinant must be 1, got {np.linalg.det(rotation)}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform [..., 3] points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidPose":
        rotation = self.rotation.T
        return RigidPose(rotation=rotation, translation=-rotation @ self.translation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())

    def to_lines(self) -> list[str]:
        rotation = " ".join(repr(float(v)) for v in self.rotation.reshape(-1))
        translation = " ".join(repr(float(v)) for v in self.translation)
        return [f"rotation = {rotation}", f"translation = {translation}"]


@dataclass(frozen=True, eq=False)
class DepthHypothesisSet:
    """Strictly increasing depth planes d_1..d_D in meters."""

    values: np.ndarray
    spacing: str = SPACING_LINEAR

    def __post_init__(self) -> None:
        values = as_dense(self.values, rank=1, name="depth hypotheses")
        check_choice(self.spacing, SPACINGS, "hypothesis spacing")
        if values.shape[0] < 1 or values[0] <= 0:
            raise ArgumentError(f"Depth hypotheses must be positive, got {values}")
        if np.any(np.diff(values) <= 0):
            raise ArgumentError("Depth hypotheses must be strictly increasing")
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return int(self.values.shape[0])

    def nearest_index(self, depth: float) -> int:
        return int(np.argmin(np.abs(self.values - depth)))

    def depth_bins(self, depth_map: np.ndarray) -> np.ndarray:
        """Nearest-hypothesis index per pixel; -1 for misses or depths outside the sweep."""
        depth_map = np.asarray(depth_map, dtype=np.float64)
        bins = np.argmin(np.abs(depth_map[..., None] - self.values), axis=-1)
        if self.count > 1:
            half_low = 0.5 * (self.values[1] - self.values[0])
            half_high = 0.5 * (self.values[-1] - self.values[-2])
        else:
            half_low = half_high = 0.0
        valid = (
            (depth_map > 0)
            & (depth_map >= self.values[0] - half_low)
            & (depth_map <= self.values[-1] + half_high)
        )
        return np.where(valid, bins, -1)


class WarpResult(NamedTuple):
    u: float
    v: float
    valid: bool


def build_hypotheses(
    d_min: float, d_max: float, count: int, spacing: str = SPACING_LINEAR
) -> DepthHypothesisSet:
    """Depth planes with endpoints included, uniform in d or in 1/d."""
    check_choice(spacing, SPACINGS, "hypothesis spacing")
    if not 0 < d_min < d_max:
        raise ArgumentError(f"Expected 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}")
    if count < 2:
        raise ArgumentError(f"Need at least 2 depth hypotheses, got {count}")
    if spacing == SPACING_LINEAR:
        values = np.linspace(d_min, d_max, count)
    else:
        values = 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, count)
    values[0], values[-1] = d_min, d_max
    return DepthHypothesisSet(values=values, spacing=spacing)


def project(K: Intrinsics, point: np.ndarray) -> tuple[float, float]:
    """Pixel (u, v) of a camera-frame point."""
    x, y, z = (float(c) for c in point)
    if z <= 0:
        raise BehindCameraError(f"Cannot project point with depth {z}")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy


def backproject(K: Intrinsics, pixel: tuple[float, float], depth: float) -> np.ndarray:
    """Camera-frame point d * K^-1 (u, v, 1); its z equals depth exactly."""
    if depth <= 0:
        raise ArgumentError(f"Depth must be positive, got {depth}")
    u, v = pixel
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def backproject_grid(K: Intrinsics, height: int, width: int, depths: np.ndarray) -> np.ndarray:
    """Points [D, H, W, 3] for every pixel center at every depth."""
    depths = np.asarray(depths, dtype=np.float64)
    vs, us = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    rays = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1)
    return depths[:, None, None, None] * rays[None]


def warp_pixel(
    K0: Intrinsics, Ki: Intrinsics, pose: RigidPose, pixel: tuple[float, float], depth: float
) -> WarpResult:
    """Map a reference pixel at a hypothesized depth into another view.

    Computes Ki (R (K0^-1 p d) + t) and divides by the third coordinate. A
    transformed depth <= 0 yields an invalid result.
    """
    point = pose.apply(backproject(K0, pixel, depth))
    homogeneous = Ki.matrix @ point
    if homogeneous[2] <= 0:
        return WarpResult(u=float("nan"), v=float("nan"), valid=False)
    return WarpResult(
        u=float(homogeneous[0] / homogeneous[2]),
        v=float(homogeneous[1] / homogeneous[2]),
        valid=True,
    )


def warp_grid(
    K0: Intrinsics,
    Ki: Intrinsics,
    pose: RigidPose,
    height: int,
    width: int,
    depths: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized warp_pixel over all pixels and depths.

    Returns (us, vs, valid), each [D, H, W]; invalid entries hold NaN.
    """
    points = pose.apply(backproject_grid(K0, height, width, depths))
    homogeneous = points @ Ki.matrix.T
    z = homogeneous[..., 2]
    valid = z > 0
    safe = np.where(valid, z, 1.0)
    us = np.where(valid, homogeneous[..., 0] / safe, np.nan)
    vs = np.where(valid, homogeneous[..., 1] / safe, np.nan)
    return us, vs, valid


def relative_pose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose mapping points from camera a's frame into camera b's frame."""
    rotation = b.rotation @ a.rotation.T
    return RigidPose(rotation=rotation, translation=b.translation - rotation @ a.translation)


def look_from(position: np.ndarray, yaw: float = 0.0) -> RigidPose:
    """World-to-camera pose of a level camera at position looking along +y, turned by yaw (radians, about +z)."""
    turn = Rotation.from_euler("z", yaw).as_matrix()
    rotation = _FORWARD_BASIS @ turn.T
    position = np.asarray(position, dtype=np.float64)
    return RigidPose(rotation=rotation, translation=-rotation @ position)


def perturb_pose(
    pose: RigidPose, rotation_sigma: float, translation_sigma: float, rng: np.random.Generator
) -> RigidPose:
    """Jitter a pose by a random axis-angle rotation (radians) and translation (meters)."""
    rotvec = rng.normal(0.0, rotation_sigma, size=3) if rotation_sigma > 0 else np.zeros(3)
    shift = rng.normal(0.0, translation_sigma, size=3) if translation_sigma > 0 else np.zeros(3)
    jitter = Rotation.from_rotvec(rotvec).as_matrix()
    rotation = jitter @ pose.rotation
    # project back onto SO(3)
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return RigidPose(rotation=rotation, translation=jitter @ pose.translation + shift)
