"""Synthetic labeled scenes: ray-cast depth, procedural features, ground-truth voxels.

A scene is a list of boxes and planes placed by a center and xyz Euler
angles (degrees) in a z-up world. Planes are rectangles on their local z = 0
plane; their third extent is only the thickness used for voxelization.
Features are a procedural texture of the hit point's world coordinates,
followed by one channel per semantic class.
"""

from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from hisop.compose import SemanticVoxelGrid, UnifiedGridSpec
from hisop.geometry import DepthHypothesisSet, Intrinsics, RigidPose, backproject_grid
from hisop.lifting import ContextFeature, DepthFeature
from utils.common import EMPTY_CLASS, ArgumentError, FormatError, SceneOverlapWarning, check_choice

SHAPE_BOX: Final[str] = "box"
SHAPE_PLANE: Final[str] = "plane"
SHAPES: Final[tuple[str, ...]] = (SHAPE_BOX, SHAPE_PLANE)

DEFAULT_TEXTURE_CHANNELS: Final[int] = 8
DEFAULT_TEXTURE_FREQUENCY: Final[float] = 1.5
DEFAULT_NUM_CLASSES: Final[int] = 4
SINUSOIDS_PER_CHANNEL: Final[int] = 3

#random scene layout
GROUND_THICKNESS: Final[float] = 0.4
FLOOR_GAP: Final[float] = 1e-6
BOX_SIZE_RANGE: Final[tuple[float, float]] = (0.8, 2.4)
BOX_COUNT_RANGE: Final[tuple[int, int]] = (3, 6)
NEAR_CLEARANCE: Final[float] = 2.5
PLACEMENT_ATTEMPTS: Final[int] = 50

SCENE_SECTION: Final[str] = "scene"
PRIMITIVE_PREFIX: Final[str] = "primitive."


@dataclass(frozen=True, eq=False)
class Primitive:
    shape: str
    label: int
    center: np.ndarray
    extents: np.ndarray
    euler_deg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        check_choice(self.shape, SHAPES, "primitive shape")
        for name in ("center", "extents", "euler_deg"):
            value = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if value.shape != (3,):
                raise ArgumentError(f"Primitive {name} needs 3 values, got {value.tolist()}")
            object.__setattr__(self, name, value)
        if np.any(self.extents <= 0):
            raise ArgumentError(f"Primitive extents must be positive, got {self.extents.tolist()}")

    @property
    def rotation(self) -> np.ndarray:
        """Local-to-world rotation."""
        return Rotation.from_euler("xyz", self.euler_deg, degrees=True).as_matrix()

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inclusive point-in-primitive test for [..., 3] world points."""
        local = self.to_local(points)
        return np.all(np.abs(local) <= self.extents / 2.0, axis=-1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-axis-aligned bounding box (lo, hi)."""
        half = np.abs(self.rotation) @ (self.extents / 2.0)
        return self.center - half, self.center + half

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit per [..., 3] world direction; inf on a miss."""
        o = self.rotation.T @ (origin - self.center)
        d = directions @ self.rotation
        half = self.extents / 2.0
        if self.shape == SHAPE_PLANE:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -o[2] / d[..., 2]
                hit = o[:2] + t[..., None] * d[..., :2]
                inside = np.all(np.abs(hit) <= half[:2], axis=-1) & np.isfinite(t) & (t > 0)
            return np.where(inside, t, np.inf)

        # slab test; a zero direction component gives +-inf bounds on that axis
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
            t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
        entry = np.where(t_near > 0, t_near, t_far)
        hit = (t_near <= t_far) & (t_far > 0)
        return np.where(hit, entry, np.inf)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    seed: int
    primitives: tuple[Primitive, ...] = ()
    texture_frequency: float = DEFAULT_TEXTURE_FREQUENCY
    texture_channels: int = DEFAULT_TEXTURE_CHANNELS
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.texture_channels < 1:
            raise ArgumentError(
                f"Need >= 1 class and texture channel, got {self.num_classes} and {self.texture_channels}"
            )
        if not self.texture_frequency > 0:
            raise ArgumentError(f"Texture frequency must be positive, got {self.texture_frequency}")
        for i, primitive in enumerate(self.primitives):
            if not 1 <= primitive.label <= self.num_classes:
                raise ArgumentError(
                    f"Primitive {i} label {primitive.label} outside [1, {self.num_classes}]"
                )

    @property
    def channels(self) -> int:
        return self.texture_channels + self.num_classes


@dataclass(frozen=True, eq=False)
class TextureBank:
    """Per channel, three sinusoids of world position: directions [T, 3, 3], frequencies and phases [T, 3]."""

    directions: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Texture [T, ...] at [..., 3] world points, each channel within [-1, 1]."""
        projected = np.einsum("...k,tjk->t...j", points, self.directions)
        shape = (self.frequencies.shape[0],) + (1,) * (points.ndim - 1) + (SINUSOIDS_PER_CHANNEL,)
        angles = 2.0 * np.pi * self.frequencies.reshape(shape) * projected + self.phases.reshape(shape)
        return np.sin(angles).mean(axis=-1)


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    texture: TextureBank

    def to_bytes(self) -> bytes:
        """Canonical serialization: the spec text followed by the raw texture parameters."""
        payload = scene_spec_to_text(self.spec).encode("utf-8")
        for array in (self.texture.directions, self.texture.frequencies, self.texture.phases):
            payload += np.ascontiguousarray(array, dtype="<f8").tobytes()
        return payload


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    depth: np.ndarray
    feature: ContextFeature
    labels: np.ndarray
    intrinsics: Intrinsics
    pose: RigidPose


#building
def _texture_bank(spec: SceneSpec) -> TextureBank:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.texture_channels, SINUSOIDS_PER_CHANNEL)
    directions = rng.normal(size=shape + (3,))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    frequencies = spec.texture_frequency * rng.uniform(0.6, 1.4, size=shape)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    return TextureBank(directions=directions, frequencies=frequencies, phases=phases)


def _overlaps(a: Primitive, b: Primitive) -> bool:
    lo_a, hi_a = a.bounds()
    lo_b, hi_b = b.bounds()
    return bool(np.all((lo_a < hi_b) & (lo_b < hi_a)))


def build_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene from a spec; overlapping primitives warn but are kept."""
    for i, a in enumerate(spec.primitives):
        for j in range(i + 1, len(spec.primitives)):
            if _overlaps(a, spec.primitives[j]):
                warnings.warn(
                    f"Primitives {i} and {j} have overlapping bounds; primitive {i} wins shared space",
                    SceneOverlapWarning,
                    stacklevel=2,
                )
    return Scene(spec=spec, texture=_texture_bank(spec))


def plane_scene_spec(
    depth: float = 3.6,
    seed: int = 0,
    size: tuple[float, float] = (12.0, 3.2),
    height: float = 1.6,
    label: int = 1,
    num_classes: int = DEFAULT_NUM_CLASSES,
) -> SceneSpec:
    """A single upright textured plane at y = depth, facing cameras that look along +y."""
    plane = Primitive(
        shape=SHAPE_PLANE,
        label=label,
        center=np.array([0.0, depth, height]),
        extents=np.array([size[0], size[1], 0.4]),
        euler_deg=np.array([90.0, 0.0, 0.0]),
    )
    return SceneSpec(seed=seed, primitives=(plane,), num_classes=num_classes)


def random_scene_spec(
    seed: int, grid: UnifiedGridSpec, num_classes: int = DEFAULT_NUM_CLASSES
) -> SceneSpec:
    """Ground slab (class 1) under seeded yawed boxes (classes 2..N), all within the grid bounds.

    Boxes keep clear of the first few meters in front of the y = 0 edge, rest
    a hair above the ground top and do not overlap each other.
    """
    rng = np.random.default_rng(seed)
    lo = grid.origin
    hi = grid.origin + np.array(grid.extents) * grid.voxel_size
    ground = Primitive(
        shape=SHAPE_BOX,
        label=1,
        center=np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2] + GROUND_THICKNESS / 2]),
        extents=np.array([hi[0] - lo[0], hi[1] - lo[1], GROUND_THICKNESS]),
    )
    primitives = [ground]
    floor = lo[2] + GROUND_THICKNESS + FLOOR_GAP
    for _ in range(int(rng.integers(BOX_COUNT_RANGE[0], BOX_COUNT_RANGE[1] + 1))):
        for _ in range(PLACEMENT_ATTEMPTS):
            size = rng.uniform(*BOX_SIZE_RANGE, size=3)
            size[2] = min(size[2], hi[2] - floor)
            yaw = rng.uniform(0.0, 90.0)
            reach = np.hypot(size[0], size[1]) / 2
            x_range = (lo[0] + reach, hi[0] - reach)
            y_range = (lo[1] + NEAR_CLEARANCE + reach, hi[1] - reach)
            if x_range[0] >= x_range[1] or y_range[0] >= y_range[1]:
                continue
            box = Primitive(
                shape=SHAPE_BOX,
                label=int(rng.integers(2, num_classes + 1)) if num_classes > 1 else 1,
                center=np.array([rng.uniform(*x_range), rng.uniform(*y_range), floor + size[2] / 2]),
                extents=size,
                euler_deg=np.array([0.0, 0.0, yaw]),
            )
            if not any(_overlaps(box, other) for other in primitives[1:]):
                primitives.append(box)
                break
    return SceneSpec(seed=seed, primitives=tuple(primitives), num_classes=num_classes)


#rendering
def cast_rays(scene: Scene, K: Intrinsics, pose: RigidPose, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit camera depth and primitive index per pixel (0 and -1 on a miss)."""
    rays = backproject_grid(K, height, width, np.ones(1))[0]
    directions = rays @ pose.rotation
    origin = pose.center
    best = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    for index, primitive in enumerate(scene.spec.primitives):
        t = primitive.intersect(origin, directions)
        closer = t < best
        best = np.where(closer, t, best)
        owner = np.where(closer, index, owner)
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth, owner


def render_frame(
    scene: Scene, K: Intrinsics, pose: RigidPose, height: int, width: int
) -> RenderedFrame:
    """Ray-cast one view.

    Depth is the camera z of the nearest hit (0 on a miss). Features are the
    texture at the hit point followed by the one-hot class channels; misses
    are all zero.
    """
    if height < 1 or width < 1:
        raise ArgumentError(f"Image extents must be positive, got {height}x{width}")
    spec = scene.spec
    depth, owner = cast_rays(scene, K, pose, height, width)
    hit = owner >= 0
    points = pose.inverse().apply(backproject_grid(K, height, width, np.ones(1))[0] * depth[..., None])

    texture = np.where(hit[None], scene.texture.evaluate(points), 0.0)
    label_of = np.array([EMPTY_CLASS] + [p.label for p in spec.primitives], dtype=np.int64)
    labels = label_of[owner + 1]
    classes = np.zeros((spec.num_classes, height, width))
    for cls in range(1, spec.num_classes + 1):
        classes[cls - 1] = labels == cls
    feature = ContextFeature(values=np.concatenate([texture, classes], axis=0))
    return RenderedFrame(depth=depth, feature=feature, labels=labels, intrinsics=K, pose=pose)


def depth_logits(
    depth: np.ndarray,
    hyps: DepthHypothesisSet,
    sharpness: float,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> DepthFeature:
    """Oracle depth cost: a Gaussian bump of width sharpness (m) around the true depth, plus noise.

    Pixels without a hit get uniform (all-zero) logits before noise.
    """
    if not sharpness > 0:
        raise ArgumentError(f"Depth sharpness must be positive, got {sharpness}")
    depth = np.asarray(depth, dtype=np.float64)
    offsets = (hyps.values[:, None, None] - depth[None]) / sharpness
    logits = np.where(depth[None] > 0, -0.5 * offsets**2, 0.0)
    if noise > 0:
        generator = rng if rng is not None else np.random.default_rng(0)
        logits = logits + noise * generator.normal(size=logits.shape)
    return DepthFeature(values=logits)


def voxelize_ground_truth(scene: Scene, grid: UnifiedGridSpec) -> SemanticVoxelGrid:
    """Label each voxel by the first-listed primitive containing its center, else empty."""
    centers = grid.centers()
    labels = np.full(grid.extents, EMPTY_CLASS, dtype=np.int64)
    for primitive in scene.spec.primitives:
        inside = primitive.contains(centers) & (labels == EMPTY_CLASS)
        labels[inside] = primitive.label
    return SemanticVoxelGrid(labels=labels, num_classes=scene.spec.num_classes)


#scene files
def _vector(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def scene_spec_to_text(spec: SceneSpec) -> str:
    lines = [
        f"[{SCENE_SECTION}]",
        f"seed = {spec.seed}",
        f"num_classes = {spec.num_classes}",
        f"texture_channels = {spec.texture_channels}",
        f"texture_frequency = {spec.texture_frequency!r}",
    ]
    for i, primitive in enumerate(spec.primitives):
        lines += [
            "",
            f"[{PRIMITIVE_PREFIX}{i}]",
            f"shape = {primitive.shape}",
            f"class = {primitive.label}",
            f"center = {_vector(primitive.center)}",
            f"extents = {_vector(primitive.extents)}",
            f"euler = {_vector(primitive.euler_deg)}",
        ]
    return "\n".join(lines) + "\n"


def _floats(parser: configparser.ConfigParser, section: str, key: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in parser.get(section, key).split()])
    except (configparser.Error, ValueError) as exc:
        raise FormatError(f"Bad or missing '{key}' in [{section}]: {exc}") from exc


def parse_scene_spec(text: str, source: str = "<text>") -> SceneSpec:
    """Parse key=value scene blocks.

    Raises:
        FormatError: If the text is not a valid scene description
    """
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=source)
        header = parser[SCENE_SECTION]
        seed = header.getint("seed", 0)
        num_classes = header.getint("num_classes", DEFAULT_NUM_CLASSES)
        channels = header.getint("texture_channels", DEFAULT_TEXTURE_CHANNELS)
        frequency = header.getfloat("texture_frequency", DEFAULT_TEXTURE_FREQUENCY)
    except (configparser.Error, KeyError, ValueError) as exc:
        raise FormatError(f"Invalid scene header in {source}: {exc}") from exc

    names = [s for s in parser.sections() if s != SCENE_SECTION]
    unknown = [s for s in names if not s.startswith(PRIMITIVE_PREFIX)]
    if unknown:
        raise FormatError(f"Unknown sections in {source}: {unknown}")

    bad = [s for s in names if not s[len(PRIMITIVE_PREFIX):].isdigit()]
    if bad:
        raise FormatError(f"Primitive sections in {source} need an integer index, got {bad}")

    primitives = []
    for section in sorted(names, key=lambda s: int(s[len(PRIMITIVE_PREFIX):])):
        try:
            primitives.append(
                Primitive(
                    shape=parser.get(section, "shape"),
                    label=parser.getint(section, "class"),
                    center=_floats(parser, section, "center"),
                    extents=_floats(parser, section, "extents"),
                    euler_deg=_floats(parser, section, "euler") if parser.has_option(section, "euler") else np.zeros(3),
                )
            )
        except (configparser.Error, ValueError) as exc:
            raise FormatError(f"Invalid primitive [{section}] in {source}: {exc}") from exc
    try:
        return SceneSpec(
            seed=seed,
            primitives=tuple(primitives),
            texture_frequency=frequency,
            texture_channels=channels,
            num_classes=num_classes,
        )
    except ArgumentError as exc:
        raise FormatError(f"Invalid scene in {source}: {exc}") from exc


def load_scene_spec(path: Path) -> SceneSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scene file not found: {path}")
    return parse_scene_spec(path.read_text(encoding="utf-8"), source=str(path))


def save_scene_spec(spec: SceneSpec, path: Path) -> int:
    text = scene_spec_to_text(spec)
    Path(path).write_text(text, encoding="utf-8")
    return len(text.encode("utf-8"))


def frames_for_trajectory(
    scene: Scene,
    K: Intrinsics,
    poses: Sequence[RigidPose],
    height: int,
    width: int,
) -> list[RenderedFrame]:
    return [render_frame(scene, K, pose, height, width) for pose in poses]
