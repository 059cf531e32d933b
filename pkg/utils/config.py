"""Run configuration: defaults, key=value parsing, overrides and file discovery."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Final, Iterable

from utils.common import ConfigError


#constants
OUT_ENV_VAR: Final[str] = "HISOP_OUT"
DEFAULT_OUT_DIR: Final[str] = "out"
CONFIG_SUBDIR: Final[str] = "configs"
SCENE_SUBDIR: Final[str] = "scenes"
DEFAULT_CONFIG_NAME: Final[str] = "default.cfg"
BENCH_CONFIG_NAME: Final[str] = "bench.cfg"
RANDOM_SCENE: Final[str] = "random"

FLAG_ON: Final[tuple[str, ...]] = ("on", "true", "yes", "1")
FLAG_OFF: Final[tuple[str, ...]] = ("off", "false", "no", "0")


#sections
@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    threads: int = 1
    frames: int = 4
    record_timing: bool = False
    out: str = DEFAULT_OUT_DIR


@dataclass(frozen=True)
class SceneSettings:
    path: str = RANDOM_SCENE
    num_classes: int = 4


@dataclass(frozen=True)
class CameraSettings:
    height: int = 32
    width: int = 32
    fx: float = 20.0
    fy: float = 20.0
    cx: float = 15.5
    cy: float = 15.5


@dataclass(frozen=True)
class TrajectorySettings:
    position: tuple[float, ...] = (0.0, 0.0, 1.2)
    yaw: float = 0.0
    step: tuple[float, ...] = (0.25, 0.4, 0.0)
    yaw_step: float = 0.0
    rotation_noise: float = 0.0
    translation_noise: float = 0.0


@dataclass(frozen=True)
class HypothesisSettings:
    d_min: float = 2.0
    d_max: float = 10.0
    count: int = 16
    spacing: str = "linear"


@dataclass(frozen=True)
class GridSettings:
    extents: tuple[int, ...] = (32, 32, 8)
    voxel_size: float = 0.4
    origin: tuple[float, ...] = (-6.4, 0.0, 0.0)


@dataclass(frozen=True)
class OracleSettings:
    sharpness: float = 0.3
    noise: float = 0.5


@dataclass(frozen=True)
class AlignmentSettings:
    groups: int = 3
    kernels: str = "seeded"
    kernel_noise: float = 0.1
    match: str = "absdiff"


@dataclass(frozen=True)
class RefineSettings:
    levels: int = 3
    window: int = 3
    params: str = ""


@dataclass(frozen=True)
class ComposeSettings:
    gate: float = 1.0
    pool_reduce: str = "mean"
    threshold: float = 0.5
    lambda_ce: float = 1.0
    class_weighting: str = "frequency"


@dataclass(frozen=True)
class AblationFlags:
    """Component switches; every one defaults to the full pipeline except the baselines."""

    gcl_confidence: bool = True
    temporal: bool = True
    warp: bool = True
    cpa: bool = True
    adr: bool = True
    dhbt: bool = True
    pose_shuffle: bool = False
    cost_volume_mode: bool = False
    scale_isolation: bool = True
    multigroup: bool = True
    affinity_weights: bool = True
    deformable: bool = True
    cascade: bool = True


@dataclass(frozen=True)
class ExportSettings:
    grids: bool = True
    heatmaps: bool = True
    heatmap_group: int = 0
    heatmap_slice: int = -1


@dataclass(frozen=True)
class RunConfig:
    """Every setting of one pipeline run, grouped by config-file section."""

    run: RunSettings = field(default_factory=RunSettings)
    scene: SceneSettings = field(default_factory=SceneSettings)
    camera: CameraSettings = field(default_factory=CameraSettings)
    trajectory: TrajectorySettings = field(default_factory=TrajectorySettings)
    hypotheses: HypothesisSettings = field(default_factory=HypothesisSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    alignment: AlignmentSettings = field(default_factory=AlignmentSettings)
    refine: RefineSettings = field(default_factory=RefineSettings)
    compose: ComposeSettings = field(default_factory=ComposeSettings)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    export: ExportSettings = field(default_factory=ExportSettings)

    def __post_init__(self) -> None:
        validate_config(self)

    def to_text(self) -> str:
        """Canonical key=value text; parse_config(to_text()) reproduces the config."""
        blocks = []
        for section in fields(self):
            values = getattr(self, section.name)
            lines = [f"[{section.name}]"]
            lines += [f"{f.name} = {_format_value(getattr(values, f.name))}" for f in fields(values)]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"


#project root detection
def get_project_root() -> Path:
    """Find the project root by searching upward for a directory that contains
    both 'hisop' and 'configs'. This works no matter where you run the script from.

    Returns:
        Path: Project root directory
    """
    here = Path(__file__).resolve()
    for parent in [here.parent, *here.parents]:
        if (parent / "hisop").exists() and (parent / CONFIG_SUBDIR).exists():
            return parent
    return here.parents[1]


#file discovery
def resolve_input_file(path: str | Path) -> Path:
    """Locate an input file relative to the working directory, then the project root.

    Raises:
        FileNotFoundError: If neither location holds the file
    """
    candidate = Path(path)
    if candidate.exists():
        return candidate
    rooted = get_project_root() / candidate
    if not candidate.is_absolute() and rooted.exists():
        return rooted
    raise FileNotFoundError(f"Input file not found: {candidate}")


def resolve_output_dir(config: RunConfig, cli_out: str | None = None) -> Path:
    """Output directory: HISOP_OUT, then --out, then [run] out."""
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return Path(env)
    if cli_out:
        return Path(cli_out)
    return Path(config.run.out)


#parsing
def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.strip().lower()
    if lowered in FLAG_ON:
        return True
    if lowered in FLAG_OFF:
        return False
    raise ConfigError(f"'{key}' expects on/off, got '{text}'")


def _parse_value(text: str, default: object, key: str) -> object:
    try:
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"Cannot parse '{key}' value '{text}': {exc}") from exc


def _section_defaults() -> dict[str, object]:
    return {f.name: f.default_factory() for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<text>") -> RunConfig:
    """Parse key=value sections over the defaults.

    Raises:
        ConfigError: On unknown sections or keys, unparsable values or invalid flag combinations
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config {source}: {exc}") from exc

    sections = _section_defaults()
    unknown = [s for s in parser.sections() if s not in sections]
    if unknown:
        raise ConfigError(f"Unknown config sections in {source}: {unknown}")

    for name in parser.sections():
        current = sections[name]
        known = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"Unknown key '{key}' in [{name}] of {source}")
            updates[key] = _parse_value(raw, getattr(current, key), f"{name}.{key}")
        sections[name] = replace(current, **updates)
    return RunConfig(**sections)


def load_config(path: str | Path) -> RunConfig:
    resolved = resolve_input_file(path)
    return parse_config(resolved.read_text(encoding="utf-8"), source=str(resolved))


def default_config_path(name: str = DEFAULT_CONFIG_NAME) -> Path:
    return get_project_root() / CONFIG_SUBDIR / name


#overrides
def with_ablations(config: RunConfig, assignments: Iterable[str]) -> RunConfig:
    """Apply NAME=on|off assignments to the ablation flags.

    Raises:
        ConfigError: If a name is not a flag or a value is not on/off
    """
    known = {f.name for f in fields(AblationFlags)}
    updates: dict[str, bool] = {}
    for assignment in assignments:
        name, sep, value = assignment.partition("=")
        name = name.strip()
        if not sep:
            raise ConfigError(f"Ablation '{assignment}' must look like NAME=off")
        if name not in known:
            raise ConfigError(f"Unknown ablation flag '{name}'. Expected one of {sorted(known)}")
        updates[name] = _parse_bool(value, name)
    return replace(config, ablation=replace(config.ablation, **updates))


def with_run_overrides(
    config: RunConfig,
    seed: int | None = None,
    out: str | None = None,
    threads: int | None = None,
) -> RunConfig:
    updates: dict[str, object] = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out"] = out
    if threads is not None:
        updates["threads"] = threads
    return replace(config, run=replace(config.run, **updates)) if updates else config


#validation
def validate_config(config: RunConfig) -> None:
    """Check ranges and flag combinations.

    Raises:
        ConfigError: Naming the offending key or flag
    """
    run, flags = config.run, config.ablation
    if run.frames < 1:
        raise ConfigError(f"run.frames must be >= 1, got {run.frames}")
    if run.threads < 1:
        raise ConfigError(f"run.threads must be >= 1, got {run.threads}")
    if len(config.grid.extents) != 3 or min(config.grid.extents) < 1:
        raise ConfigError(f"grid.extents needs three positive integers, got {config.grid.extents}")
    if len(config.grid.origin) != 3:
        raise ConfigError(f"grid.origin needs three values, got {config.grid.origin}")
    for key in ("position", "step"):
        if len(getattr(config.trajectory, key)) != 3:
            raise ConfigError(f"trajectory.{key} needs three values, got {getattr(config.trajectory, key)}")
    if config.alignment.groups not in (1, 3, 5):
        raise ConfigError(f"alignment.groups must be 1, 3 or 5, got {config.alignment.groups}")
    if config.alignment.kernels not in ("seeded", "identity"):
        raise ConfigError(f"alignment.kernels must be 'seeded' or 'identity', got '{config.alignment.kernels}'")
    if config.alignment.match not in ("hadamard", "absdiff"):
        raise ConfigError(f"alignment.match must be 'hadamard' or 'absdiff', got '{config.alignment.match}'")
    if config.refine.levels not in (1, 3, 5):
        raise ConfigError(f"refine.levels must be 1, 3 or 5, got {config.refine.levels}")
    if config.compose.pool_reduce not in ("sum", "mean"):
        raise ConfigError(f"compose.pool_reduce must be 'sum' or 'mean', got '{config.compose.pool_reduce}'")
    if config.compose.class_weighting not in ("frequency", "none"):
        raise ConfigError(
            f"compose.class_weighting must be 'frequency' or 'none', got '{config.compose.class_weighting}'"
        )

    if not flags.temporal:
        for name in ("pose_shuffle", "cost_volume_mode"):
            if getattr(flags, name):
                raise ConfigError(f"Ablation flag '{name}' needs 'temporal' on")
    elif run.frames < 2:
        raise ConfigError(f"Ablation flag 'temporal' needs run.frames >= 2, got {run.frames}")
    if flags.pose_shuffle and not flags.warp:
        raise ConfigError("Ablation flag 'pose_shuffle' needs 'warp' on; unwarped stacking ignores poses")
    if flags.cost_volume_mode and not flags.warp:
        raise ConfigError("Ablation flag 'cost_volume_mode' needs 'warp' on")
