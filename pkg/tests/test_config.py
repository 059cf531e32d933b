"""Unit tests for utils.config module."""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
from utils.common import ConfigError
from utils.config import (
    BENCH_CONFIG_NAME,
    OUT_ENV_VAR,
    RANDOM_SCENE,
    AblationFlags,
    RunConfig,
    default_config_path,
    get_project_root,
    load_config,
    parse_config,
    resolve_input_file,
    resolve_output_dir,
    with_ablations,
    with_run_overrides,
)


class TestGetProjectRoot:
    """Tests for get_project_root function."""

    def test_root_holds_package_and_configs(self):
        """Test that the detected root contains the hisop package and configs."""
        root = get_project_root()
        assert (root / "hisop").is_dir()
        assert (root / "configs").is_dir()


class TestParseConfig:
    """Tests for parse_config function."""

    def test_empty_text_gives_defaults(self):
        """Test that an empty config equals the default RunConfig."""
        assert parse_config("") == RunConfig()

    def test_values_are_typed(self):
        """Test that values are parsed to the type of their default."""
        config = parse_config("[run]\nseed = 7\n[grid]\nextents = 4 5 6\nvoxel_size = 0.25\n[ablation]\ncpa = off\n")
        assert config.run.seed == 7
        assert config.grid.extents == (4, 5, 6)
        assert config.grid.voxel_size == 0.25
        assert config.ablation.cpa is False

    def test_unknown_section_raises(self):
        """Test that unknown sections are rejected."""
        with pytest.raises(ConfigError, match="Unknown config sections"):
            parse_config("[render]\nx = 1\n")

    def test_unknown_key_raises(self):
        """Test that unknown keys name the key and section."""
        with pytest.raises(ConfigError, match="Unknown key 'colour' in \\[camera\\]"):
            parse_config("[camera]\ncolour = red\n")

    def test_unparsable_value_raises(self):
        """Test that a non-numeric value for a numeric key raises ConfigError."""
        with pytest.raises(ConfigError, match="run.seed"):
            parse_config("[run]\nseed = many\n")

    def test_bad_flag_raises(self):
        """Test that flags accept only on/off style values."""
        with pytest.raises(ConfigError, match="expects on/off"):
            parse_config("[ablation]\ncpa = maybe\n")

    def test_round_trip_through_text(self):
        """Test that to_text output parses back to an equal config."""
        config = parse_config("[run]\nseed = 3\n[trajectory]\nstep = 0.1 0.2 0.3\n[ablation]\ndhbt = off\n")
        assert parse_config(config.to_text()) == config


class TestValidateConfig:
    """Tests for config validation."""

    def test_temporal_needs_two_frames(self):
        """Test that the temporal branch rejects a single frame."""
        with pytest.raises(ConfigError, match="run.frames >= 2"):
            parse_config("[run]\nframes = 1\n")

    def test_single_frame_without_temporal(self):
        """Test that a geometric-only run accepts one frame."""
        config = parse_config("[run]\nframes = 1\n[ablation]\ntemporal = off\n")
        assert config.run.frames == 1

    def test_shuffle_needs_temporal(self):
        """Test that pose shuffling is rejected without the temporal branch."""
        with pytest.raises(ConfigError, match="pose_shuffle"):
            parse_config("[ablation]\ntemporal = off\npose_shuffle = on\n")

    def test_cost_volume_needs_warp(self):
        """Test that cost-volume mode is rejected without warping."""
        with pytest.raises(ConfigError, match="cost_volume_mode"):
            parse_config("[ablation]\nwarp = off\ncost_volume_mode = on\n")

    @pytest.mark.parametrize(
        "text, key",
        [
            ("[alignment]\ngroups = 2\n", "alignment.groups"),
            ("[refine]\nlevels = 4\n", "refine.levels"),
            ("[compose]\npool_reduce = max\n", "compose.pool_reduce"),
            ("[grid]\nextents = 4 4\n", "grid.extents"),
            ("[run]\nthreads = 0\n", "run.threads"),
        ],
    )
    def test_ranges(self, text, key):
        """Test that out-of-range values name the offending key."""
        with pytest.raises(ConfigError, match=key):
            parse_config(text)


class TestOverrides:
    """Tests for with_ablations and with_run_overrides."""

    def test_ablation_assignments(self):
        """Test that NAME=off assignments switch flags."""
        config = with_ablations(RunConfig(), ["cpa=off", "adr = off"])
        assert config.ablation.cpa is False
        assert config.ablation.adr is False
        assert config.ablation.dhbt is True

    def test_unknown_flag_raises(self):
        """Test that unknown ablation names are rejected with the valid list."""
        with pytest.raises(ConfigError, match="Unknown ablation flag 'fast'"):
            with_ablations(RunConfig(), ["fast=on"])

    def test_missing_value_raises(self):
        """Test that an assignment without '=' is rejected."""
        with pytest.raises(ConfigError, match="NAME=off"):
            with_ablations(RunConfig(), ["cpa"])

    def test_invalid_combination_raises(self):
        """Test that overrides are validated like parsed configs."""
        with pytest.raises(ConfigError):
            with_ablations(RunConfig(), ["temporal=off", "pose_shuffle=on"])

    def test_run_overrides(self):
        """Test that seed, out and threads override the run section."""
        config = with_run_overrides(RunConfig(), seed=5, out="elsewhere", threads=2)
        assert (config.run.seed, config.run.out, config.run.threads) == (5, "elsewhere", 2)

    def test_no_overrides_returns_same_config(self):
        """Test that passing nothing leaves the config untouched."""
        config = RunConfig()
        assert with_run_overrides(config) is config

    def test_flag_names_match_dataclass(self):
        """Test that every documented bench flag exists."""
        names = set(AblationFlags.__dataclass_fields__)
        assert {"pose_shuffle", "cost_volume_mode", "cpa", "adr", "dhbt", "temporal", "warp"} <= names


class TestFileDiscovery:
    """Tests for input and output path resolution."""

    def test_missing_input_raises(self):
        """Test that missing inputs raise FileNotFoundError with the path."""
        with pytest.raises(FileNotFoundError, match="no_such.cfg"):
            resolve_input_file("configs/no_such.cfg")

    def test_project_relative_input(self, tmp_path, monkeypatch):
        """Test that inputs resolve against the project root from any directory."""
        monkeypatch.chdir(tmp_path)
        assert resolve_input_file("configs/default.cfg").exists()

    def test_env_overrides_cli_out(self, monkeypatch):
        """Test the HISOP_OUT > --out > config precedence."""
        config = RunConfig()
        monkeypatch.delenv(OUT_ENV_VAR, raising=False)
        assert resolve_output_dir(config) == Path(config.run.out)
        assert resolve_output_dir(config, "cli") == Path("cli")
        monkeypatch.setenv(OUT_ENV_VAR, "env")
        assert resolve_output_dir(config, "cli") == Path("env")


class TestBundledConfigs:
    """Tests for the configs shipped with the project."""

    def test_default_config_loads(self):
        """Test that the default config parses and points at the plane scene."""
        config = load_config(default_config_path())
        assert config.scene.path.endswith("plane.scene")

    def test_bench_config_uses_random_scenes(self):
        """Test that the bench config draws random scenes with exports off."""
        config = load_config(default_config_path(BENCH_CONFIG_NAME))
        assert config.scene.path == RANDOM_SCENE
        assert config.export.grids is False
