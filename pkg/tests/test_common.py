"""Unit tests for utils.common module."""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest
from utils.common import (
    BORDERS,
    EMPTY_CLASS,
    IGNORE_LABEL,
    ArgumentError,
    BehindCameraError,
    ConfigError,
    FormatError,
    HisopError,
    SceneOverlapWarning,
    ShapeError,
    UndefinedLossError,
    as_dense,
    check_choice,
    ensure_finite,
    ensure_shape,
)


class TestConstants:
    """Tests for module constants."""

    def test_label_constants(self):
        """Test that empty and ignore labels are distinct integers."""
        assert EMPTY_CLASS == 0
        assert IGNORE_LABEL == 255

    def test_border_policies(self):
        """Test that both border policies are listed."""
        assert set(BORDERS) == {"zero", "clamp"}


class TestErrors:
    """Tests for the error hierarchy."""

    @pytest.mark.parametrize(
        "error", [ShapeError, ArgumentError, BehindCameraError, ConfigError, FormatError, UndefinedLossError]
    )
    def test_domain_errors_are_value_errors(self, error):
        """Test that every domain error can be caught as ValueError and HisopError."""
        assert issubclass(error, HisopError)
        with pytest.raises(ValueError):
            raise error("boom")

    def test_overlap_is_a_warning(self):
        """Test that scene overlap is reported as a UserWarning."""
        assert issubclass(SceneOverlapWarning, UserWarning)


class TestEnsureShape:
    """Tests for ensure_shape function."""

    def test_matching_shape(self):
        """Test that a matching array passes validation."""
        ensure_shape(np.zeros((2, 3)), (2, 3))  # Should not raise

    def test_wildcard_axis(self):
        """Test that None accepts any extent."""
        ensure_shape(np.zeros((7, 3)), (None, 3))  # Should not raise

    def test_wrong_rank_raises(self):
        """Test that a rank mismatch raises ShapeError naming the array."""
        with pytest.raises(ShapeError, match="weights of rank 2"):
            ensure_shape(np.zeros(3), (3, 1), "weights")

    def test_wrong_extent_raises(self):
        """Test that an extent mismatch raises ShapeError naming the axis."""
        with pytest.raises(ShapeError, match="axis 1"):
            ensure_shape(np.zeros((2, 4)), (2, 3))


class TestEnsureFinite:
    """Tests for ensure_finite function."""

    def test_finite_array(self):
        """Test that finite arrays pass."""
        ensure_finite(np.arange(4.0))  # Should not raise

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_raises(self, bad):
        """Test that NaN and Inf raise ArgumentError."""
        with pytest.raises(ArgumentError, match="non-finite"):
            ensure_finite(np.array([0.0, bad]), "feature")


class TestAsDense:
    """Tests for as_dense function."""

    def test_converts_to_float64(self):
        """Test that integer lists become contiguous float64 arrays."""
        result = as_dense([[1, 2], [3, 4]])
        assert result.dtype == np.float64
        assert result.flags["C_CONTIGUOUS"]

    def test_transposed_input_is_made_contiguous(self):
        """Test that a non-contiguous view is copied to C order."""
        result = as_dense(np.arange(6.0).reshape(2, 3).T)
        assert result.flags["C_CONTIGUOUS"]
        assert result.shape == (3, 2)

    def test_rank_check(self):
        """Test that a wrong rank raises ShapeError."""
        with pytest.raises(ShapeError, match="volume of rank 4"):
            as_dense(np.zeros((2, 2)), rank=4, name="volume")


class TestCheckChoice:
    """Tests for check_choice function."""

    def test_valid_choice_returned(self):
        """Test that an allowed value is returned unchanged."""
        assert check_choice("zero", BORDERS, "border policy") == "zero"

    def test_invalid_choice_raises(self):
        """Test that an unknown value raises ArgumentError listing the options."""
        with pytest.raises(ArgumentError, match="Unknown border policy 'wrap'"):
            check_choice("wrap", BORDERS, "border policy")
