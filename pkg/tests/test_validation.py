"""
Unit tests for validation utilities.
"""

import math
from typing import Optional

import pytest

from utils.validation import (
    ValidationError,
    ValidationResult,
    coerce_value,
    parse_overrides,
    require,
    validate_criterion,
    validate_exit_index,
    validate_fraction,
    validate_positive,
    validate_schedule,
    validate_splits,
)


class TestValidationResult:
    """Test ValidationResult class."""

    def test_valid_result(self):
        result = ValidationResult(True, cleaned_value=3)
        assert result
        assert str(result) == "Valid"

    def test_invalid_result(self):
        result = ValidationResult(False, "bad")
        assert not result
        assert str(result) == "Invalid: bad"

    def test_require_raises(self):
        with pytest.raises(ValidationError, match="bad"):
            require(ValidationResult(False, "bad"))
        assert require(ValidationResult(True, cleaned_value=4)) == 4


class TestCoerceValue:
    """String to field-type conversion."""

    @pytest.mark.parametrize("raw,expected", [("true", True), ("YES", True), ("0", False), ("off", False)])
    def test_booleans(self, raw, expected):
        assert coerce_value("flag", raw, bool).cleaned_value is expected

    def test_bad_boolean(self):
        assert not coerce_value("flag", "maybe", bool)

    def test_numbers(self):
        assert coerce_value("seed", " 12 ", int).cleaned_value == 12
        assert coerce_value("lr", "1e-3", float).cleaned_value == pytest.approx(1e-3)
        assert math.isinf(coerce_value("g", "inf", float).cleaned_value)

    def test_nan_rejected(self):
        assert not coerce_value("lr", "nan", float)

    def test_bad_integer(self):
        result = coerce_value("seed", "1.5", int)
        assert not result
        assert "seed" in result.error_message

    def test_optional_accepts_empty(self):
        assert coerce_value("peak", "", Optional[float]).cleaned_value is None
        assert coerce_value("peak", None, Optional[float]).cleaned_value is None
        assert coerce_value("peak", "2.5", Optional[float]).cleaned_value == 2.5

    def test_required_rejects_empty(self):
        assert not coerce_value("seed", "none", int)


class TestParseOverrides:
    """--set key=value items."""

    def test_parses_and_lowercases(self):
        assert parse_overrides(["SEED=3", "data_dir = out/x=y"]) == {"seed": "3", "data_dir": "out/x=y"}

    def test_none_is_empty(self):
        assert parse_overrides(None) == {}

    @pytest.mark.parametrize("item", ["seed", "1x=2", "bad-key=1"])
    def test_malformed(self, item):
        with pytest.raises(ValidationError):
            parse_overrides([item])


class TestDomainValidators:
    """Splits, budgets, criteria, exits and schedules."""

    def test_splits_sorted_and_deduplicated(self):
        assert validate_splits("cba a").is_valid is False
        assert validate_splits("cbaa").cleaned_value == ["A", "B", "C"]

    def test_unknown_split(self):
        result = validate_splits("AE")
        assert not result
        assert "E" in result.error_message

    def test_empty_splits(self):
        assert not validate_splits("")

    def test_positive(self):
        assert validate_positive("b", None).cleaned_value is None
        assert validate_positive("b", 2).cleaned_value == 2.0
        assert not validate_positive("b", 0.0)
        assert not validate_positive("b", float("nan"))
        assert validate_positive("b", math.inf)
        assert not validate_positive("b", math.inf, allow_inf=False)

    def test_fraction(self):
        assert validate_fraction("f", 1.0)
        assert not validate_fraction("f", 0.0)
        assert not validate_fraction("f", 1.5)

    def test_criterion(self):
        assert validate_criterion(" Action ").cleaned_value == "action"
        assert not validate_criterion("entropy")

    def test_exit_index(self):
        assert validate_exit_index(3, 3)
        assert not validate_exit_index(0, 3)
        assert not validate_exit_index(4, 3)

    def test_schedule(self):
        assert validate_schedule([1, 1, 2, 3], 3).cleaned_value == [1, 1, 2, 3]
        assert not validate_schedule([], 3)
        assert not validate_schedule([1, 4], 3)
        assert not validate_schedule([2, 1], 3)
