"""
Validation utilities for the DeeR toolkit.
Provides validation of configuration values, command flags and split names.
"""

import logging
import math
import re
from typing import Any, Dict, Iterable, List, Optional, Union, get_args, get_origin

logger = logging.getLogger(__name__)

VALID_SPLITS = "ABCD"
VALID_CRITERIA = ("action", "feature", "time", "static")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_NONE = {"", "none", "null"}


class ValidationError(Exception):
    """Custom exception for validation errors."""
    pass


class ValidationResult:
    """Result of a validation operation."""

    def __init__(self, is_valid: bool, error_message: str = None, cleaned_value: Any = None):
        self.is_valid = is_valid
        self.error_message = error_message
        self.cleaned_value = cleaned_value

    def __bool__(self) -> bool:
        return self.is_valid

    def __str__(self) -> str:
        if self.is_valid:
            return "Valid"
        return f"Invalid: {self.error_message}"


def _unwrap_optional(tp) -> (type, bool):
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def coerce_value(key: str, raw: Optional[str], tp) -> ValidationResult:
    """
    Convert a raw config string to the field type ``tp``.

    Args:
        key: Flat configuration key (for messages)
        raw: Raw string value (None for an empty dotenv entry)
        tp: Target type annotation (int, float, bool, str or Optional of them)

    Returns:
        ValidationResult with the converted value
    """
    base, optional = _unwrap_optional(tp)
    text = "" if raw is None else str(raw).strip()

    if text.lower() in _NONE:
        if optional:
            return ValidationResult(True, cleaned_value=None)
        return ValidationResult(False, f"'{key}' requires a value")

    try:
        if base is bool:
            if text.lower() in _TRUE:
                return ValidationResult(True, cleaned_value=True)
            if text.lower() in _FALSE:
                return ValidationResult(True, cleaned_value=False)
            return ValidationResult(False, f"'{key}' expects a boolean, got '{text}'")
        if base is int:
            return ValidationResult(True, cleaned_value=int(text))
        if base is float:
            value = float(text)
            if math.isnan(value):
                return ValidationResult(False, f"'{key}' must not be NaN")
            return ValidationResult(True, cleaned_value=value)
        return ValidationResult(True, cleaned_value=text)
    except ValueError:
        return ValidationResult(False, f"'{key}' expects {base.__name__}, got '{text}'")


def parse_overrides(items: Optional[Iterable[str]]) -> Dict[str, str]:
    """Parse ``--set key=value`` items into a dict."""
    result: Dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"Override '{item}' must look like key=value")
        key, value = item.split("=", 1)
        key = key.strip().lower()
        if not re.match(r"^[a-z_][a-z0-9_]*$", key):
            raise ValidationError(f"Invalid override key '{key}'")
        result[key] = value.strip()
    return result


def validate_splits(splits: str) -> ValidationResult:
    """
    Validate a string of split letters such as ``ABC``.

    Returns:
        ValidationResult with the de-duplicated, sorted split list
    """
    if not splits or not isinstance(splits, str):
        return ValidationResult(False, "At least one split letter is required")
    letters = splits.strip().upper()
    bad = sorted(set(letters) - set(VALID_SPLITS))
    if bad:
        return ValidationResult(False, f"Unknown split(s) {''.join(bad)}; choose from {VALID_SPLITS}")
    return ValidationResult(True, cleaned_value=sorted(set(letters)))


def validate_positive(name: str, value: Optional[float], allow_inf: bool = True) -> ValidationResult:
    if value is None:
        return ValidationResult(True, cleaned_value=None)
    if math.isnan(value) or value <= 0:
        return ValidationResult(False, f"{name} must be positive, got {value}")
    if math.isinf(value) and not allow_inf:
        return ValidationResult(False, f"{name} must be finite")
    return ValidationResult(True, cleaned_value=float(value))


def validate_fraction(name: str, value: Optional[float]) -> ValidationResult:
    if value is None:
        return ValidationResult(True, cleaned_value=None)
    if not (0.0 < value <= 1.0):
        return ValidationResult(False, f"{name} must lie in (0, 1], got {value}")
    return ValidationResult(True, cleaned_value=float(value))


def validate_criterion(name: str) -> ValidationResult:
    name = (name or "").strip().lower()
    if name not in VALID_CRITERIA:
        return ValidationResult(False, f"Unknown criterion '{name}'; choose from {', '.join(VALID_CRITERIA)}")
    return ValidationResult(True, cleaned_value=name)


def validate_exit_index(exit_index: int, n_exits: int) -> ValidationResult:
    if not (1 <= exit_index <= n_exits):
        return ValidationResult(False, f"Exit index {exit_index} outside [1, {n_exits}]")
    return ValidationResult(True, cleaned_value=int(exit_index))


def validate_schedule(schedule: List[int], n_exits: int) -> ValidationResult:
    """A time-progressive schedule must be non-decreasing with entries in [1, N]."""
    if not schedule:
        return ValidationResult(False, "Schedule must not be empty")
    for value in schedule:
        if not (1 <= value <= n_exits):
            return ValidationResult(False, f"Schedule entry {value} outside [1, {n_exits}]")
    if any(b < a for a, b in zip(schedule, schedule[1:])):
        return ValidationResult(False, "Schedule must be non-decreasing")
    return ValidationResult(True, cleaned_value=[int(v) for v in schedule])


def require(result: ValidationResult) -> Any:
    """Return the cleaned value or raise ValidationError."""
    if not result:
        raise ValidationError(result.error_message)
    return result.cleaned_value
