"""Shared helpers: epsilon parsing, dtype-safe budgets, atomic file writes, errors."""

from __future__ import annotations

import os
import tempfile
from fractions import Fraction

import numpy as np

# Hard visual-stealth budget for perturbation edits, in [0, 1] pixel units.
STEALTH_EPSILON = Fraction(8, 255)


class TrainwreckError(Exception):
    """Base class for toolkit errors."""


class FormatError(TrainwreckError):
    """A file or record does not conform to its documented format."""


class RecipeVersionError(FormatError):
    """A recipe file declares an unsupported format version."""


class RecipeMismatchError(TrainwreckError):
    """A recipe was applied to a dataset it was not crafted for."""


class WeakHashError(TrainwreckError):
    """A brute-forceable digest algorithm was requested without the insecure flag."""


class ConfigError(TrainwreckError):
    """Invalid model or training configuration."""


class ComparisonError(TrainwreckError):
    """Two evaluation reports are not comparable (mismatched run metadata)."""


class NonFiniteLossError(TrainwreckError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


def parse_epsilon(value) -> float:
    """Parse a perturbation budget given as a float or an exact rational string.

    Accepts floats, decimal strings ("0.03"), and rational strings ("8/255").
    """
    if isinstance(value, (int, float)):
        result = float(value)
    elif isinstance(value, str):
        try:
            result = float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"cannot parse epsilon {value!r}: {exc}") from None
    else:
        raise ValueError(f"epsilon must be a number or string, got {type(value).__name__}")
    if not np.isfinite(result):
        raise ValueError(f"epsilon must be finite, got {value!r}")
    return result


def format_epsilon(value) -> str:
    """Canonical text form of an epsilon value; strings pass through unchanged."""
    if isinstance(value, str):
        parse_epsilon(value)  # validate
        return value.strip()
    return repr(float(value))


def dtype_floor(value: float, dtype=np.float32):
    """Largest value representable in `dtype` that does not exceed `value`.

    Casting 8/255 to float32 rounds *up*, so clipping at the naive cast would
    break a zero-tolerance `<= 8/255` check done in float64. Clip at this
    floor instead.
    """
    cast = np.asarray(value, dtype=dtype)
    if float(cast) > value:
        cast = np.nextafter(cast, np.asarray(0.0, dtype=dtype))
    return dtype(cast)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file atomically (temp file + rename in the destination directory)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
