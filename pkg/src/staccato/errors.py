"""Exception hierarchy shared across the package.

Everything raised on bad data derives from ``StaccatoError`` so the CLI
can map failures to exit codes in one place.
"""

from __future__ import annotations


class StaccatoError(Exception):
    """Base class for all errors raised by this package."""


class SfaSyntaxError(StaccatoError):
    """Malformed sfa-v1 text. Carries the 1-based line and column."""

    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class SfaValidationError(StaccatoError):
    """An SFA violated a model invariant; ``diagnostics`` lists each one."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class CapExceededError(StaccatoError):
    """An enumeration would have produced more items than the caller's cap."""


class RegionError(StaccatoError):
    """A node set handed to collapse does not form a valid sub-SFA."""


class PatternSyntaxError(StaccatoError):
    """Malformed query pattern. Carries the 0-based position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"pos {pos}: {message}")
        self.pos = pos


class StoreError(StaccatoError):
    """Corpus directory problems: missing artifacts, checksum mismatch, locks."""


class DegenerateModelError(StaccatoError):
    """The size-model design matrix is rank deficient."""
