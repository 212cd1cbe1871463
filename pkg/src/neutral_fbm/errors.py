"""Exception types shared across the package."""

from __future__ import annotations


class NumericalError(RuntimeError):
    """A numerical procedure failed (factorization, instability, overflow)."""


class HorizonError(ValueError):
    """A block index or horizon lies outside the admissible range T <= m*r."""


class ConsistencyError(RuntimeError):
    """Internal bookkeeping mismatch, e.g. derivative data missing for a block."""


class ConfigError(ValueError):
    """Invalid run configuration.

    ``errors`` holds one message per violated rule so that callers can
    report every problem at once instead of failing on the first.
    """

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
