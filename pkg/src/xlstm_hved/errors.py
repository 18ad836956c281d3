"""Error types shared across the package.

The CLI maps :class:`ContractViolation` to exit code 1 and
:class:`ParseError` (plus ``OSError``) to exit code 2.
"""

from .tensor.core import ContractViolation, NumericError


class ParseError(Exception):
    """A file or config could not be decoded; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


__all__ = ["ContractViolation", "NumericError", "ParseError"]
