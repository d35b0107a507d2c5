# app/errors.py
from __future__ import annotations

from typing import Optional, Sequence


class VlmError(Exception):
    """Base error. `exit_code` is what the command line returns for it."""

    exit_code = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(VlmError):
    exit_code = 1


class DataError(VlmError):
    exit_code = 2


class ShapeError(DataError):
    pass


class EmptyCorpusError(DataError):
    pass


class MissingWeightError(DataError):
    pass


class NonFiniteError(DataError):
    def __init__(self, detail: str, index: Optional[Sequence[int] | int] = None):
        super().__init__(detail)
        self.index = index


class DivergenceError(DataError):
    def __init__(self, detail: str, iteration: int):
        super().__init__(detail)
        self.iteration = iteration


# ---- container format ----

class FormatError(DataError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated payload: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class UnknownDtypeError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class NonFiniteWeightsError(FormatError):
    pass
