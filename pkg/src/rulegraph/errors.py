"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: DataError -> 2, NumericError -> 3.
"""


class DataError(ValueError):
    """Malformed input data, missing artifacts, or schema violations."""


class NumericError(RuntimeError):
    """Non-finite values or other numeric failures during optimization."""
