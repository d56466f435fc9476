"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: usage problems exit 1,
DataError exits 2, NumericError exits 3.
"""


class VoxBeliefError(Exception):
    """Base class for all package errors."""


class DataError(VoxBeliefError):
    """Malformed or inconsistent input data (files, shapes, ranges)."""


class NumericError(VoxBeliefError):
    """Non-finite values or other numeric failure during computation."""


class CheckpointError(DataError):
    """Invalid model checkpoint file.

    ``reason`` is a stable machine-readable tag: "magic", "version",
    "truncated" or "shape".
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason
