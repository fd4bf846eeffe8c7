"""Exception types shared across the package.

CLI exit codes map onto these: usage errors exit 1, DataError exits 2,
NumericError exits 3.
"""


class DataError(Exception):
    """Invalid or inconsistent input data (files, geometries, masks)."""


class NumericError(Exception):
    """Numerical failure, e.g. a non-finite loss or gradient."""
