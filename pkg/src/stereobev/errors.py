"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericError exits 3.
"""


class DataError(Exception):
    """A file, format, or configuration problem (bad magic, missing sample,
    mismatched checkpoint, out-of-range class index, ...)."""


class NumericError(Exception):
    """A numeric failure that invalidates a run, e.g. NaN loss or NaN gradients."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar backward root, double backward)."""


class HorizonError(ValueError):
    """A pixel ray is at or above the horizon and never meets the ground plane."""
