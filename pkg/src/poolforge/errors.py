"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError / ContractError -> 4.
"""


class PoolforgeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PoolforgeError):
    """Invalid configuration: bad extents, unknown architecture, bad file keys."""


class DimensionError(ConfigError):
    """Tensor shapes incompatible for the requested operation."""


class DataError(PoolforgeError):
    """Unreadable, corrupt, or structurally invalid data files."""


class FormatError(DataError):
    """Record file violates the binary format (bad magic, length, checksum)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(PoolforgeError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class ContractError(PoolforgeError):
    """A runtime contract was violated (non-scalar loss, bad similarity rows)."""
