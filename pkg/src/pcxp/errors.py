"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numeric aborts exit 3.
"""


class PcxpError(Exception):
    """Base class for package errors."""


class ConfigError(PcxpError):
    """Malformed or inconsistent configuration (unknown key, bad value)."""


class DataError(PcxpError):
    """Broken dataset, manifest, or point-cloud file."""


class CheckpointError(PcxpError):
    """Unreadable checkpoint or one that does not fit the target model."""


class NumericError(PcxpError):
    """Non-finite value produced where finite math is required.

    Raised instead of letting NaN/Inf propagate; training aborts the step
    with a diagnostic when it sees this.
    """
