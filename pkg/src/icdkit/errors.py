"""Exception types shared across the toolkit.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific one that applies.
"""


class ConfigError(Exception):
    """Invalid configuration: bad values, missing seeds, unknown keys."""


class DataError(Exception):
    """Invalid data: malformed files, schema violations, inconsistent inputs."""


class NumericError(Exception):
    """A computation is undefined or failed: empty denominators, non-finite values."""
