"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
FormatError subclass) -> 3, NumericsError -> 4.
"""


class SvkitError(Exception):
    pass


class ConfigError(SvkitError):
    """Invalid configuration: unknown key, bad type, out-of-range value."""


class DataError(SvkitError):
    """Invalid data content: broken invariants, missing names, bad labels."""


class FormatError(DataError):
    """Structurally broken file: bad magic, truncation, unparseable line."""


class NumericsError(SvkitError):
    """Numerical failure: divergence, zero variance, non-convergence."""
