"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
DataError -> 4. Everything else is a bug and propagates.
"""


class ToolkitError(Exception):
    """Base class for expected, user-facing failures."""


class ConfigError(ToolkitError):
    """Invalid configuration: unknown key, bad value, missing required setting."""


class FormatError(ToolkitError):
    """Malformed or unsupported input file (WAV, stack, checkpoint, manifest, trials)."""


class DataError(ToolkitError):
    """Numerically degenerate or infeasible data (zero-energy noise, single-class labels, ...)."""
