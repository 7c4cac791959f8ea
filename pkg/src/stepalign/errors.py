"""Error taxonomy shared across the package.

ConfigurationError maps to CLI exit code 2, UsageError (precondition
violations, including degenerate numerical states) to exit code 3, and
plain OSError to exit code 4.
"""


class StepalignError(Exception):
    pass


class ConfigurationError(StepalignError):
    """Bad shapes, bad hyperparameters, malformed config files."""


class UsageError(StepalignError):
    """An operation was called out of order or outside its precondition."""


class DegenerateStateError(UsageError):
    """A quantity required to be well-conditioned collapsed (zero norm,
    vanishing signal coefficient, zero variance where positive is needed)."""
