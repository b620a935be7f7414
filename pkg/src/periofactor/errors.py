"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: configuration problems exit 2,
data validation problems exit 3, numerical failures exit 4.
"""


class PeriofactorError(Exception):
    pass


class ConfigurationError(PeriofactorError):
    """Bad option, unknown key, or an unusable combination of settings."""


class UnsupportedConfigurationError(ConfigurationError):
    """The requested computation is not defined for this model variant."""


class DataValidationError(PeriofactorError):
    """A dataset violates a structural invariant (names the offending row)."""


class DomainError(PeriofactorError, ValueError):
    """A numeric argument lies outside its mathematical domain."""


class NumericalError(PeriofactorError):
    """A linear-algebra or sampling step failed numerically."""
