"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Malformed or inconsistent input (files, configs, arguments)."""


class ErgodicityError(ValueError):
    """The chain is reducible or periodic."""


class EnumerationLimitError(ValueError):
    """An exact enumeration would exceed its configured size limit."""


class ContractionError(ValueError):
    """A contraction condition required by a solver does not hold."""


class SolverError(RuntimeError):
    """A numerical procedure failed to converge or diverged."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
