"""Error hierarchy shared by the CLI and the numerical modules.

Each error carries the process exit code the CLI reports for it.
"""


class OTSSLError(Exception):
    exit_code: int = 1


class ConfigurationError(OTSSLError, ValueError):
    exit_code = 1


class InvalidParameterError(OTSSLError, ValueError):
    exit_code = 1


class PersistenceError(OTSSLError):
    exit_code = 2


class ResumeMismatchError(PersistenceError):
    """Existing results were produced by a different configuration."""


class NumericalError(OTSSLError):
    exit_code = 3


class DegenerateInputError(NumericalError, ValueError):
    """A channel has no mass left after the min-offset (constant image)."""


class InfeasibleError(NumericalError):
    """Transport marginals carry different total mass."""


class ShapeError(NumericalError, ValueError):
    pass


class StatisticsError(NumericalError, ValueError):
    pass


class ReportError(OTSSLError):
    exit_code = 3
