"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration file or inconsistent run parameters."""


class SolverError(RuntimeError):
    """An iterative solver failed to converge.

    Carries optional diagnostic payloads so callers can flush partial
    results (residual histories, path traces, completed records).
    """

    def __init__(self, message, history=None, trace=None):
        super().__init__(message)
        self.history = history
        self.trace = trace
