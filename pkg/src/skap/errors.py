"""Exception types shared across the package."""


class UsageError(ValueError):
    """Raised when a caller violates an argument contract (shapes, grids, names)."""


class IntegrationError(RuntimeError):
    """Raised when a trajectory produces non-finite values.

    Carries the step index at which the blow-up was detected so rate
    studies can report which (eps, dt, sample) diverged.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """Raised for invalid experiment configuration files (CLI exit code 2)."""

    def __init__(self, diagnostics):
        if isinstance(diagnostics, str):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))
