"""Exception types shared across the workbench.

The CLI maps these onto process exit codes (config 2, numerical 3, budget 4).
"""


class GclBenchError(Exception):
    """Base class for all workbench errors."""


class ConfigError(GclBenchError):
    """Invalid configuration value, unknown key, or unusable input file."""


class ParseError(ConfigError):
    """Malformed interaction line; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class NumericalError(GclBenchError):
    """Non-finite loss, divergence, or an unusable numerical state."""


class BudgetError(GclBenchError):
    """An attack budget constraint cannot be met or was violated."""
