"""Exception types raised across the package."""


class MSCLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MSCLError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ParseError(MSCLError, ValueError):
    """Malformed input file."""

    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class ValidationError(MSCLError, ValueError):
    """Data that parses but violates a dataset or shape invariant."""


class SamplingError(MSCLError, RuntimeError):
    """A sampler could not produce a valid draw within its retry bound."""


class DegenerateVectorError(MSCLError, ArithmeticError):
    """A zero (or numerically zero) vector entered a cosine similarity."""


class TrainingError(MSCLError, RuntimeError):
    """Training aborted: non-finite loss or gradient, or a degenerate batch."""
