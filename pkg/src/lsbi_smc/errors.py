"""Exception hierarchy shared by all pipeline stages."""


class LSBIError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(LSBIError, ValueError):
    """Invalid argument or configuration value."""


class NumericalError(LSBIError, ArithmeticError):
    """A numerical routine failed (singular system, eigensolver failure, ...)."""


class SimulationError(NumericalError):
    """Simulator failure for a specific parameter sample."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(LSBIError):
    """A container file has the wrong magic, version or layout."""


class ChecksumError(FormatError):
    """A container file failed its CRC check."""


class ModelCorruptionError(LSBIError):
    """Network parameters contain non-finite values."""


class TrainingDivergedError(LSBIError):
    """Training produced a non-finite loss.

    ``model`` holds the network restored to the last finite checkpoint.
    """

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


class DivergentIntegralError(NumericalError):
    """The latent likelihood integral does not exist (u_d >= 1).

    ``rows`` lists offending batch rows (empty for scalar calls), ``dims``
    the offending latent dimensions and ``values`` carries the finite
    results for every other row (NaN at offending rows).
    """

    def __init__(self, message, rows=(), dims=(), values=None):
        super().__init__(message)
        self.rows = list(rows)
        self.dims = list(dims)
        self.values = values


class MaxRoundsExceeded(LSBIError):
    """The SMC sampler did not reach beta = 1 within the round cap."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
