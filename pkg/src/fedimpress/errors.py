"""Exception hierarchy shared across the package."""


class FedImpressError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedImpressError, ValueError):
    """Inconsistent dimensions, schedules or hyperparameters."""


class InputError(FedImpressError, ValueError):
    """Bad argument passed to an operation (shape, range, simplex...)."""


class LabelError(FedImpressError, KeyError):
    """Label id unknown to a model, dataset or score table."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ParseError(FedImpressError, ValueError):
    """Malformed feature or scenario file."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class DegenerateWeightsError(FedImpressError, ValueError):
    """Last-layer weights with a zero-norm column (cosine undefined)."""


class SynthesisDivergenceError(FedImpressError, RuntimeError):
    """Input-space descent produced a non-finite loss."""

    def __init__(self, message: str, sample: int):
        self.sample = sample
        super().__init__(message)
