"""Exception hierarchy used across the package."""


class SynFedError(Exception):
    """Base class for all errors raised by synfed."""


class ShapeError(SynFedError, ValueError):
    """Array dimensions don't agree with the model or dataset."""


class ArchMismatchError(SynFedError, ValueError):
    """Two parameter vectors (or a checkpoint) belong to different architectures."""


class ValidationError(SynFedError, ValueError):
    """A value violates a documented invariant."""


class DatasetFormatError(SynFedError, ValueError):
    """A dataset file could not be parsed.

    ``line`` and ``column`` are 1-based when known.
    """

    def __init__(self, message: str, path=None, line: int | None = None, column: int | None = None):
        self.path = path
        self.line = line
        self.column = column
        loc = ""
        if path is not None:
            loc = str(path)
        if line is not None:
            loc += f":{line}"
            if column is not None:
                loc += f":{column}"
        super().__init__(f"{loc}: {message}" if loc else message)


class TemplateError(SynFedError, ValueError):
    """Prompt template is missing its ``{label}`` slot or has more than one."""


class DivergenceError(SynFedError, FloatingPointError):
    """Training produced a non-finite loss or update."""


class InfeasibleError(SynFedError, ValueError):
    """Requested configuration cannot be satisfied (e.g. more clients than samples)."""


class CheckpointFormatError(SynFedError, ValueError):
    """Checkpoint file is corrupt, truncated or of an unsupported version."""


class ZeroSumError(SynFedError, ArithmeticError):
    """The summed client update is numerically zero, so diversity is undefined."""


class ProtocolError(SynFedError, RuntimeError):
    """Secure aggregation was invoked with an incomplete or inconsistent cohort."""


class ConfigError(SynFedError, ValueError):
    """Experiment configuration failed to parse or validate."""


class ComparabilityError(SynFedError, ValueError):
    """Runs being compared were evaluated on different benchmarks."""
