"""Exception hierarchy. Every error raised on purpose derives from ``FalconError``."""


class FalconError(Exception):
    pass


class DimensionError(FalconError, ValueError):
    """Operand shapes do not compose."""


class ContractError(FalconError, ValueError):
    """A documented precondition was violated by the caller."""


class RegistryError(FalconError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FitError(FalconError, ValueError):
    pass


class DivergenceError(FalconError, FloatingPointError):
    """A training loss became non-finite."""

    def __init__(self, step, term, value):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at step {step}: {term}={value}")


class ConfigError(FalconError, ValueError):
    pass


class DataFormatError(FalconError, ValueError):
    """A data file has the wrong magic number or layout."""


class ConsistencyError(FalconError, ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class CheckpointError(FalconError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class SchemaError(FalconError, ValueError):
    pass


class DataIOError(FalconError, OSError):
    """A data file is truncated or unreadable."""
