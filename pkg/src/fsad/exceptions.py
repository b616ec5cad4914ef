"""Exception types shared across the toolkit."""


class FsadError(Exception):
    """Base class for all toolkit errors."""


class LayoutError(FsadError):
    """Dataset directory does not follow the expected layout."""


class InsufficientAnomaliesError(FsadError):
    """Requested more anomalous shots than the dataset provides."""

    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        super().__init__(
            f"insufficient anomalies: requested k={requested}, "
            f"but only {available} anomalous test images are available"
        )


class ContractError(FsadError, ValueError):
    """An input violates a shape or compatibility contract."""


class DomainError(FsadError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NumericError(FsadError, ArithmeticError):
    """A computation produced non-finite values."""


class CheckpointError(FsadError):
    """A checkpoint file is corrupt or inconsistent with its manifest."""


class UndefinedMetricError(FsadError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class ConfigError(FsadError, ValueError):
    """A configuration file or override is invalid."""
