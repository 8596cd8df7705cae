"""Exception types shared across the package."""


class MicarError(Exception):
    """Base class for all package errors."""


class DimensionError(MicarError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(MicarError, ValueError):
    """A configuration value violates a structural constraint."""


class ContractError(MicarError, ValueError):
    """A caller broke an operation's precondition."""


class VocabularyError(MicarError, KeyError):
    """A token id or token falls outside the vocabulary."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DataLoadError(MicarError, IOError):
    """A dataset file is missing or malformed."""


class NonFiniteError(MicarError, FloatingPointError):
    """Training produced a NaN or Inf."""
