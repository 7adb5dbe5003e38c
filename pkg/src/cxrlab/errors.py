"""Shared exception hierarchy.

Exit-code mapping in the CLI: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class CxrlabError(Exception):
    """Base class for all workbench errors."""


class ConfigError(CxrlabError):
    """Bad or unknown configuration."""


class DataError(CxrlabError):
    """Problems with input data (files, shapes, ids)."""


class NumericalError(CxrlabError):
    """Numerical failure (non-finite loss, degenerate covariance, ...)."""


# --- data / ingestion ---

class FormatError(DataError):
    """Input file does not parse under the documented format."""


class RangeError(DataError):
    """Pixel values exceed the declared source range."""


class MissingSection(DataError):
    """No impression marker found in a report."""


# --- metrics ---

class ShapeMismatch(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroVector(DataError):
    pass


class DegenerateCovariance(NumericalError):
    pass


# --- encoder bench ---

class StrategyUnavailable(DataError):
    pass


class KTooLarge(DataError):
    pass


class TooFewPoints(DataError):
    pass


# --- projection / training ---

class DimMismatch(DataError):
    pass


class NoPairs(DataError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


# --- diffusion core ---

class InvalidRange(ConfigError):
    pass


class TOutOfRange(DataError):
    pass


class InconsistentDims(ConfigError):
    pass


# --- finetune ---

class DuplicateToken(DataError):
    pass


class TokenNotInCaption(DataError):
    pass


class EmptyPriorSet(ConfigError):
    pass


# --- eval harness ---

class SingleClassOnly(DataError):
    pass
