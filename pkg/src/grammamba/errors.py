"""Exception hierarchy shared across the package."""


class GramMambaError(Exception):
    """Base class for all package errors."""


class ContractError(GramMambaError):
    """A caller broke a documented precondition."""


class DimensionError(GramMambaError, ValueError):
    """Tensor shapes do not line up."""


class DomainError(GramMambaError, ValueError):
    """A scalar argument lies outside its valid range."""


class NumericError(GramMambaError, ArithmeticError):
    """A computation produced an unusable numeric result."""


class NonFiniteError(NumericError):
    """NaN or Inf detected."""


class DegenerateFeatureError(NumericError):
    """A feature vector is too close to zero to normalize."""


class ProtocolError(GramMambaError):
    """Adaptation or missing-modality protocol violated."""


class ConfigError(GramMambaError):
    """Invalid or unknown configuration."""


class DataError(GramMambaError):
    """Base class for dataset and checkpoint I/O failures."""


class ManifestMissingError(DataError):
    pass


class FormatError(DataError):
    """Bad magic bytes or malformed header."""


class VersionError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class CompletenessError(DataError):
    """Manifest references files that are not present."""


class CompatibilityError(DataError):
    """Adapter checkpoint does not belong to the given base model."""
