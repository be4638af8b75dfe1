"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ValueError):
    """A tensor received or produced NaN/Inf values."""


class TapeError(RuntimeError):
    """Gradient tape misuse, e.g. backward from a node the tape never recorded."""


class OracleError(RuntimeError):
    """The finite-difference oracle cannot trust its own measurements."""


class ManifestError(ValueError):
    """Manifest file failed to parse or validate."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class VocabularyError(ValueError):
    """Word-vector file failed to parse."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class FeatureFileError(ValueError):
    """Base class for feature-store file problems."""


class FeatureFormatError(FeatureFileError):
    """Bad magic bytes or malformed header."""


class FeatureTruncationError(FeatureFileError):
    """Payload shorter or longer than the header declares."""


class FeatureConsistencyError(FeatureFileError):
    """Conv activations disagree with the pooled feature vectors."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointParseError(CheckpointError):
    """Checkpoint file is not parseable; carries the byte offset."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is unknown to this build."""
