"""Exception taxonomy shared across the toolkit."""


class TTAKitError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(TTAKitError):
    """A value is outside its documented range."""


class DimensionError(TTAKitError):
    """Shape or arity mismatch between arguments."""


class FormatError(TTAKitError):
    """A file does not follow its declared binary/text layout."""


class StorageError(TTAKitError):
    """I/O failure while materializing artifacts."""


class ConsistencyError(TTAKitError):
    """Artifacts disagree (fingerprints, id coverage, frozen state)."""


class ConfigError(TTAKitError):
    """Invalid or contradictory pipeline configuration."""


class MissingPrerequisiteError(TTAKitError):
    """A required artifact does not exist yet; message names the producing command."""


class TrainingError(TTAKitError):
    """Optimization diverged or could not proceed."""


class NumericError(TTAKitError):
    """Non-finite values where finite ones are required."""


class SplitError(TTAKitError):
    """Dataset cannot be partitioned as requested."""


class DegenerateTruthError(TTAKitError):
    """Ground-truth vector is constant; ranking against it is undefined."""
