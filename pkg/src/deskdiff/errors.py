"""Exception hierarchy shared across the engine.

The CLI maps these onto stable exit codes: ConfigError -> 2, DataError -> 3,
CheckpointError -> 4, anything numeric/internal -> 5.
"""


class DeskdiffError(Exception):
    """Base class for all engine errors."""


# --- configuration / CLI surface ---

class ConfigError(DeskdiffError):
    pass


class DataError(DeskdiffError):
    pass


# --- tensor core ---

class ShapeMismatchError(DeskdiffError):
    pass


class InternalNumericError(DeskdiffError):
    pass


class NonFiniteError(InternalNumericError):
    """A primitive produced NaN/Inf from finite inputs; message names the op."""


class NotScalarRootError(DeskdiffError):
    pass


class ForwardNotRunError(DeskdiffError):
    pass


class GraphError(DeskdiffError):
    """Leaf binding problems: unbound or unknown leaf names."""


class InvalidStepError(DeskdiffError):
    """Bad finite-difference step size."""


# --- noise schedule ---

class InvalidRangeError(DeskdiffError):
    pass


class StepOutOfRangeError(DeskdiffError):
    pass


class StepOrderError(DeskdiffError):
    """t_prev must satisfy 0 <= t_prev < t <= T."""


# --- conditioning ---

class UnknownWordError(DataError):
    pass


class TagMismatchError(DataError):
    pass


class VocabularyOverflowError(DataError):
    pass


class NegativeScaleError(DeskdiffError):
    pass


# --- denoiser ---

class IndivisibleShapeError(ShapeMismatchError):
    pass


# --- expert bank ---

class InvalidExpertCountError(DeskdiffError):
    pass


# --- trainer ---

class EmptyBatchError(DeskdiffError):
    pass


class CheckpointError(DeskdiffError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionUnsupportedError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


# --- sampler ---

class StepsExceedTError(DeskdiffError):
    pass


class CaptureDisabledError(DeskdiffError):
    pass


# --- metrics ---

class DimensionMismatchError(DeskdiffError):
    pass


class AlignmentMismatchError(DeskdiffError):
    pass
