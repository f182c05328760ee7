"""Exception hierarchy shared by all qfsim modules.

Every error raised by the public API derives from ``QfsimError`` so callers
can catch one base type. The CLI maps subclasses onto its exit-code contract
(2 for bad inputs, 3 for numerical failures).
"""


class QfsimError(Exception):
    """Base class for all qfsim errors."""


class ShapeMismatchError(QfsimError):
    """Operands have incompatible shapes."""


class NonFiniteError(QfsimError):
    """A tensor contains NaN or Inf where finite values are required."""


class IoError(QfsimError):
    """Filesystem read/write failed."""


class CorruptContainerError(QfsimError):
    """A tensor or model container failed structural validation."""


class InvalidParamsError(QfsimError):
    """Quantizer parameters violate their invariants (bad delta, group count...)."""


class EmptyGroupError(QfsimError):
    """Statistics requested over an empty group of values."""


class QOutOfRangeError(QfsimError):
    """Quantile argument outside [0, 1]."""


class NotObservedError(QfsimError):
    """Observer finalized before seeing any data."""


class MissingTraceError(QfsimError):
    """Backward pass requested without a matching forward trace."""


class AlreadyQuantizedError(QfsimError):
    """Quantizers attached to a model that already has them."""


class DivergedLossError(QfsimError):
    """Training loss became non-finite."""


class InvalidConfigError(QfsimError):
    """A pipeline configuration violates its invariants."""


class EmptyDatasetError(QfsimError):
    """A training/calibration dataset contains no samples."""


class ArchitectureMismatchError(QfsimError):
    """Two models expected to share an architecture do not."""


class InvalidSpecError(QfsimError):
    """A toy-model spec is malformed (zero depth, bad widths...)."""


# Exit codes used by the CLI. Input problems (missing/corrupt files, bad
# configs, shape errors) map to 2; numerical failures (divergence, NaN,
# failed calibration) map to 3.
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

INPUT_ERRORS = (
    ShapeMismatchError,
    IoError,
    CorruptContainerError,
    InvalidConfigError,
    InvalidSpecError,
    EmptyDatasetError,
    ArchitectureMismatchError,
    AlreadyQuantizedError,
    QOutOfRangeError,
)

NUMERICAL_ERRORS = (
    NonFiniteError,
    DivergedLossError,
    InvalidParamsError,
    NotObservedError,
    EmptyGroupError,
    MissingTraceError,
)
