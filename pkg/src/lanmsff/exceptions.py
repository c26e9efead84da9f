"""
Exception hierarchy for lanmsff.

Every error raised on purpose by the package derives from ``LanmsffError`` so
callers (and the CLI) can separate library failures from programming errors.
The categories mirror the places things go wrong: tensor shapes, the
autograd tape, configuration, weight files, datasets and training.
"""

from typing import Optional, Sequence


class LanmsffError(Exception):
    """Root of every error raised deliberately by lanmsff."""


class ShapeMismatchError(LanmsffError, ValueError):
    """
    Raised when an operation receives inputs whose extents it cannot combine.

    The message always names the operation and the offending extents, e.g.
    ``conv2d: input has 3 channels, spec expects 1``.
    """

    def __init__(self, op_id: str, detail: str):
        self.op_id = op_id
        super().__init__(f"{op_id}: {detail}")


class GraphError(LanmsffError):
    """Raised for misuse of the recording tape."""


class NonScalarLossError(GraphError):
    """``backward`` was called on a tensor with more than one element."""


class EmptyTapeError(GraphError):
    """``backward`` was called but nothing was recorded for the loss."""


class ConfigurationError(LanmsffError, ValueError):
    """A configuration combination violates an architectural constraint."""


class ShapeTraceError(LanmsffError):
    """
    A block boundary produced a (C, H, W) different from the trace table.

    Example:
        ``block3: expected (78, 8, 8), got (78, 7, 7)``
    """

    def __init__(self, block: str, expected: Sequence[int], actual: Sequence[int]):
        self.block = block
        super().__init__(
            f"{block}: expected {tuple(expected)}, got {tuple(actual)}"
        )


class SerializationError(LanmsffError):
    """Base class for weight-file failures."""


class ConfigMismatchError(SerializationError):
    """The weight file was written for a different architecture."""


class TruncatedPayloadError(SerializationError):
    """The weight file ends before its declared length."""


class ChecksumError(SerializationError):
    """The weight file's trailing checksum does not match its contents."""


class DatasetError(LanmsffError):
    """Base class for dataset ingestion failures."""


class DatasetFormatError(DatasetError):
    """
    A dataset row is malformed.

    Attributes:
        row: 1-based line number in the source file (header is line 1), or
            None when the failure is not tied to one row.
    """

    def __init__(self, reason: str, row: Optional[int] = None):
        self.row = row
        self.reason = reason
        where = f"row {row}: " if row is not None else ""
        super().__init__(f"{where}{reason}")


class UnknownIdentifierError(DatasetError):
    """A pose-index identifier does not match any sample."""


class SchemaMismatchError(LanmsffError, ValueError):
    """The label schema does not agree with the model's class count."""


class TrainingError(LanmsffError):
    """Base class for optimisation failures."""


class NonFiniteGradientError(TrainingError):
    """An optimizer step saw NaN/Inf in a gradient; nothing was updated."""

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for parameter '{parameter}'")


class EmptySplitError(TrainingError):
    """A training or validation split holds no samples."""


class RecordTypeRequiredError(TypeError):
    """
    Raised when a RecordLog subclass doesn't specify a record type.

    Example:
    ```python
        # This will raise RecordTypeRequiredError
        class BadLog(RecordLog):
            pass

        # Correct way
        class EpochLog(RecordLog[EpochRecord]):
            pass
    ```
    """
