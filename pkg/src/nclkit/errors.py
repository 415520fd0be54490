"""Exception types shared across the package."""


class NclError(Exception):
    """Base class for all nclkit errors."""


class ZeroVector(NclError):
    """A row that should be normalizable has (near-)zero Euclidean norm."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has norm below 1e-12; cosine similarity is undefined")


class DimensionMismatch(NclError):
    """Operands disagree on a dimension that must match."""


class ModalityMismatch(NclError):
    """An embedding batch was routed to a container of the other modality."""


class DegenerateMatrix(NclError):
    """A matrix with an all-zero row or column was passed to Sinkhorn scaling."""


class NonFinite(NclError):
    """A computation produced inf or NaN."""


class EmptyQueue(NclError):
    """Test-time normalization was requested from a queue with no entries."""


class MissingGroundTruth(NclError):
    """A query has no ground-truth items."""


class BatchTooSmall(NclError):
    """Contrastive losses need at least two pairs per batch."""


class FileFormatError(NclError):
    """An embedding or queue file has a bad magic, header, or truncated payload."""
