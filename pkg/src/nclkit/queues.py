"""FIFO queues of train query embeddings and test-time bias computation.

At test time the unknown query distribution is approximated by the last K
train queries. A rectangular K x N scaling of the queue-vs-test-item
similarity matrix yields per-item biases; the queue-side scales are
discarded because the queued queries are never retrieved against. When the
queue holds exactly the test queries this reproduces direct test-matrix
normalization bit for bit.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .embeddings import (
    HEADER,
    EmbeddingSet,
    Modality,
    SimilarityMatrix,
    _frozen,
    cosine_similarity_matrix,
    embeddings_from_bytes,
    write_embeddings,
)
from .errors import DimensionMismatch, EmptyQueue, FileFormatError, ModalityMismatch
from .sinkhorn import MarginalPrior, SinkhornOptions, _compute_biases_stats

DEFAULT_CAPACITY = 16384
FOOTER = struct.Struct("<I")
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class TestTimeBiases:
    """Per-item additive biases derived from a query queue.

    ``work_entries`` counts matrix cells touched (similarity construction
    plus two log-sum-exp sweeps per iteration); it grows linearly in the
    queue size for a fixed item count. ``warning`` is set when the queue was
    only partially filled.
    """

    item_biases: np.ndarray
    gamma: float
    queue_size_used: int
    work_entries: int = 0
    warning: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "item_biases", _frozen(self.item_biases))


class QueryQueue:
    """Fixed-capacity FIFO of unit-norm query embeddings.

    Single writer; :meth:`snapshot` returns an immutable copy that is safe
    to read while pushes continue. Duplicates from revisited samples are
    kept.
    """

    def __init__(self, modality: Modality, dim: int, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.modality = modality
        self.dim = dim
        self.capacity = capacity
        self.total_pushed = 0
        self._buffer: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buffer)

    def push_batch(self, batch: EmbeddingSet | np.ndarray) -> "QueryQueue":
        """Append rows in order, evicting oldest entries beyond capacity.

        Accepts an :class:`EmbeddingSet` (modality checked) or a raw array
        of unit-norm rows, which may be empty.
        """
        if isinstance(batch, EmbeddingSet):
            if batch.modality is not self.modality:
                raise ModalityMismatch(
                    f"queue stores {self.modality.name} queries, got {batch.modality.name}"
                )
            rows = batch.vectors
        else:
            rows = np.atleast_2d(np.asarray(batch, dtype=np.float64))
            if rows.size == 0:
                return self
        if rows.shape[1] != self.dim:
            raise DimensionMismatch(f"queue dim is {self.dim}, batch rows have {rows.shape[1]}")
        norms = np.linalg.norm(rows, axis=1)
        if np.abs(norms - 1.0).max() > UNIT_TOL:
            raise ValueError("queued queries must be unit-norm within 1e-6")
        for row in rows:
            self._buffer.append(np.array(row, copy=True))
        self.total_pushed += rows.shape[0]
        return self

    def snapshot(self) -> EmbeddingSet:
        """Immutable copy of the buffer, oldest entry first."""
        if not self._buffer:
            raise EmptyQueue("queue has no entries to snapshot")
        return EmbeddingSet(modality=self.modality, vectors=np.stack(list(self._buffer)))

    def truncated(self, size: int) -> "QueryQueue":
        """New queue holding only the most recent ``size`` entries."""
        if size < 1:
            raise ValueError(f"size must be >= 1, got {size}")
        size = min(size, len(self._buffer))
        if not self._buffer:
            raise EmptyQueue("cannot truncate an empty queue")
        out = QueryQueue(self.modality, self.dim, capacity=max(size, 1))
        rows = np.stack(list(self._buffer)[-size:])
        out.push_batch(rows)
        return out

    def save(self, path) -> None:
        """EMB1 payload followed by a 4-byte little-endian capacity footer."""
        write_embeddings(path, self.snapshot())
        with open(path, "ab") as fh:
            fh.write(FOOTER.pack(self.capacity))

    @classmethod
    def load(cls, path) -> "QueryQueue":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < HEADER.size + FOOTER.size:
            raise FileFormatError(f"{path}: too short for a queue checkpoint")
        (capacity,) = FOOTER.unpack_from(data, len(data) - FOOTER.size)
        snapshot = embeddings_from_bytes(data[: -FOOTER.size], source=str(path))
        queue = cls(snapshot.modality, snapshot.dim, capacity=capacity)
        # f32 storage perturbs norms by ~1e-8, still within the unit tolerance;
        # the values are kept bit-identical to what an EMB1 reader would see.
        queue.push_batch(snapshot.vectors)
        queue.total_pushed = snapshot.n
        return queue


def test_time_biases(
    queue: QueryQueue,
    test_items: EmbeddingSet,
    gamma: float,
    opts: SinkhornOptions = SinkhornOptions(),
) -> TestTimeBiases:
    """Item-side biases from a rectangular scaling of queue-vs-item scores.

    Builds the K x N similarity matrix between queued queries and test
    items, scales it against uniform marginals (1/K, 1/N), and keeps only
    the item-side result.
    """
    if len(queue) == 0:
        raise EmptyQueue("cannot normalize against an empty query queue")
    if queue.dim != test_items.dim:
        raise DimensionMismatch(f"queue dim {queue.dim} != item dim {test_items.dim}")
    queries = queue.snapshot()
    sims = cosine_similarity_matrix(queries, test_items)
    k, n = sims.shape
    biases, iters = _compute_biases_stats(sims, gamma, MarginalPrior.uniform(k, n), opts)
    warning = None
    if len(queue) < queue.capacity:
        warning = (
            f"queue holds {len(queue)} of {queue.capacity} entries; "
            "normalization uses a partial query sample"
        )
    return TestTimeBiases(
        item_biases=biases.item_biases,
        gamma=gamma,
        queue_size_used=k,
        work_entries=k * n * (1 + 2 * iters),
        warning=warning,
    )


def oracle_test_biases(
    test_queries: EmbeddingSet,
    test_items: EmbeddingSet,
    gamma: float,
    opts: SinkhornOptions = SinkhornOptions(),
) -> TestTimeBiases:
    """Direct test-matrix normalization: the queue is the test queries themselves.

    Shares the code path of :func:`test_time_biases` exactly, so a queue
    containing the test queries reproduces these biases bit for bit.
    """
    queue = QueryQueue(test_queries.modality, test_queries.dim, capacity=test_queries.n)
    queue.push_batch(test_queries)
    return test_time_biases(queue, test_items, gamma, opts)


def apply_test_biases(
    sims_test: SimilarityMatrix,
    t2v_biases: TestTimeBiases,
    v2t_biases: TestTimeBiases,
) -> SimilarityMatrix:
    """Add both directions' item-side biases to the test similarity matrix.

    ``t2v_biases`` holds per-column (video) offsets from the text queue;
    ``v2t_biases`` holds per-row (text) offsets from the video queue:
    ``out[i, j] = a[i] + b[j] + S[i, j]``.
    """
    m, n = sims_test.shape
    if v2t_biases.item_biases.size != m:
        raise DimensionMismatch(
            f"row-side biases have {v2t_biases.item_biases.size} entries for {m} rows"
        )
    if t2v_biases.item_biases.size != n:
        raise DimensionMismatch(
            f"column-side biases have {t2v_biases.item_biases.size} entries for {n} columns"
        )
    values = sims_test.values + v2t_biases.item_biases[:, None] + t2v_biases.item_biases[None, :]
    return SimilarityMatrix(values, row_ids=sims_test.row_ids, col_ids=sims_test.col_ids)
