"""Embedding containers, unit normalization, cosine similarities, and binary I/O.

Embeddings are kept in float64 internally; the on-disk format stores float32
(see :func:`write_embeddings`). All containers are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FileFormatError, ZeroVector

MAGIC = b"EMB1"
HEADER = struct.Struct("<4sIIB3s")  # magic, n, dim, modality, reserved

UNIT_NORM_TOL = 1e-6
ZERO_NORM_FLOOR = 1e-12


class Modality(enum.Enum):
    """Which side of the cross-modal pairing a set of vectors belongs to."""

    TEXT = 0
    VIDEO = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class EmbeddingSet:
    """A modality-tagged collection of vectors with stable integer ids.

    Rows are expected to be unit-norm when produced by :func:`l2_normalize`;
    the constructor only checks shapes, finiteness, and id uniqueness.
    """

    modality: Modality
    vectors: np.ndarray
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        vectors = _frozen(np.atleast_2d(self.vectors))
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise ValueError(f"vectors must be a (N, D) matrix with N, D >= 1, got {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ValueError("vectors contain non-finite entries")
        ids = self.ids
        if ids is None:
            ids = np.arange(vectors.shape[0], dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64).copy()
            if ids.shape != (vectors.shape[0],):
                raise ValueError(f"ids shape {ids.shape} does not match {vectors.shape[0]} rows")
            if len(np.unique(ids)) != len(ids):
                raise ValueError("ids must be unique")
        ids.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class SimilarityMatrix:
    """Dense pairwise scores; rows index queries, columns index items."""

    values: np.ndarray
    row_ids: np.ndarray = field(default=None)  # type: ignore[assignment]
    col_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        values = _frozen(np.atleast_2d(self.values))
        if not np.isfinite(values).all():
            raise ValueError("similarity values contain non-finite entries")
        m, n = values.shape
        row_ids = np.arange(m, dtype=np.int64) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64).copy()
        col_ids = np.arange(n, dtype=np.int64) if self.col_ids is None else np.asarray(self.col_ids, dtype=np.int64).copy()
        if row_ids.shape != (m,) or col_ids.shape != (n,):
            raise ValueError("row_ids/col_ids lengths must match the matrix shape")
        row_ids.flags.writeable = False
        col_ids.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_ids", col_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def transposed(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.values.T, row_ids=self.col_ids, col_ids=self.row_ids)


def l2_normalize(raw: np.ndarray, modality: Modality = Modality.TEXT, ids=None) -> EmbeddingSet:
    """Scale every row of ``raw`` to unit Euclidean norm.

    Raises :class:`ZeroVector` for any row whose norm is below 1e-12;
    zero rows make cosine similarity undefined and are never skipped.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    norms = np.linalg.norm(raw, axis=1)
    bad = np.nonzero(norms < ZERO_NORM_FLOOR)[0]
    if bad.size:
        raise ZeroVector(int(bad[0]))
    return EmbeddingSet(modality=modality, vectors=raw / norms[:, None], ids=ids)


def cosine_similarity_matrix(queries: EmbeddingSet, items: EmbeddingSet) -> SimilarityMatrix:
    """Inner products between every query row and every item row.

    For unit-norm inputs this is the cosine similarity; entries then lie in
    [-1, 1] up to roundoff.
    """
    if queries.dim != items.dim:
        raise DimensionMismatch(
            f"query dim {queries.dim} != item dim {items.dim}"
        )
    values = queries.vectors @ items.vectors.T
    return SimilarityMatrix(values, row_ids=queries.ids, col_ids=items.ids)


def write_embeddings(path, embeddings: EmbeddingSet) -> None:
    """Write an EMB1 file: 16-byte header then float32 little-endian rows.

    Header layout: magic ``EMB1``, u32 N, u32 D, u8 modality (0=text,
    1=video), 3 reserved zero bytes. Values are stored row-major.
    """
    header = HEADER.pack(MAGIC, embeddings.n, embeddings.dim, embeddings.modality.value, b"\x00\x00\x00")
    payload = embeddings.vectors.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_embeddings(path) -> EmbeddingSet:
    """Read an EMB1 file; rejects wrong magic and truncated payloads."""
    with open(path, "rb") as fh:
        data = fh.read()
    return embeddings_from_bytes(data, source=str(path))


def embeddings_from_bytes(data: bytes, source: str = "<bytes>") -> EmbeddingSet:
    if len(data) < HEADER.size:
        raise FileFormatError(f"{source}: too short for an EMB1 header ({len(data)} bytes)")
    magic, n, dim, modality_code, _reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FileFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    try:
        modality = Modality(modality_code)
    except ValueError:
        raise FileFormatError(f"{source}: unknown modality code {modality_code}") from None
    expected = HEADER.size + 4 * n * dim
    if len(data) < expected:
        raise FileFormatError(
            f"{source}: truncated payload, expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise FileFormatError(f"{source}: {len(data) - expected} trailing bytes after payload")
    flat = np.frombuffer(data, dtype="<f4", count=n * dim, offset=HEADER.size)
    vectors = flat.astype(np.float64).reshape(n, dim)
    return EmbeddingSet(modality=modality, vectors=vectors)
