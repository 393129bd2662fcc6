"""Core embedding operations: normalization, cosine scoring, frame pooling.

Vectors are stored as float32 (the usual export precision of embedding
dumps); dot products and means accumulate in float64 to avoid drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatchError,
    EmptySequenceError,
    NonFiniteError,
    ZeroVectorError,
)

STORAGE_DTYPE = np.float32

# Below this L2 norm a vector carries no usable direction.
ZERO_NORM_EPS = 1e-12


def as_embedding(values, *, name: str = "embedding") -> np.ndarray:
    """Coerce a vector to the storage dtype, rejecting NaN/Inf and empty input."""
    arr = np.asarray(values, dtype=STORAGE_DTYPE)
    if arr.ndim != 1 or arr.size == 0:
        raise DimMismatchError(f"{name} must be a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def l2_normalize(vector) -> np.ndarray:
    """Scale a vector to unit L2 norm, preserving direction."""
    arr = as_embedding(vector)
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if norm <= ZERO_NORM_EPS:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm!r}")
    return (arr.astype(np.float64) / norm).astype(STORAGE_DTYPE)


def is_unit(vector, tol: float = 1e-6) -> bool:
    """True when the L2 norm is within tol of 1."""
    return abs(float(np.linalg.norm(np.asarray(vector, dtype=np.float64))) - 1.0) <= tol


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    va = as_embedding(a, name="a")
    vb = as_embedding(b, name="b")
    if va.shape != vb.shape:
        raise DimMismatchError(f"dim mismatch: {va.shape[0]} vs {vb.shape[0]}")
    a64 = va.astype(np.float64)
    b64 = vb.astype(np.float64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na <= ZERO_NORM_EPS or nb <= ZERO_NORM_EPS:
        raise ZeroVectorError("cosine similarity undefined for zero vectors")
    return float(np.clip(np.dot(a64, b64) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class FrameEmbeddings:
    """Per-frame embeddings of one clip, one row per sampled frame."""

    clip_id: str
    frames: np.ndarray  # shape (num_frames, dim), float32

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=STORAGE_DTYPE)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise EmptySequenceError(
                f"frame embeddings for {self.clip_id!r} must be a non-empty 2-d array"
            )
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"frame embeddings for {self.clip_id!r} contain NaN or Inf")
        object.__setattr__(self, "frames", arr)

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def mean_pool_frames(frames: FrameEmbeddings) -> np.ndarray:
    """Elementwise mean over frames, then unit normalization."""
    mean = frames.frames.astype(np.float64).mean(axis=0)
    return l2_normalize(mean)


def uniform_frame_indices(num_frames: int, k: int) -> list[int]:
    """k center-of-bin sample indices: floor((i + 0.5) * num_frames / k).

    Indices are non-decreasing and repeat when num_frames < k.
    """
    if num_frames < 1 or k < 1:
        raise ValueError("num_frames and k must be positive")
    # Integer form of floor((i + 0.5) * num_frames / k), immune to float rounding.
    return [((2 * i + 1) * num_frames) // (2 * k) for i in range(k)]


def middle_frame_index(num_frames: int) -> int:
    """Index of the middle frame (floor convention)."""
    if num_frames < 1:
        raise ValueError("num_frames must be positive")
    return num_frames // 2
