"""Exact cosine similarity search over an immutable set of clip embeddings.

Entries are stored as a contiguous float32 matrix sorted by clip id, so a
query is one matrix-vector product (accumulated in float64). Ties are broken
by ascending clip id, which makes every ranking a total order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .embedding import as_embedding, l2_normalize
from .errors import DimMismatchError, DuplicateIdError, EmptyGalleryError


@dataclass(frozen=True)
class ScoredEntry:
    clip_id: str
    score: float


@dataclass(frozen=True)
class RankedList:
    """Clip ids in retrieval order, best first.

    Index-produced rankings are strictly ordered by (score desc, clip id asc).
    Two-stage pipeline outputs keep that order within each block (re-ranked
    head, visually-ordered tail) rather than globally.
    """

    entries: tuple[ScoredEntry, ...]

    @property
    def ids(self) -> list[str]:
        return [e.clip_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ScoredEntry]:
        return iter(self.entries)

    def first_hit_rank(self, targets: Iterable[str]) -> int | None:
        """1-based rank of the first entry that is a target, None if absent."""
        wanted = set(targets)
        for pos, entry in enumerate(self.entries, start=1):
            if entry.clip_id in wanted:
                return pos
        return None

    def truncate(self, k: int) -> "RankedList":
        return RankedList(self.entries[:k])

    def to_payload(self) -> list[dict]:
        return [{"clip_id": e.clip_id, "score": e.score} for e in self.entries]


class GalleryIndex:
    """Immutable similarity index over (clip_id, embedding) pairs."""

    def __init__(self, records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = list(records.items()) if isinstance(records, Mapping) else list(records)
        if not items:
            raise EmptyGalleryError("gallery must contain at least one clip")
        seen: set[str] = set()
        for clip_id, _ in items:
            if clip_id in seen:
                raise DuplicateIdError(f"duplicate clip id {clip_id!r}")
            seen.add(clip_id)
        items.sort(key=lambda kv: kv[0])

        vectors = [l2_normalize(vec) for _, vec in items]
        dims = {v.shape[0] for v in vectors}
        if len(dims) != 1:
            raise DimMismatchError(f"gallery embeddings have mixed dims: {sorted(dims)}")
        self._ids: tuple[str, ...] = tuple(clip_id for clip_id, _ in items)
        self._matrix = np.stack(vectors)  # (n, dim) float32, row order = sorted ids
        self._pos = {clip_id: i for i, clip_id in enumerate(self._ids)}

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1])

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._pos

    def vector(self, clip_id: str) -> np.ndarray:
        return self._matrix[self._pos[clip_id]]

    def scores(self, query) -> np.ndarray:
        """Cosine of the query against every entry (float64), order = self.ids."""
        q = l2_normalize(as_embedding(query, name="query"))
        if q.shape[0] != self.dim:
            raise DimMismatchError(f"query dim {q.shape[0]} != gallery dim {self.dim}")
        raw = self._matrix.astype(np.float64) @ q.astype(np.float64)
        return np.clip(raw, -1.0, 1.0)

    def _include_mask(self, exclude: Iterable[str] | None) -> np.ndarray:
        mask = np.ones(len(self._ids), dtype=bool)
        for clip_id in exclude or ():
            pos = self._pos.get(clip_id)
            if pos is not None:
                mask[pos] = False
        return mask

    def top_k(self, query, k: int, exclude: Iterable[str] | None = None) -> RankedList:
        """The k best entries under (score desc, clip id asc), exact.

        Uses partial selection, then repairs the tie group at the score
        boundary so the result equals the k-prefix of brute_force_rank.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self.scores(query)
        mask = self._include_mask(exclude)
        positions = np.flatnonzero(mask)
        if positions.size == 0:
            return RankedList(())
        kept = scores[positions]
        k_eff = min(k, positions.size)

        if k_eff < positions.size:
            part = np.argpartition(-kept, k_eff - 1)[:k_eff]
            boundary = kept[part].min()
            cand = np.flatnonzero(kept >= boundary)
        else:
            cand = np.arange(positions.size)
        # Row order is ascending clip id, so index order breaks score ties.
        order = cand[np.lexsort((cand, -kept[cand]))][:k_eff]
        return RankedList(tuple(
            ScoredEntry(self._ids[positions[i]], float(kept[i])) for i in order
        ))


def brute_force_rank(index: GalleryIndex, query, exclude: Iterable[str] | None = None) -> RankedList:
    """Full-gallery ranking by (score desc, clip id asc); the top_k oracle.

    Shares the index's scoring but orders with a plain Python sort, keeping
    the selection machinery independent of top_k.
    """
    scores = index.scores(query)
    excluded = set(exclude or ())
    pairs = [
        (clip_id, float(scores[i]))
        for i, clip_id in enumerate(index.ids)
        if clip_id not in excluded
    ]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return RankedList(tuple(ScoredEntry(cid, s) for cid, s in pairs))
