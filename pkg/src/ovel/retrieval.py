"""Exact top-k cosine search over knowledge-base entities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ovel.datamodel import CandidateSet, Embedding, KnowledgeBase
from ovel.embedding import fuse
from ovel.errors import DimMismatch, ZeroVector

SCORE_DECIMALS = 12


@dataclass(frozen=True, eq=False)
class KbIndex:
    """Unit-norm entity rows, ordered by ascending ``entity_id``."""

    entity_ids: tuple[str, ...]
    matrix: np.ndarray
    alpha_text: float

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.entity_ids)

    def row(self, entity_id: str) -> Embedding:
        return Embedding.from_array(self.matrix[self.entity_ids.index(entity_id)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KbIndex):
            return NotImplemented
        return (self.entity_ids == other.entity_ids and self.alpha_text == other.alpha_text
                and np.array_equal(self.matrix, other.matrix))


def build_index(kb: KnowledgeBase, alpha_text: float) -> KbIndex:
    entities = sorted(kb.entities, key=lambda e: e.entity_id)
    rows = []
    for ent in entities:
        text = ent.text_embedding if ent.text_embedding.norm() > 0 else None
        images = [ent.image_embedding] if ent.image_embedding is not None else []
        if images and images[0].norm() == 0:
            images = []
        if text is None and not images:
            raise ZeroVector("entity has no usable embedding", entity_id=ent.entity_id)
        rows.append(fuse(text, images, alpha_text).values)
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    matrix.setflags(write=False)
    return KbIndex(tuple(e.entity_id for e in entities), matrix, alpha_text)


def top_k(index: KbIndex, query: Embedding, k: int) -> CandidateSet:
    """The ``k`` rows most cosine-similar to ``query``.

    Scores are rounded to 12 decimals so that mathematically equal cosines
    tie; ties are broken by ascending ``entity_id``. ``k`` larger than the
    index returns every entity.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if query.dim != index.dim:
        raise DimMismatch(f"query dim {query.dim} != index dim {index.dim}")
    q = query.as_array()
    norm = float(np.linalg.norm(q))
    if norm <= 1e-12:
        raise ZeroVector("query has zero norm")
    scores = np.round(np.clip(index.matrix @ (q / norm), -1.0, 1.0), SCORE_DECIMALS)
    # rows are id-sorted, so row position is the tie-break key
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return CandidateSet(
        items=tuple((index.entity_ids[i], float(scores[i])) for i in order),
        k=k,
    )
