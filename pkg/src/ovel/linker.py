"""Two-stage linking: retrieval candidates, then LLM choice among them."""

from __future__ import annotations

import logging
import re
from collections import Counter
from typing import Mapping, Sequence

from ovel.datamodel import CandidateSet, Embedding, KnowledgeBase, MemoryBlock, RunConfig
from ovel.embedding import TextEmbedder, fuse
from ovel.errors import GatewayError, NoSignal, ZeroVector
from ovel.gateway import Gateway, PromptTemplate, format_candidate_lines, label_for, load_templates, render
from ovel.memory import memory_query_embedding
from ovel.retrieval import KbIndex, top_k

log = logging.getLogger(__name__)

_WORD = re.compile(r"[A-Za-z0-9]+")


def parse_choice(completion: str, labels: Sequence[str]) -> str | None:
    """First label that appears as a standalone token, or ``None``."""
    wanted = set(labels)
    for m in _WORD.finditer(completion):
        if m.group(0) in wanted:
            return m.group(0)
    return None


def memory_query(mem: MemoryBlock, window_image_embs: Sequence[Embedding],
                 embedder: TextEmbedder, alpha_text: float) -> Embedding:
    """Retrieval query from memory text and window keyframes."""
    try:
        text = memory_query_embedding(mem, embedder)
    except ZeroVector:
        text = None
    if text is None and not window_image_embs:
        raise NoSignal("no memory text and no keyframes")
    try:
        return fuse(text, list(window_image_embs), alpha_text)
    except ZeroVector as exc:
        raise NoSignal(str(exc)) from exc


def link(mem: MemoryBlock, window_image_embs: Sequence[Embedding], index: KbIndex,
         kb: KnowledgeBase, gateway: Gateway, config: RunConfig, embedder: TextEmbedder,
         templates: Mapping[str, PromptTemplate] | None = None,
         faults: Counter | None = None) -> tuple[str, CandidateSet]:
    """Retrieve ``k_candidates`` entities, then let the backend pick one.

    Backend faults and unmappable answers fall back to the top-ranked
    candidate. Raises :class:`NoSignal` when no query can be formed.
    """
    query = memory_query(mem, window_image_embs, embedder, config.alpha_text)
    candidates = top_k(index, query, config.k_candidates)
    if len(candidates) == 1:
        return candidates.ids[0], candidates
    labels = [label_for(i) for i in range(len(candidates))]
    templates = templates or load_templates(config.templates_dir)
    prompt = render(templates["choice"], {
        "memory": mem.serialize(),
        "candidates": format_candidate_lines(labels, (kb.get(e).display() for e in candidates.ids)),
    })
    try:
        reply = gateway.complete(prompt, "choice")
    except GatewayError as exc:
        log.info("choice failed, using retrieval top-1: %s", exc)
        if faults is not None:
            faults["choice"] += 1
        return candidates.ids[0], candidates
    label = parse_choice(reply, labels)
    if label is None:
        if faults is not None:
            faults["choice_unmappable"] += 1
        return candidates.ids[0], candidates
    return candidates.ids[labels.index(label)], candidates
