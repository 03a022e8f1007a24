"""Bounded memory block: summary initialisation, guided updates, formats."""

from __future__ import annotations

import logging
from collections import Counter
from typing import Mapping, Sequence

from ovel.datamodel import CandidateSet, Embedding, KnowledgeBase, MemoryBlock, MemoryFormat, RunConfig
from ovel.embedding import TextEmbedder
from ovel.errors import GatewayError, ZeroVector
from ovel.gateway import Gateway, PromptTemplate, load_templates, render

log = logging.getLogger(__name__)

FORMAT_INSTRUCTIONS = {
    MemoryFormat.STRUCT: (
        "One attribute per line, written as `name: value`, for example\n"
        "brand: <brand>\nmodel: <model>\nNo other text."
    ),
    MemoryFormat.SEMI_STRUCT: (
        "A single line: `product_name: <name>; attributes: key=value, key=value`."
    ),
    MemoryFormat.FREE_TEXT: "A short plain-text note about the product.",
}

_BULLETS = "-*• \t"


def join_transcripts(transcripts: Sequence[str]) -> str:
    """Concatenate clip transcripts, skipping silent clips."""
    return " ".join(t.strip() for t in transcripts if t.strip())


def serialize(mem: MemoryBlock) -> str:
    return mem.serialize()


def _fit(entries: list[tuple[str, str]], fmt: MemoryFormat, cap: int) -> tuple[tuple[str, str], ...]:
    kept: list[tuple[str, str]] = []
    for entry in entries:
        trial = MemoryBlock(tuple(kept + [entry]), fmt, cap)
        if len(trial.serialize()) > cap:
            break
        kept.append(entry)
    return tuple(kept)


def _line_entries(text: str, stats: Counter | None) -> list[tuple[str, str]]:
    entries: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        key = key.strip(_BULLETS)
        if not sep or not key:
            if stats is not None:
                stats["skipped_lines"] += 1
            continue
        entries[key] = value.strip()
    return list(entries.items())


def parse(text: str, fmt: MemoryFormat, cap: int, stats: Counter | None = None) -> MemoryBlock:
    """Parse a completion into a memory block no longer than ``cap`` characters.

    Lines without a colon are skipped and counted in ``stats["skipped_lines"]``.
    A repeated attribute name keeps its first position and its last value.
    """
    fmt = MemoryFormat(fmt)
    if fmt is MemoryFormat.FREE_TEXT:
        raw = text.strip()[:cap].strip()
        return MemoryBlock(((("text", raw),) if raw else ()), fmt, cap)
    if fmt is MemoryFormat.SEMI_STRUCT and "; attributes:" in text:
        head, attrs = text.strip().split("; attributes:", 1)
        entries: list[tuple[str, str]] = []
        key, _, value = head.partition(":")
        if key.strip() == "product_name":
            entries.append(("product_name", value.strip()))
        for pair in attrs.split(","):
            key, sep, value = pair.partition("=")
            if sep and key.strip():
                entries.append((key.strip(), value.strip()))
            elif pair.strip() and stats is not None:
                stats["skipped_lines"] += 1
    else:
        entries = _line_entries(text, stats)
    return MemoryBlock(_fit(entries, fmt, cap), fmt, cap)


def fallback_memory(transcripts: Sequence[str], config: RunConfig) -> MemoryBlock:
    """Raw transcript text truncated to the cap, used when summarisation fails."""
    return parse(join_transcripts(transcripts), MemoryFormat.FREE_TEXT, config.memory_cap_chars)


def summarize(transcripts: Sequence[str], gateway: Gateway, config: RunConfig,
              templates: Mapping[str, PromptTemplate] | None = None,
              faults: Counter | None = None) -> MemoryBlock | None:
    """Summarise transcripts into a fresh memory block; ``None`` if the backend failed."""
    text = join_transcripts(transcripts)
    fmt = config.memory_format
    if not text:
        return MemoryBlock((), fmt, config.memory_cap_chars)
    templates = templates or load_templates(config.templates_dir)
    prompt = render(templates["summary"], {
        "transcript": text,
        "format_instructions": FORMAT_INSTRUCTIONS[fmt],
    })
    try:
        reply = gateway.complete(prompt, "summary")
    except GatewayError as exc:
        log.info("summary failed: %s", exc)
        if faults is not None:
            faults["summary"] += 1
        return None
    return parse(reply, fmt, config.memory_cap_chars, faults)


def init_memory(transcripts: Sequence[str], gateway: Gateway, config: RunConfig,
                templates: Mapping[str, PromptTemplate] | None = None,
                faults: Counter | None = None) -> MemoryBlock:
    mem = summarize(transcripts, gateway, config, templates, faults)
    return mem if mem is not None else fallback_memory(transcripts, config)


def candidate_names(candidates: CandidateSet | None, kb: KnowledgeBase) -> str:
    if candidates is None:
        return ""
    return "\n".join(f"- {kb.get(eid).name}" for eid in candidates.ids)


def update_memory(mem: MemoryBlock, s_t: str, candidates: CandidateSet | None,
                  kb: KnowledgeBase, gateway: Gateway, config: RunConfig,
                  templates: Mapping[str, PromptTemplate] | None = None,
                  faults: Counter | None = None) -> MemoryBlock:
    """One guided update step. Faults and unparsable replies leave ``mem`` as is."""
    templates = templates or load_templates(config.templates_dir)
    prompt = render(templates["memory_update"], {
        "transcript": s_t,
        "memory": mem.serialize(),
        "candidates": candidate_names(candidates, kb),
        "format_instructions": FORMAT_INSTRUCTIONS[config.memory_format],
    })
    try:
        reply = gateway.complete(prompt, "memory_update")
    except GatewayError as exc:
        log.info("memory update failed: %s", exc)
        if faults is not None:
            faults["memory_update"] += 1
        return mem
    updated = parse(reply, config.memory_format, config.memory_cap_chars, faults)
    if not updated.entries:
        if faults is not None:
            faults["memory_unparsable"] += 1
        return mem
    return updated


def memory_query_embedding(mem: MemoryBlock, embedder: TextEmbedder) -> Embedding:
    text = mem.serialize()
    if not text.strip():
        raise ZeroVector("memory is empty")
    emb = embedder.embed(text)
    if emb.norm() == 0:
        raise ZeroVector("memory text has no embeddable tokens")
    return emb
