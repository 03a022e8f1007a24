"""Deterministic planted-signal datasets for end-to-end checks.

Every entity is ``brand line model``. A video's signal clips mention its
ground-truth entity; its noise clips carry interjections and, often, a
same-brand distractor product. Words are drawn so that no two of them share
a hash bucket at the requested dimension, which makes the ground truth the
strict cosine maximum for every signal clip; the generator checks this by
brute force before writing anything.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ovel.dataset_io import MANIFEST_NAME, VIDEOS_DIR, write_clip_stream, write_knowledge_base, write_manifest
from ovel.datamodel import Clip, ClipStream, DatasetManifest, Embedding, Entity, KnowledgeBase
from ovel.embedding import embed_text_deterministic, fuse, token_bucket
from ovel.errors import InvalidParams
from ovel.retrieval import KbIndex, build_index

ALPHA_TEXT = 0.7


def load_vocab() -> dict[str, list[str]]:
    text = resources.files("ovel").joinpath("data", "synth_vocab.json").read_text(encoding="utf-8")
    return json.loads(text)


def _pick_distinct(rng: random.Random, vocab: dict[str, list[str]], sizes: dict[str, int],
                   dim: int) -> dict[str, list[str]]:
    used: set[int] = set()
    for word in vocab["reserved"]:
        b = token_bucket(word, dim)
        if b in used:
            raise InvalidParams(f"dim {dim} too small: reserved words collide")
        used.add(b)
    out: dict[str, list[str]] = {}
    for pool, n in sizes.items():
        words = list(vocab[pool])
        rng.shuffle(words)
        chosen = []
        for w in words:
            if len(chosen) == n:
                break
            b = token_bucket(w, dim)
            if b not in used:
                used.add(b)
                chosen.append(w)
        if len(chosen) < n:
            raise InvalidParams(
                f"dim {dim} too small for a collision-free vocabulary ({pool}: {len(chosen)}/{n})"
            )
        out[pool] = chosen
    return out


def _emb(text: str, dim: int) -> Embedding:
    return Embedding.float32(embed_text_deterministic(text, dim).values)


@dataclass(frozen=True)
class _Parts:
    brand: str
    line: str
    model: str


def _check_planted(index: KbIndex, gt: str, clip: Clip, dim: int) -> None:
    row = list(index.entity_ids).index(gt)
    queries = []
    text = _emb(clip.transcript, dim)
    queries.append(text.as_array())
    if clip.keyframe_embeddings:
        queries.append(fuse(text, list(clip.keyframe_embeddings), ALPHA_TEXT).as_array())
    for q in queries:
        # brute force, one cosine per entity
        sims = [float(np.dot(r, q) / (np.linalg.norm(r) * np.linalg.norm(q))) for r in index.matrix]
        best = sims[row]
        if any(s >= best for i, s in enumerate(sims) if i != row):
            raise AssertionError(f"planted guarantee violated for {gt} at clip {clip.index}")


def generate(seed: int, n_videos: int, clips_per_video: int, kb_size: int, dim: int,
             noise_ratio: float, out_dir: str | Path) -> Path:
    """Write a synthetic dataset to ``out_dir`` and return its path."""
    if n_videos < 1 or clips_per_video < 1 or dim < 1:
        raise InvalidParams("videos, clips and dim must be >= 1")
    if kb_size < max(2, n_videos):
        raise InvalidParams("kb_size must be >= n_videos and >= 2")
    if not 0.0 <= noise_ratio < 1.0:
        raise InvalidParams("noise_ratio must lie in [0, 1)")

    rng = random.Random(seed)
    vocab = load_vocab()
    side = max(2, math.ceil(kb_size ** (1 / 3)))
    sizes = {
        "brands": side,
        "lines": side,
        "models": max(2, math.ceil(kb_size / (side * side))),
        "categories": min(4, len(vocab["categories"])),
        "fillers": 6,
        "interjections": 8,
    }
    words = _pick_distinct(rng, vocab, sizes, dim)

    combos = [_Parts(b, l, m) for b in words["brands"] for l in words["lines"] for m in words["models"]]
    picked = rng.sample(combos, kb_size)
    line_category = {l: rng.choice(words["categories"]) for l in words["lines"]}
    entities = []
    parts_of: dict[str, _Parts] = {}
    for i, p in enumerate(picked):
        eid = f"e{i:05d}"
        parts_of[eid] = p
        entities.append(Entity(
            entity_id=eid,
            name=f"{p.brand} {p.line} {p.model}",
            brand=p.brand,
            category=line_category[p.line],
            attributes={"line": p.line, "model": p.model},
            text_embedding=_emb(f"{p.brand} {p.line} {p.model}", dim),
            image_embedding=_emb(f"{p.line} {p.model}", dim),
        ))
    by_brand: dict[str, list[str]] = {}
    for e in entities:
        by_brand.setdefault(e.brand, []).append(e.entity_id)
    eligible = [e.entity_id for e in entities if len(by_brand[e.brand]) >= 2]
    if len(eligible) < n_videos:
        raise InvalidParams("not enough entities with a same-brand distractor")
    gts = rng.sample(eligible, n_videos)

    video_ids = [f"v{i:04d}" for i in range(n_videos)]
    manifest = DatasetManifest(
        embedding_dim=dim,
        video_ids=tuple(video_ids),
        kb_path="kb.jsonl",
        notes=(f"synthetic planted-signal dataset: seed={seed} videos={n_videos} "
               f"clips={clips_per_video} kb={kb_size} dim={dim} noise={noise_ratio}"),
    )
    kb = KnowledgeBase(tuple(entities), manifest)
    index = build_index(kb, ALPHA_TEXT)
    image_of = {e.entity_id: e.image_embedding for e in entities}

    streams = []
    n_signal = round((1.0 - noise_ratio) * clips_per_video)
    for vid, gt in zip(video_ids, gts):
        signal_at = set(rng.sample(range(clips_per_video), n_signal))
        gp = parts_of[gt]
        others = [e for e in by_brand[gp.brand] if e != gt]
        clips = []
        t = 0.0
        for idx in range(clips_per_video):
            dur = round(rng.uniform(2.0, 5.5), 2)
            frames: tuple[Embedding, ...] = ()
            if idx in signal_at:
                mention = [gp.brand, gp.line, gp.model]
                if rng.random() < 0.5:
                    mention.append(line_category[gp.line])
                said = rng.sample(words["fillers"], 2) + mention + rng.sample(words["fillers"], 1)
                if rng.random() < 0.6:
                    frames = (image_of[gt],)
            elif rng.random() < 0.1:
                said = []
            else:
                said = rng.sample(words["interjections"], rng.randint(2, 3))
                if rng.random() < 0.6:
                    d_id = rng.choice(others)
                    d = parts_of[d_id]
                    said += [d.brand, d.line, d.model]
                    if rng.random() < 0.5:
                        frames = (image_of[d_id],)
            clip = Clip(idx, round(t, 2), round(t + dur, 2), " ".join(said), frames)
            if idx in signal_at:
                _check_planted(index, gt, clip, dim)
            clips.append(clip)
            t += dur
        streams.append(ClipStream(vid, gt, tuple(clips)))

    out = Path(out_dir)
    (out / VIDEOS_DIR).mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out / MANIFEST_NAME)
    write_knowledge_base(kb, out / manifest.kb_path)
    for s in streams:
        write_clip_stream(s, out / VIDEOS_DIR / f"{s.video_id}.json")
    return out
