"""Text embedders, modality fusion and cosine similarity."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ovel.datamodel import Embedding, EmbedderSpec
from ovel.errors import DimMismatch, MalformedResponse, NoModality, ZeroVector
from ovel.gateway import post_json, tokens

log = logging.getLogger(__name__)

_ZERO_TOL = 1e-12


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm <= _ZERO_TOL:
        raise ZeroVector(f"{what} has zero norm")
    return vec / norm


def cosine(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise DimMismatch(f"cannot compare dims {a.dim} and {b.dim}")
    x, y = a.as_array(), b.as_array()
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx <= _ZERO_TOL or ny <= _ZERO_TOL:
        raise ZeroVector("cosine of a zero vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def token_bucket(token: str, dim: int) -> int:
    """Stable bucket for ``token``; independent of process and hash seed."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


def embed_text_deterministic(text: str, dim: int) -> Embedding:
    """Hashed bag-of-tokens embedding, L2-normalised (zero vector if no tokens)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim)
    for tok in tokens(text):
        vec[token_bucket(tok, dim)] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return Embedding.from_array(vec)


def fuse(text_emb: Embedding | None, image_embs: Sequence[Embedding],
         alpha_text: float) -> Embedding:
    """Weighted combination of a text embedding and mean-pooled keyframes.

    Each modality is normalised first; with one modality present its
    normalised vector is returned whatever ``alpha_text`` is.
    """
    if text_emb is None and not image_embs:
        raise NoModality("neither text nor image embeddings given")
    dims = {e.dim for e in image_embs}
    if text_emb is not None:
        dims.add(text_emb.dim)
    if len(dims) > 1:
        raise DimMismatch(f"inconsistent dims {sorted(dims)}")
    text = _unit(text_emb.as_array(), "text embedding") if text_emb is not None else None
    image = None
    if image_embs:
        pooled = np.mean([e.as_array() for e in image_embs], axis=0)
        image = _unit(pooled, "pooled image embedding")
    if text is None:
        return Embedding.from_array(image)
    if image is None:
        return Embedding.from_array(text)
    mixed = alpha_text * text + (1.0 - alpha_text) * image
    return Embedding.from_array(_unit(mixed, "fused embedding"))


class TextEmbedder(Protocol):
    dim: int

    def embed(self, text: str) -> Embedding: ...


class HashEmbedder:
    def __init__(self, dim: int):
        self.dim = dim

    def embed(self, text: str) -> Embedding:
        return embed_text_deterministic(text, self.dim)


class LookupEmbedder:
    """Precomputed vectors keyed by exact text; unknown text maps to a zero vector."""

    def __init__(self, table: dict[str, Embedding], dim: int):
        for key, emb in table.items():
            if emb.dim != dim:
                raise DimMismatch(f"lookup entry {key[:40]!r} has dim {emb.dim}, expected {dim}")
        self.table = table
        self.dim = dim

    @classmethod
    def from_file(cls, path: str | Path, dim: int) -> LookupEmbedder:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({k: Embedding.float32(v) for k, v in raw.items()}, dim)

    def embed(self, text: str) -> Embedding:
        hit = self.table.get(text)
        if hit is None:
            log.debug("lookup miss for %r", text[:60])
            return Embedding.from_array(np.zeros(self.dim))
        return hit


class RemoteEmbedder:
    """Client for ``POST {"input": [...]} -> {"embeddings": [[...]]}``."""

    def __init__(self, endpoint: str, dim: int, timeout_ms: int = 30000, max_retries: int = 1):
        self.endpoint = endpoint
        self.dim = dim
        self.timeout_s = timeout_ms / 1000.0
        self.max_retries = max_retries

    def embed_many(self, texts: Sequence[str]) -> list[Embedding]:
        data = post_json(self.endpoint, {"input": list(texts)}, timeout_s=self.timeout_s,
                         max_retries=self.max_retries)
        try:
            rows = data["embeddings"]
            out = [Embedding.float32(r) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse("embedding service payload lacks 'embeddings'") from exc
        if len(out) != len(texts) or any(e.dim != self.dim for e in out):
            raise MalformedResponse("embedding service returned wrong shape")
        return out

    def embed(self, text: str) -> Embedding:
        return self.embed_many([text])[0]


def make_embedder(spec: EmbedderSpec, default_dim: int) -> TextEmbedder:
    dim = spec.dim or default_dim
    if spec.dim is not None and spec.dim != default_dim:
        raise DimMismatch(f"embedder dim {spec.dim} != manifest dim {default_dim}")
    if spec.kind == "deterministic_hash":
        return HashEmbedder(dim)
    if spec.kind == "precomputed_lookup":
        if not spec.lookup_path:
            raise ValueError("precomputed_lookup embedder needs lookup_path")
        return LookupEmbedder.from_file(spec.lookup_path, dim)
    if spec.kind == "remote_service":
        if not spec.endpoint:
            raise ValueError("remote_service embedder needs endpoint")
        return RemoteEmbedder(spec.endpoint, dim, spec.timeout_ms)
    raise ValueError(f"unknown embedder kind {spec.kind!r}")
