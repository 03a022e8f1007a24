"""LLM backend contract: HTTP chat-completions client, scripted test backend,
prompt templates and the call log used for timing reports."""

from __future__ import annotations

import json
import logging
import re
import string
import threading
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Protocol, Sequence

import requests

from ovel.datamodel import BackendSpec, KnowledgeBase
from ovel.errors import GatewayError, HttpStatus, MalformedResponse, Timeout, UnboundPlaceholder

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("summary", "memory_update", "choice")
REQUIRED_PLACEHOLDERS = {
    "summary": {"transcript", "format_instructions"},
    "memory_update": {"transcript", "memory", "candidates", "format_instructions"},
    "choice": {"memory", "candidates"},
}
EMPTY_VALUE = "(empty)"

_TOKEN_RE = re.compile(r"\w+")


def tokens(text: str) -> list[str]:
    """Case-folded word tokens; punctuation and whitespace separate tokens."""
    return _TOKEN_RE.findall(text.casefold())


# -- transport ----------------------------------------------------------------


def post_json(url: str, payload: Mapping[str, Any], *, timeout_s: float,
              max_retries: int = 1, headers: Mapping[str, str] | None = None,
              session: requests.Session | None = None) -> Any:
    """POST JSON and decode the JSON answer.

    Timeouts, unreachable hosts and 5xx answers are retried up to
    ``max_retries`` times; 4xx and undecodable bodies fail immediately.
    """
    post = session.post if session is not None else requests.post
    last: GatewayError | None = None
    for attempt in range(max_retries + 1):
        try:
            resp = post(url, json=payload, headers=dict(headers or {}), timeout=timeout_s)
        except requests.Timeout as exc:
            last = Timeout(f"no answer from {url} within {timeout_s:.3f}s")
            last.__cause__ = exc
            continue
        except requests.ConnectionError as exc:
            last = Timeout(f"{url} unreachable: {exc}")
            last.__cause__ = exc
            continue
        if resp.status_code >= 500:
            last = HttpStatus(resp.status_code, resp.text)
            continue
        if resp.status_code >= 400:
            raise HttpStatus(resp.status_code, resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"non-JSON body from {url}") from exc
    assert last is not None
    log.warning("giving up on %s after %d attempt(s): %s", url, max_retries + 1, last)
    raise last


# -- templates ----------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.text) if f}

    def check(self) -> None:
        missing = REQUIRED_PLACEHOLDERS.get(self.name, set()) - self.placeholders
        if missing:
            raise ValueError(f"template {self.name!r} lacks placeholders {sorted(missing)}")


def render(template: PromptTemplate, bindings: Mapping[str, Any]) -> str:
    """Substitute ``{placeholder}`` fields; blank values render as ``(empty)``."""
    out = []
    for literal, name, spec, conv in string.Formatter().parse(template.text):
        out.append(literal)
        if name is None:
            continue
        if name not in bindings:
            raise UnboundPlaceholder(name)
        value = str(bindings[name])
        out.append(value if value.strip() else EMPTY_VALUE)
    return "".join(out)


def template_overhead(template: PromptTemplate) -> int:
    """Rendered length with every placeholder blank: the fixed part of a prompt."""
    return len(render(template, {p: "" for p in template.placeholders}))


def load_templates(templates_dir: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load the packaged English templates, overridden by files in ``templates_dir``."""
    out = {}
    for name in TEMPLATE_NAMES:
        override = Path(templates_dir) / f"{name}.txt" if templates_dir else None
        if override is not None and override.exists():
            text = override.read_text(encoding="utf-8")
        else:
            text = resources.files("ovel").joinpath("templates", f"{name}.txt").read_text(
                encoding="utf-8"
            )
        tpl = PromptTemplate(name, text)
        tpl.check()
        out[name] = tpl
    return out


# -- backends -----------------------------------------------------------------


class Backend(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpChatBackend:
    """OpenAI-style ``/chat/completions`` client, one user turn per call."""

    def __init__(self, spec: BackendSpec, api_key: str | None = None):
        self.spec = spec
        self.url = spec.endpoint.rstrip("/") + "/chat/completions"
        self.headers = {"Content-Type": "application/json"}
        if api_key:
            self.headers["Authorization"] = f"Bearer {api_key}"
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.spec.model,
            "temperature": self.spec.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        data = post_json(self.url, payload, timeout_s=self.spec.timeout_ms / 1000.0,
                         max_retries=self.spec.max_retries, headers=self.headers,
                         session=self._session())
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected payload: {json.dumps(data)[:200]}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        return content.strip()


class FailingBackend:
    """Backend that always raises; used to exercise degradation paths."""

    def __init__(self, error: type[GatewayError] = Timeout):
        self.error = error

    def complete(self, prompt: str) -> str:
        if self.error is HttpStatus:
            raise HttpStatus(503)
        raise self.error("backend configured to fail")


# scripted backend -------------------------------------------------------------

_HEADERS = ("FORMAT:", "EXAMPLES:", "CURRENT MEMORY:", "CANDIDATES:", "TRANSCRIPT:", "ANSWER:")


def split_sections(prompt: str) -> tuple[str | None, dict[str, str]]:
    """Split a rendered prompt into its ``HEADER:`` sections."""
    task = None
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in prompt.splitlines():
        stripped = line.strip()
        if stripped.startswith("TASK:") and task is None:
            task = stripped[len("TASK:"):].strip()
            current = None
        elif stripped in _HEADERS:
            current = sections.setdefault(stripped[:-1], [])
        elif current is not None:
            current.append(line)
    return task, {k: "\n".join(v).strip() for k, v in sections.items()}


def _rule_regex(rule: Any) -> re.Pattern[str]:
    if isinstance(rule, re.Pattern):
        return rule
    if isinstance(rule, str):
        return re.compile(rule, re.IGNORECASE)
    if isinstance(rule, (list, tuple, set, frozenset)):
        rule = {"lexicon": list(rule)}
    if not isinstance(rule, Mapping) or len(rule) != 1:
        raise ValueError(f"bad vocabulary rule {rule!r}")
    (kind, arg), = rule.items()
    if kind == "lexicon":
        words = sorted({str(w) for w in arg if str(w).strip()}, key=lambda w: (-len(w), w))
        alt = "|".join(re.escape(w) for w in words) or r"(?!x)x"
        return re.compile(rf"(?<!\w)({alt})(?!\w)", re.IGNORECASE)
    if kind == "after":
        return re.compile(rf"(?<!\w){re.escape(arg)}\s+([\w.]+)", re.IGNORECASE)
    if kind == "before":
        return re.compile(rf"([\w.]+)\s+{re.escape(arg)}(?!\w)", re.IGNORECASE)
    if kind == "pattern":
        return re.compile(arg, re.IGNORECASE)
    raise ValueError(f"unknown vocabulary rule kind {kind!r}")


def compile_vocabulary(vocabulary: Mapping[str, Any]) -> list[tuple[str, re.Pattern[str]]]:
    """Compile ``attribute -> rule`` into ordered (attribute, regex) pairs.

    A rule is a regex string with one capture group, a word list, or one of
    ``{"lexicon": [...]}``, ``{"after": kw}`` (value follows ``kw``),
    ``{"before": kw}`` (value precedes ``kw``), ``{"pattern": regex}``.
    """
    return [(name, _rule_regex(rule)) for name, rule in vocabulary.items()]


def vocabulary_from_kb(kb: KnowledgeBase) -> dict[str, dict[str, list[str]]]:
    """Lexicon rules for brand, category and every attribute key found in the KB."""
    values: dict[str, set[str]] = {}
    for ent in kb.entities:
        if ent.brand:
            values.setdefault("brand", set()).add(ent.brand)
        if ent.category:
            values.setdefault("category", set()).add(ent.category)
        for k, v in ent.attributes.items():
            values.setdefault(k, set()).add(v)
    head = [k for k in ("brand", "category") if k in values]
    rest = sorted(k for k in values if k not in ("brand", "category"))
    return {k: {"lexicon": sorted(values[k])} for k in head + rest}


def _parse_memory_text(text: str) -> list[list[str]]:
    if not text or text.strip() == EMPTY_VALUE:
        return []
    entries: list[list[str]] = []
    for line in text.splitlines():
        if "; attributes:" in line:
            head, attrs = line.split("; attributes:", 1)
            key, _, value = head.partition(":")
            if key.strip() and value.strip():
                entries.append([key.strip(), value.strip()])
            for pair in attrs.split(","):
                key, sep, value = pair.partition("=")
                if sep and key.strip():
                    entries.append([key.strip(), value.strip()])
            continue
        key, sep, value = line.partition(":")
        if sep and key.strip():
            entries.append([key.strip(), value.strip()])
    return entries


class ScriptedBackend:
    """Deterministic rule-based stand-in for the LLM.

    ``summary`` and ``memory_update`` prompts: each vocabulary attribute is
    matched against the transcript section; the most frequent match wins,
    ties going to the value already in memory, then to a value found in the
    candidate list, then to the earliest mention. The reply lists the updated
    memory as ``name: value`` lines.

    ``choice`` prompts: the candidate whose text shares the most case-folded
    tokens with the memory section wins; ties go to the first listed.
    """

    def __init__(self, vocabulary: Mapping[str, Any], sim_base_s: float = 0.05,
                 sim_s_per_char: float = 3e-4):
        self.vocabulary = compile_vocabulary(vocabulary)
        self.sim_base_s = sim_base_s
        self.sim_s_per_char = sim_s_per_char

    def simulated_latency(self, prompt: str, reply: str) -> float:
        return self.sim_base_s + self.sim_s_per_char * (len(prompt) + len(reply))

    def complete(self, prompt: str) -> str:
        task, sections = split_sections(prompt)
        if task in ("summary", "memory_update"):
            memory = _parse_memory_text(sections.get("CURRENT MEMORY", "")) if task == "memory_update" else []
            cands = sections.get("CANDIDATES", "")
            return self._extract(sections.get("TRANSCRIPT", ""), memory,
                                 "" if cands == EMPTY_VALUE else cands)
        if task == "choice":
            return self._choose(sections.get("CURRENT MEMORY", ""), sections.get("CANDIDATES", ""))
        raise MalformedResponse(f"scripted backend cannot handle task {task!r}")

    def extract_values(self, transcript: str, current: Mapping[str, str] | None = None,
                       candidates_text: str = "") -> dict[str, str]:
        current = current or {}
        cand_tokens = set(tokens(candidates_text))
        chosen: dict[str, str] = {}
        if transcript.strip() == EMPTY_VALUE:
            return chosen
        for name, regex in self.vocabulary:
            counts: Counter[str] = Counter()
            first: dict[str, int] = {}
            for m in regex.finditer(transcript):
                value = (m.group(1) if m.groups() else m.group(0)).strip().casefold()
                if not value:
                    continue
                counts[value] += 1
                first.setdefault(value, m.start())
            if not counts:
                continue
            held = (current.get(name) or "").casefold()

            def rank(v: str) -> tuple:
                in_cands = bool(tokens(v)) and set(tokens(v)) <= cand_tokens
                return (-counts[v], v != held, not in_cands, first[v])

            chosen[name] = min(counts, key=rank)
        return chosen

    def _extract(self, transcript: str, memory: list[list[str]], candidates_text: str) -> str:
        current = {k: v for k, v in memory}
        for name, value in self.extract_values(transcript, current, candidates_text).items():
            for entry in memory:
                if entry[0] == name:
                    entry[1] = value
                    break
            else:
                memory.append([name, value])
        return "\n".join(f"{k}: {v}" for k, v in memory)

    def _choose(self, memory_text: str, candidates_text: str) -> str:
        mem = set() if memory_text.strip() == EMPTY_VALUE else set(tokens(memory_text))
        best: tuple[int, str] | None = None
        for line in candidates_text.splitlines():
            m = re.match(r"\s*([A-Z]+)\s*:\s*(.*)$", line)
            if not m:
                continue
            overlap = len(mem & set(tokens(m.group(2))))
            if best is None or overlap > best[0]:
                best = (overlap, m.group(1))
        return best[1] if best else "none"


# -- gateway ------------------------------------------------------------------


@dataclass(frozen=True)
class CallRecord:
    purpose: str
    prompt_chars: int
    latency_s: float
    simulated_s: float | None
    ok: bool
    error: str | None = None


@dataclass
class Gateway:
    """Thread-safe front for one backend: concurrency cap plus a call log."""

    backend: Backend
    max_concurrency: int = 4
    calls: list[CallRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.max_concurrency)
        self._lock = threading.Lock()
        self._local = threading.local()

    @property
    def simulated(self) -> bool:
        return hasattr(self.backend, "simulated_latency")

    def complete(self, prompt: str, purpose: str = "") -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        with self._slots:
            t0 = time.perf_counter()
            try:
                reply = self.backend.complete(prompt)
            except GatewayError as exc:
                self._record(purpose, prompt, time.perf_counter() - t0, "", exc)
                raise
            self._record(purpose, prompt, time.perf_counter() - t0, reply, None)
        return reply

    def _record(self, purpose: str, prompt: str, elapsed: float, reply: str,
                exc: GatewayError | None) -> None:
        sim = getattr(self.backend, "simulated_latency", None)
        rec = CallRecord(
            purpose=purpose,
            prompt_chars=len(prompt),
            latency_s=elapsed,
            simulated_s=sim(prompt, reply) if sim else None,
            ok=exc is None,
            error=None if exc is None else type(exc).__name__,
        )
        with self._lock:
            self.calls.append(rec)
        for sink in getattr(self._local, "sinks", ()):
            sink.append(rec)

    @contextmanager
    def capture(self) -> Iterator[list[CallRecord]]:
        """Collect the calls made by the current thread inside the block."""
        sinks = self._local.__dict__.setdefault("sinks", [])
        sink: list[CallRecord] = []
        sinks.append(sink)
        try:
            yield sink
        finally:
            sinks.remove(sink)


def make_backend(spec: BackendSpec, kb: KnowledgeBase | None = None,
                 api_key: str | None = None) -> Backend:
    if spec.kind == "http_chat":
        return HttpChatBackend(spec, api_key=api_key)
    if spec.kind == "scripted":
        vocab = spec.vocabulary
        if vocab is None:
            vocab = vocabulary_from_kb(kb) if kb is not None else {}
        return ScriptedBackend(vocab, sim_base_s=spec.sim_base_s, sim_s_per_char=spec.sim_s_per_char)
    raise ValueError(f"unknown backend kind {spec.kind!r}")


def make_gateway(spec: BackendSpec, kb: KnowledgeBase | None = None,
                 api_key: str | None = None) -> Gateway:
    return Gateway(make_backend(spec, kb, api_key), max_concurrency=spec.max_concurrency)


def complete(spec: BackendSpec, prompt: str) -> str:
    """One-shot completion against the backend described by ``spec``."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    return make_backend(spec).complete(prompt)


def label_for(i: int) -> str:
    """Candidate label for rank ``i`` (0-based): A..Z, then AA, AB, ..."""
    out = ""
    i += 1
    while i:
        i, rem = divmod(i - 1, 26)
        out = chr(ord("A") + rem) + out
    return out


def format_candidate_lines(labels: Sequence[str], texts: Iterable[str]) -> str:
    return "\n".join(f"{lab}: {text}" for lab, text in zip(labels, texts))
