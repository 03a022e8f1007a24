from __future__ import annotations

import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovel.datamodel import BackendSpec
from ovel.errors import HttpStatus, MalformedResponse, Timeout, UnboundPlaceholder
from ovel.gateway import (
    FailingBackend,
    Gateway,
    HttpChatBackend,
    PromptTemplate,
    ScriptedBackend,
    label_for,
    load_templates,
    render,
    split_sections,
    template_overhead,
)


def choice_prompt(memory: str, cands: list[str]) -> str:
    return render(load_templates()["choice"], {"memory": memory, "candidates": "\n".join(cands)})


def update_prompt(transcript: str, memory: str = "", candidates: str = "") -> str:
    return render(load_templates()["memory_update"], {
        "transcript": transcript, "memory": memory, "candidates": candidates,
        "format_instructions": "name: value lines"})


def test_scripted_choice_max_overlap():
    b = ScriptedBackend({})
    assert b.complete(choice_prompt("brand: nike\nline: air", ["A: Nike Air", "B: Adidas Boost"])) == "A"
    assert b.complete(choice_prompt("brand: adidas", ["A: Nike Air", "B: Adidas Boost"])) == "B"
    # no overlap anywhere: first listed
    assert b.complete(choice_prompt("brand: puma", ["A: Nike Air", "B: Adidas Boost"])) == "A"


def test_scripted_extraction_example():
    b = ScriptedBackend({"brand": ["nike", "adidas"], "size": {"after": "size"}})
    reply = b.complete(update_prompt("this nike air max is size 42"))
    assert reply.splitlines() == ["brand: nike", "size: 42"]


def test_scripted_keeps_memory_and_appends():
    b = ScriptedBackend({"brand": ["nike"], "generation": {"before": "generation"}})
    reply = b.complete(update_prompt("these are the 37th generation", memory="brand: nike"))
    assert reply.splitlines() == ["brand: nike", "generation: 37th"]


def test_scripted_tie_prefers_held_value_then_candidates():
    b = ScriptedBackend({"brand": ["nike", "puma"]})
    assert b.extract_values("puma nike", {"brand": "nike"}) == {"brand": "nike"}
    assert b.extract_values("puma nike", {}, "- nike air") == {"brand": "nike"}
    assert b.extract_values("puma nike", {}) == {"brand": "puma"}
    assert b.extract_values("puma nike nike", {"brand": "puma"}) == {"brand": "nike"}


def test_scripted_unknown_task():
    with pytest.raises(MalformedResponse):
        ScriptedBackend({}).complete("hello")


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=80))
def test_scripted_is_pure(text):
    b = ScriptedBackend({"brand": ["nike", "adidas"], "size": {"after": "size"}})
    p = update_prompt(text)
    assert b.complete(p) == b.complete(p)


def test_render_rules():
    tpl = load_templates()["memory_update"]
    bindings = {"transcript": "hi", "memory": "", "candidates": "- x", "format_instructions": "f"}
    out = render(tpl, bindings)
    assert "CURRENT MEMORY:\n(empty)" in out
    assert render(tpl, bindings) == out
    del bindings["candidates"]
    with pytest.raises(UnboundPlaceholder) as info:
        render(tpl, bindings)
    assert info.value.name == "candidates"


def test_templates_have_negative_examples_and_placeholders(tmp_path):
    tpls = load_templates()
    for name, tpl in tpls.items():
        assert "EXAMPLES:" in tpl.text
        tpl.check()
        assert template_overhead(tpl) > 0
    (tmp_path / "choice.txt").write_text("TASK: choice\nCURRENT MEMORY:\n{memory}\nCANDIDATES:\n{candidates}\n")
    assert load_templates(tmp_path)["choice"].text.startswith("TASK: choice")
    (tmp_path / "summary.txt").write_text("no placeholders")
    with pytest.raises(ValueError):
        load_templates(tmp_path)


def test_split_sections():
    task, sec = split_sections("TASK: x\nTRANSCRIPT:\nhello\nworld\nANSWER:\n")
    assert task == "x" and sec["TRANSCRIPT"] == "hello\nworld"


def test_labels():
    assert [label_for(i) for i in (0, 1, 25, 26, 27)] == ["A", "B", "Z", "AA", "AB"]


def test_gateway_logs_and_captures():
    gw = Gateway(ScriptedBackend({}))
    with gw.capture() as calls:
        gw.complete(choice_prompt("x", ["A: x"]), "choice")
    assert len(calls) == 1 and calls[0].ok and calls[0].simulated_s > 0
    gw.complete(choice_prompt("x", ["A: x"]), "choice")
    assert len(gw.calls) == 2 and len(calls) == 1
    with pytest.raises(ValueError):
        gw.complete("")
    failing = Gateway(FailingBackend())
    with pytest.raises(Timeout):
        failing.complete("p", "summary")
    assert failing.calls[0].error == "Timeout" and not failing.calls[0].ok
    with pytest.raises(HttpStatus):
        Gateway(FailingBackend(HttpStatus)).complete("p")


def test_gateway_concurrency_cap():
    active = [0]
    peak = [0]
    lock = threading.Lock()

    class Slow:
        def complete(self, prompt):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            time.sleep(0.02)
            with lock:
                active[0] -= 1
            return "ok"

    gw = Gateway(Slow(), max_concurrency=2)
    threads = [threading.Thread(target=gw.complete, args=("p",)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2 and len(gw.calls) == 8


# -- HTTP ---------------------------------------------------------------------


class FakeServer:
    """Chat-completions stub answering from a script of (status, body) pairs."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        owner = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                owner.requests.append((self.path, json.loads(self.rfile.read(length))))
                status, body = owner.script.pop(0) if owner.script else (500, "exhausted")
                data = body if isinstance(body, str) else json.dumps(body)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(data.encode())

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.02,), daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def test_http_payload_and_trim():
    with FakeServer([(200, reply("  B \n"))]) as srv:
        b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=srv.url, model="m"))
        assert b.complete("pick one") == "B"
    path, payload = srv.requests[0]
    assert path == "/v1/chat/completions"
    assert payload == {"model": "m", "temperature": 0.0,
                       "messages": [{"role": "user", "content": "pick one"}]}


def test_http_4xx_not_retried():
    with FakeServer([(400, "bad"), (200, reply("A"))]) as srv:
        b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=srv.url))
        with pytest.raises(HttpStatus) as info:
            b.complete("x")
    assert info.value.code == 400 and len(srv.requests) == 1


def test_http_5xx_retried_once():
    with FakeServer([(503, "busy"), (200, reply("A"))]) as srv:
        b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=srv.url))
        assert b.complete("x") == "A"
    with FakeServer([(503, "busy"), (502, "busy"), (200, reply("A"))]) as srv:
        b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=srv.url))
        with pytest.raises(HttpStatus):
            b.complete("x")
    assert len(srv.requests) == 2


@pytest.mark.parametrize("body", ["not json", {"choices": []}, {"choices": [{"message": {"content": 3}}]}])
def test_http_malformed(body):
    with FakeServer([(200, body)]) as srv:
        b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=srv.url))
        with pytest.raises(MalformedResponse):
            b.complete("x")


def test_http_silent_endpoint_times_out_after_retries():
    # accepts connections but never answers
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen(8)
    try:
        url = f"http://127.0.0.1:{sock.getsockname()[1]}/v1"
        b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=url, timeout_ms=200, max_retries=1))
        t0 = time.perf_counter()
        with pytest.raises(Timeout):
            b.complete("x")
        elapsed = time.perf_counter() - t0
    finally:
        sock.close()
    assert 0.4 <= elapsed < 1.5


def test_http_refused_maps_to_timeout():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    b = HttpChatBackend(BackendSpec(kind="http_chat", endpoint=f"http://127.0.0.1:{port}/v1",
                                    timeout_ms=200, max_retries=0))
    with pytest.raises(Timeout):
        b.complete("x")
