from __future__ import annotations

import json
import socket
import threading

import pytest

from pacerag.llm import (
    PROFILES,
    BackendDescriptor,
    BackendError,
    BackendUnavailable,
    ChatMessage,
    CompletionResult,
    GenerationParams,
    MaxRetriesExceeded,
    ReplayBackend,
    HttpBackend,
    ScriptMiss,
    Timeout,
    complete_with_repair,
    messages_digest,
    profile,
    strip_think,
)

MSGS = [ChatMessage("system", "sys"), ChatMessage("user", "hello")]


def _ok(text):
    return (200, {"choices": [{"message": {"content": text}}]})


def test_generation_profiles_match_published_settings():
    # Reference value: generation settings per backbone.
    assert (PROFILES["llama"].temperature, PROFILES["llama"].max_tokens, PROFILES["llama"].context_window) == (0.8, 400, 8192)
    assert (PROFILES["qwen"].temperature, PROFILES["qwen"].max_tokens, PROFILES["qwen"].context_window) == (0.6, 220, 4096)
    with pytest.raises(ValueError):
        profile("gpt")


def test_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(temperature=-0.1)
    assert GenerationParams().with_seed(7).seed == 7


def test_message_roles():
    with pytest.raises(ValueError):
        ChatMessage("tool", "x")
    with pytest.raises(ValueError):
        ChatMessage("user", "")
    assert ChatMessage("assistant", "").content == ""


def test_descriptor_validation():
    with pytest.raises(ValueError):
        BackendDescriptor("http")
    with pytest.raises(ValueError):
        BackendDescriptor("scripted")
    with pytest.raises(ValueError):
        BackendDescriptor("grpc", "http://x")


def test_strip_think():
    assert strip_think("<think>plan</think>  answer") == "answer"
    assert strip_think("<THINK>never closed") == ""


def test_digest_depends_on_roles_and_order():
    a = messages_digest(MSGS)
    assert a == messages_digest(list(MSGS))
    assert a != messages_digest(MSGS[::-1])
    assert a != messages_digest([ChatMessage("system", "sys"), ChatMessage("assistant", "hello")])


def test_http_payload_shape(http_stub):
    http_stub.responses.append(_ok("<think>x</think>done"))
    be = HttpBackend(http_stub.url + "/v1/", "m1", api_key="secret", retries=1)
    res = be.complete(MSGS, GenerationParams(0.6, 220, 4096, 42), stage="initial")
    assert res.text == "done"
    req = http_stub.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["body"] == {
        "model": "m1",
        "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "hello"}],
        "temperature": 0.6, "max_tokens": 220, "seed": 42,
    }
    assert req["headers"]["Authorization"] == "Bearer secret"


def test_http_retries_on_server_error(http_stub):
    http_stub.responses += [(500, {"error": "x"}), (429, {"error": "slow"}), _ok("fine")]
    be = HttpBackend(http_stub.url, "m", retries=3, backoff=0.0)
    assert be.complete(MSGS, GenerationParams()).text == "fine"
    assert len(http_stub.requests) == 3


def test_http_gives_up_after_retries(http_stub):
    http_stub.default = (503, {"error": "down"})
    be = HttpBackend(http_stub.url, "m", retries=2, backoff=0.0)
    with pytest.raises(BackendUnavailable):
        be.complete(MSGS, GenerationParams())
    assert len(http_stub.requests) == 2


def test_http_malformed_body(http_stub):
    http_stub.responses.append((200, {"nothing": True}))
    with pytest.raises(BackendError):
        HttpBackend(http_stub.url, "m", retries=1).complete(MSGS, GenerationParams())


def test_http_timeout():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(4)
    held = []
    stop = threading.Event()

    def accept():
        srv.settimeout(0.1)
        while not stop.is_set():
            try:
                held.append(srv.accept()[0])
            except OSError:
                pass

    t = threading.Thread(target=accept, daemon=True)
    t.start()
    try:
        be = HttpBackend(f"http://127.0.0.1:{srv.getsockname()[1]}", "m", timeout=0.2, retries=1)
        with pytest.raises(Timeout):
            be.complete(MSGS, GenerationParams())
    finally:
        stop.set()
        t.join()
        for c in held:
            c.close()
        srv.close()


def test_unreachable_endpoint():
    be = HttpBackend("http://127.0.0.1:9", "m", timeout=0.5, retries=1)
    with pytest.raises(BackendUnavailable):
        be.complete(MSGS, GenerationParams())


class _Seq:
    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.seen = []

    def complete(self, messages, params, stage=""):
        self.seen.append(list(messages))
        return CompletionResult(self.outputs.pop(0))


def _int(text):
    return int(text)


def test_repair_succeeds_on_second_attempt():
    be = _Seq(["nope", "5"])
    out = complete_with_repair(be, MSGS, GenerationParams(), _int, stage="judge")
    assert out.value == 5 and out.result.attempts_used == 2 and out.outputs == ["nope", "5"]
    retry = be.seen[1]
    assert retry[:2] == MSGS and retry[2] == ChatMessage("assistant", "nope")
    assert "Relevance (1-5)" in retry[3].content


def test_repair_exhausts():
    with pytest.raises(MaxRetriesExceeded) as info:
        complete_with_repair(_Seq(["a", "b", "c"]), MSGS, GenerationParams(), _int, max_attempts=3)
    assert info.value.attempts == 3 and info.value.last_text == "c"
    with pytest.raises(ValueError):
        complete_with_repair(_Seq([]), MSGS, GenerationParams(), _int, max_attempts=0)


def test_replay_backend(tmp_path):
    digest = messages_digest(MSGS)
    row = {"trace": {"calls": [{"stage": "initial", "digest": digest, "output": "recorded"}]}}
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(row) + "\n\n")
    be = ReplayBackend.from_manifest(p)
    assert be.complete(MSGS, GenerationParams(), stage="initial").text == "recorded"
    with pytest.raises(ScriptMiss):
        be.complete(MSGS, GenerationParams(), stage="focus")
